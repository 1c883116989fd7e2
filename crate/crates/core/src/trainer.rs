//! Single-sample SGD with momentum, halving learning-rate schedule,
//! recursion-gradient scaling and checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::{ByteSample, Corpus, DEFAULT_LENGTH_CAP};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{recursion_count, BrcaConfig, BrcaModel};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub halve_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps_per_epoch: u64,
    pub epochs: usize,
    /// Longest raw sample fed to the model, in bytes.
    pub length_cap: usize,
    pub seed: u64,
    /// Divide shared recursion-group gradients by the number of applications.
    pub scale_recursion_grads: bool,
    /// Steps of loss above `2 ln 256` tolerated before aborting.
    pub divergence_window: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            halve_every: 10,
            momentum: 0.9,
            weight_decay: 0.00001,
            steps_per_epoch: 2_000,
            epochs: 30,
            length_cap: DEFAULT_LENGTH_CAP,
            seed: 1,
            scale_recursion_grads: true,
            divergence_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::contract(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.halve_every == 0 {
            return Err(Error::contract("halve_every must be >= 1"));
        }
        if self.length_cap == 0 || self.steps_per_epoch == 0 {
            return Err(Error::contract(
                "length_cap and steps_per_epoch must be positive",
            ));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every.max(1)) as i32)
}

/// Heavy-ball momentum with coupled weight decay:
/// `g = grad + wd * p; buf = mu * buf + g; p -= lr * buf`.
/// Reads gradients from the parameter tensors; leaves them untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    momentum: &mut [Vec<T>],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if momentum.len() != params.len() {
        return Err(Error::contract(format!(
            "{} momentum buffers for {} parameters",
            momentum.len(),
            params.len()
        )));
    }
    for (_, e) in params.entries() {
        if let Some(g) = e.tensor.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {i}",
                    e.name
                )));
            }
        }
    }
    let (lr, mu, wd) = (
        T::from_f64(lr),
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
    );
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let t = params.get_mut(id);
        let buf = &mut momentum[id.index()];
        if buf.len() != t.numel() {
            buf.resize(t.numel(), T::zero());
        }
        match t.values_mut_with_grad() {
            (values, Some(grad)) => {
                for ((p, b), &g) in values.iter_mut().zip(buf.iter_mut()).zip(grad) {
                    *b = mu * *b + (g + wd * *p);
                    *p -= lr * *b;
                }
            }
            (values, None) => {
                for (p, b) in values.iter_mut().zip(buf.iter_mut()) {
                    *b = mu * *b + wd * *p;
                    *p -= lr * *b;
                }
            }
        }
    }
    Ok(())
}

/// Divides the gradients of `ids` by `clones`.
pub fn scale_recursion_grads<T: Scalar>(
    params: &mut ParamStore<T>,
    ids: &[ParamId],
    clones: usize,
) -> Result<()> {
    if clones == 0 {
        return Err(Error::contract("recursion clone count must be >= 1"));
    }
    if clones == 1 {
        return Ok(());
    }
    let c = T::from_f64(clones as f64);
    for &id in ids {
        let t = params.get_mut(id);
        if t.grad().is_some() {
            for v in t.grad_mut() {
                *v /= c;
            }
        }
    }
    Ok(())
}

/// A model the trainer can optimize.
pub trait Trainable: Sized {
    /// Model-kind tag stored in checkpoints.
    const KIND: &'static str;

    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    fn prepare(&self, raw: &[u8]) -> Result<ByteSample>;
    /// Loss, per-position predicted bytes, and parameter gradients.
    fn loss_and_grads(&self, sample: &ByteSample) -> Result<(f64, Vec<u8>, ParamGrads<f32>)>;
    /// Applications of a shared recursion group for `sample` (0 when none).
    fn recursion_clones(&self, sample: &ByteSample) -> Result<usize>;
    fn recursion_param_ids(&self) -> Vec<ParamId>;
    fn write_config(&self, ckpt: &mut Checkpoint) -> Result<()>;
    fn from_config(ckpt: &Checkpoint) -> Result<Self>;
}

impl Trainable for BrcaModel<f32> {
    const KIND: &'static str = "brca";

    fn params(&self) -> &ParamStore<f32> {
        BrcaModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        BrcaModel::params_mut(self)
    }

    fn prepare(&self, raw: &[u8]) -> Result<ByteSample> {
        BrcaModel::prepare(self, raw)
    }

    fn loss_and_grads(&self, sample: &ByteSample) -> Result<(f64, Vec<u8>, ParamGrads<f32>)> {
        BrcaModel::loss_and_grads(self, sample)
    }

    fn recursion_clones(&self, sample: &ByteSample) -> Result<usize> {
        if !self.config().share_recursion_weights {
            return Ok(1);
        }
        recursion_count(sample.padded_len())
    }

    fn recursion_param_ids(&self) -> Vec<ParamId> {
        BrcaModel::recursion_param_ids(self)
    }

    fn write_config(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_config("model", self.config())
    }

    fn from_config(ckpt: &Checkpoint) -> Result<Self> {
        BrcaModel::new(ckpt.get_config::<BrcaConfig>("model")?)
    }
}

/// Fraction of valid positions whose predicted byte differs from the target.
pub fn step_byte_error(predicted: &[u8], sample: &ByteSample) -> f64 {
    let targets = sample.targets();
    let n = sample.valid_len();
    let wrong = (0..n)
        .filter(|&t| predicted.get(t) != Some(&targets[t]))
        .count();
    wrong as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub loss: f64,
    pub byte_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub byte_error: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,byte_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss, self.byte_error
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Per-step loss.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Receives per-epoch results; may stop training early.
pub trait TrainSink<M> {
    fn on_epoch(&mut self, record: &EpochRecord, trainer: &Trainer<M>) -> Result<Control>;
}

/// Sink that ignores everything.
pub struct NoSink;

impl<M> TrainSink<M> for NoSink {
    fn on_epoch(&mut self, _: &EpochRecord, _: &Trainer<M>) -> Result<Control> {
        Ok(Control::Continue)
    }
}

impl<M, F> TrainSink<M> for F
where
    F: FnMut(&EpochRecord, &Trainer<M>) -> Result<Control>,
{
    fn on_epoch(&mut self, record: &EpochRecord, trainer: &Trainer<M>) -> Result<Control> {
        self(record, trainer)
    }
}

/// Training state: model, optimizer buffers, sampling RNG and counters.
pub struct Trainer<M> {
    model: M,
    config: TrainConfig,
    momentum: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
    epoch: usize,
    step_in_epoch: u64,
    global_step: u64,
    high_loss_run: u64,
    epoch_loss: f64,
    epoch_error: f64,
}

const LN_256: f64 = 5.545177444479562;

impl<M: Trainable> Trainer<M> {
    pub fn new(model: M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let momentum = model
            .params()
            .entries()
            .map(|(_, e)| vec![0.0; e.tensor.numel()])
            .collect();
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            momentum,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            high_loss_run: 0,
            epoch_loss: 0.0,
            epoch_error: 0.0,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimization step on a randomly drawn sample.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        let raw = corpus.pick(&mut self.rng)?;
        let raw = &raw[..raw.len().min(self.config.length_cap)];
        let sample = self.model.prepare(raw)?;
        let (loss, predicted, grads) = self.model.loss_and_grads(&sample)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.global_step,
                detail: format!("loss is {loss}"),
            });
        }
        let params = self.model.params_mut();
        params.set_grads(grads)?;
        if self.config.scale_recursion_grads {
            let clones = self.model.recursion_clones(&sample)?;
            if clones > 0 {
                let ids = self.model.recursion_param_ids();
                scale_recursion_grads(self.model.params_mut(), &ids, clones)?;
            }
        }
        let lr = lr_at(self.epoch, &self.config);
        sgd_step(
            self.model.params_mut(),
            &mut self.momentum,
            lr,
            &self.config,
        )?;

        self.high_loss_run = if loss > 2.0 * LN_256 {
            self.high_loss_run + 1
        } else {
            0
        };
        if self.high_loss_run >= self.config.divergence_window {
            return Err(Error::Diverged {
                step: self.global_step,
                detail: format!(
                    "loss above 2 ln 256 for {} consecutive steps",
                    self.high_loss_run
                ),
            });
        }
        let byte_error = step_byte_error(&predicted, &sample);
        self.global_step += 1;
        self.step_in_epoch += 1;
        self.epoch_loss += loss;
        self.epoch_error += byte_error;
        Ok(StepRecord { loss, byte_error })
    }

    /// Runs until `config.epochs` epochs are complete or the sink stops.
    pub fn train(&mut self, corpus: &Corpus, sink: &mut impl TrainSink<M>) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        while !self.is_finished() {
            while self.step_in_epoch < self.config.steps_per_epoch {
                let rec = self.step(corpus)?;
                history.losses.push(rec.loss);
            }
            let steps = self.step_in_epoch as f64;
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.global_step,
                lr: lr_at(self.epoch, &self.config),
                loss: self.epoch_loss / steps,
                byte_error: self.epoch_error / steps,
            };
            self.epoch += 1;
            self.step_in_epoch = 0;
            self.epoch_loss = 0.0;
            self.epoch_error = 0.0;
            history.epochs.push(record);
            if sink.on_epoch(&record, self)? == Control::Stop {
                break;
            }
        }
        Ok(history)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::default();
        c.metadata.insert("kind".into(), M::KIND.into());
        self.model.write_config(&mut c)?;
        c.put_config("train", &self.config)?;
        let m = &mut c.metadata;
        m.insert("state.epoch".into(), self.epoch.to_string());
        m.insert("state.step_in_epoch".into(), self.step_in_epoch.to_string());
        m.insert("state.global_step".into(), self.global_step.to_string());
        m.insert("state.high_loss_run".into(), self.high_loss_run.to_string());
        m.insert("state.epoch_loss".into(), format!("{:?}", self.epoch_loss));
        m.insert(
            "state.epoch_error".into(),
            format!("{:?}", self.epoch_error),
        );
        m.insert("rng.seed".into(), hex(&self.rng.get_seed()));
        m.insert("rng.stream".into(), self.rng.get_stream().to_string());
        m.insert("rng.word_pos".into(), self.rng.get_word_pos().to_string());
        for (id, e) in self.model.params().entries() {
            c.arrays.push(NamedArray {
                name: format!("param/{}", e.name),
                shape: e.tensor.shape().to_vec(),
                values: e.tensor.values().to_vec(),
            });
            c.arrays.push(NamedArray {
                name: format!("momentum/{}", e.name),
                shape: e.tensor.shape().to_vec(),
                values: self.momentum[id.index()].clone(),
            });
        }
        Ok(c)
    }

    /// Restores a trainer saved with [`Trainer::checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let kind = c.meta("kind")?;
        if kind != M::KIND {
            return Err(CheckpointError::ModelKind {
                found: kind.into(),
                expected: M::KIND.into(),
            }
            .into());
        }
        let mut model = M::from_config(c)?;
        load_params(model.params_mut(), c)?;
        let config: TrainConfig = c.get_config("train")?;
        let mut trainer = Trainer::new(model, config)?;
        let seed = unhex(c.meta("rng.seed")?)?;
        trainer.rng = ChaCha8Rng::from_seed(seed);
        trainer.rng.set_stream(c.meta_parse("rng.stream")?);
        trainer.rng.set_word_pos(c.meta_parse("rng.word_pos")?);
        trainer.epoch = c.meta_parse("state.epoch")?;
        trainer.step_in_epoch = c.meta_parse("state.step_in_epoch")?;
        trainer.global_step = c.meta_parse("state.global_step")?;
        trainer.high_loss_run = c.meta_parse("state.high_loss_run")?;
        trainer.epoch_loss = c.meta_parse("state.epoch_loss")?;
        trainer.epoch_error = c.meta_parse("state.epoch_error")?;
        let names: Vec<(ParamId, String)> = trainer
            .model
            .params()
            .entries()
            .map(|(id, e)| (id, e.name.clone()))
            .collect();
        for (id, name) in names {
            let key = format!("momentum/{name}");
            let a = c
                .array(&key)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing {key}")))?;
            if a.values.len() != trainer.momentum[id.index()].len() {
                return Err(CheckpointError::Malformed(format!("{key} has wrong size")).into());
            }
            trainer.momentum[id.index()] = a.values.clone();
        }
        Ok(trainer)
    }
}

/// Copies `param/<name>` arrays of a checkpoint into `store`.
pub fn load_params(store: &mut ParamStore<f32>, c: &Checkpoint) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let key = format!("param/{}", store.entry(id).name);
        let a = c
            .array(&key)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing {key}")))?;
        if a.shape != store.get(id).shape() {
            return Err(CheckpointError::Malformed(format!(
                "{key}: shape {:?} vs {:?}",
                a.shape,
                store.get(id).shape()
            ))
            .into());
        }
        *store.get_mut(id) = Tensor::new(&a.shape, a.values.clone())?;
    }
    Ok(())
}

/// Model-only checkpoint (no optimizer state).
pub fn model_checkpoint<M: Trainable>(model: &M) -> Result<Checkpoint> {
    let mut c = Checkpoint::default();
    c.metadata.insert("kind".into(), M::KIND.into());
    model.write_config(&mut c)?;
    for (_, e) in model.params().entries() {
        c.arrays.push(NamedArray {
            name: format!("param/{}", e.name),
            shape: e.tensor.shape().to_vec(),
            values: e.tensor.values().to_vec(),
        });
    }
    Ok(c)
}

/// Rebuilds a model from any checkpoint holding its config and parameters.
pub fn model_from_checkpoint<M: Trainable>(c: &Checkpoint) -> Result<M> {
    let kind = c.meta("kind")?;
    if kind != M::KIND {
        return Err(CheckpointError::ModelKind {
            found: kind.into(),
            expected: M::KIND.into(),
        }
        .into());
    }
    let mut model = M::from_config(c)?;
    load_params(model.params_mut(), c)?;
    Ok(model)
}

/// Trains `model` on `corpus` from scratch.
pub fn train<M: Trainable>(
    model: M,
    corpus: &Corpus,
    cfg: TrainConfig,
    sink: &mut impl TrainSink<M>,
) -> Result<(M, TrainHistory)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let history = trainer.train(corpus, sink)?;
    Ok((trainer.into_model(), history))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::from(CheckpointError::Malformed(format!("bad rng seed {s:?}")));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn scalar_store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add(
            "p",
            ParamGroup::EncPrefix,
            Tensor::from_f64(&[1], &[v]).unwrap(),
        );
        s.get_mut(id).accumulate_grad(&[g]).unwrap();
        s
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(9, &cfg), 0.001);
        assert_eq!(lr_at(10, &cfg), 0.0005);
        assert_eq!(lr_at(25, &cfg), 0.00025);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            assert!(lr_at(e, &cfg) <= prev);
            prev = lr_at(e, &cfg);
        }
    }

    #[test]
    fn sgd_zero_grad_no_decay_is_noop() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = scalar_store(0.7, 0.0);
        let mut buf = vec![vec![0.0]];
        sgd_step(&mut s, &mut buf, 0.1, &cfg).unwrap();
        assert_eq!(s.get(ParamId(0)).values(), &[0.7]);
    }

    #[test]
    fn sgd_single_step() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..Default::default()
        };
        let mut s = scalar_store(1.0, 1.0);
        let mut buf = vec![vec![0.0]];
        sgd_step(&mut s, &mut buf, 0.1, &cfg).unwrap();
        assert!((s.get(ParamId(0)).values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            momentum: 0.9,
            ..Default::default()
        };
        let mut s = scalar_store(0.0, 1.0);
        let mut buf = vec![vec![0.0]];
        sgd_step(&mut s, &mut buf, 0.1, &cfg).unwrap();
        let p1 = s.get(ParamId(0)).values()[0];
        sgd_step(&mut s, &mut buf, 0.1, &cfg).unwrap();
        let p2 = s.get(ParamId(0)).values()[0];
        assert!((p1 - -0.1).abs() < 1e-15);
        assert!((p1 - p2 - 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_nan_grads() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store(1.0, f64::NAN);
        let mut buf = vec![vec![0.0]];
        assert!(matches!(
            sgd_step(&mut s, &mut buf, 0.1, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.get(ParamId(0)).values(), &[1.0]);
    }

    #[test]
    fn scale_only_touches_listed_params() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add(
            "rec",
            ParamGroup::EncRecursion,
            Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap(),
        );
        let b = s.add(
            "other",
            ParamGroup::EncPrefix,
            Tensor::from_f64(&[1], &[0.0]).unwrap(),
        );
        s.get_mut(a).accumulate_grad(&[8.0, 16.0]).unwrap();
        s.get_mut(b).accumulate_grad(&[8.0]).unwrap();
        scale_recursion_grads(&mut s, &[a], 1).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[8.0, 16.0]);
        scale_recursion_grads(&mut s, &[a], 8).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[1.0, 2.0]);
        assert_eq!(s.get(b).grad().unwrap(), &[8.0]);
        assert!(scale_recursion_grads(&mut s, &[a], 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr0: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            halve_every: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
