//! Reconstruction metrics and the evaluation experiments: EOS placement,
//! input mutation, error by length, and architecture ablations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, ByteSample, Corpus, EOS};
use crate::error::{Error, Result};
use crate::layers::PoolKind;
use crate::model::{param_layer_count, BrcaConfig, BrcaModel};
use crate::scalar::Scalar;
use crate::trainer::{Control, EpochRecord, TrainConfig, Trainer};

/// Anything that maps raw bytes to a per-position byte prediction.
pub trait Autoencoder {
    /// The prepared ground truth and one predicted byte per padded position.
    fn predict(&self, raw: &[u8]) -> Result<(ByteSample, Vec<u8>)>;
}

impl<T: Scalar> Autoencoder for BrcaModel<T> {
    fn predict(&self, raw: &[u8]) -> Result<(ByteSample, Vec<u8>)> {
        let sample = self.prepare(raw)?;
        let out = self.reconstruct(&sample)?;
        Ok((sample, out))
    }
}

/// Mismatches over the first `valid_len` positions (bytes plus EOS), divided
/// by `valid_len`. Missing predictions count as wrong.
pub fn byte_error(predicted: &[u8], truth: &ByteSample) -> f64 {
    byte_error_against(predicted, &truth.targets(), truth.valid_len())
}

fn byte_error_against(predicted: &[u8], targets: &[u8], valid_len: usize) -> f64 {
    let wrong = (0..valid_len)
        .filter(|&t| predicted.get(t) != Some(&targets[t]))
        .count();
    wrong as f64 / valid_len as f64
}

/// Signed distance between the predicted and true EOS positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EosDiff {
    pub diff: i64,
    /// False when the prediction contains no null; `diff` then uses the
    /// padded length as the predicted position.
    pub terminated: bool,
}

pub fn eos_diff(predicted: &[u8], truth: &ByteSample) -> EosDiff {
    let limit = predicted.len().min(truth.padded_len());
    let (pos, terminated) = match predicted[..limit].iter().position(|&b| b == EOS) {
        Some(p) => (p, true),
        None => (truth.padded_len(), false),
    };
    EosDiff {
        diff: pos as i64 - truth.eos_position() as i64,
        terminated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges; bin `i` covers `[edges[i], edges[i + 1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Unit-width integer bins covering `values`.
    pub fn integer(values: &[i64]) -> Self {
        let (lo, hi) = match (values.iter().min(), values.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => {
                return Histogram {
                    edges: vec![0.0],
                    counts: vec![],
                }
            }
        };
        let mut counts = vec![0u64; (hi - lo + 1) as usize];
        for &v in values {
            counts[(v - lo) as usize] += 1;
        }
        let edges = (lo..=hi + 1).map(|e| e as f64).collect();
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub corpus: String,
    pub seed: u64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub scalars: BTreeMap<String, f64>,
    pub histograms: BTreeMap<String, Histogram>,
    pub tables: BTreeMap<String, Table>,
    pub notes: Vec<String>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn new(name: impl Into<String>, provenance: Provenance) -> Self {
        MetricsReport {
            name: name.into(),
            provenance,
            ..Default::default()
        }
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    /// Rejects non-finite scalars.
    pub fn validate(&self) -> Result<()> {
        match self.scalars.iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(Error::NonFinite(format!("metric {k} = {v}"))),
            None => Ok(()),
        }
    }

    /// `<name>_seed<seed>`.
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}", self.name, self.provenance.seed)
    }

    /// One row per scalar and per histogram bin.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "name", "bin_low", "bin_high", "value"])
            .map_err(csv_err)?;
        for (k, v) in &self.scalars {
            w.write_record(["scalar", k, "", "", &v.to_string()])
                .map_err(csv_err)?;
        }
        for (k, h) in &self.histograms {
            for (i, c) in h.counts.iter().enumerate() {
                w.write_record([
                    "histogram",
                    k,
                    &h.edges[i].to_string(),
                    &h.edges[i + 1].to_string(),
                    &c.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }

    pub fn table_csv(table: &Table) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&table.columns).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        finish_csv(w)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("report serialization: {e}")))
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.<table>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
            Ok(())
        };
        put(format!("{stem}.csv"), self.to_csv()?)?;
        put(format!("{stem}.json"), self.to_json()?)?;
        for (name, table) in &self.tables {
            put(format!("{stem}.{name}.csv"), Self::table_csv(table)?)?;
        }
        Ok(written)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::contract(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::contract(format!("csv: {e}")))
}

/// Per-sample evaluation result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub raw_len: usize,
    pub byte_error: f64,
    pub wrong: usize,
    pub valid_len: usize,
    pub eos: EosDiff,
}

/// Indices of the evaluated samples: without replacement when the corpus is
/// large enough, with replacement otherwise.
pub fn select_samples(corpus_len: usize, sample_count: usize, seed: u64) -> Result<Vec<usize>> {
    if corpus_len == 0 {
        return Err(Error::contract("cannot evaluate an empty corpus"));
    }
    if sample_count == 0 {
        return Err(Error::contract("sample_count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sample_count == corpus_len {
        return Ok((0..corpus_len).collect());
    }
    Ok(if corpus_len > sample_count {
        index::sample(&mut rng, corpus_len, sample_count).into_vec()
    } else {
        (0..sample_count)
            .map(|_| rng.gen_range(0..corpus_len))
            .collect()
    })
}

fn eval_one<M: Autoencoder + ?Sized>(model: &M, raw: &[u8], index: usize) -> Result<SampleEval> {
    let (sample, predicted) = model.predict(raw)?;
    let targets = sample.targets();
    let wrong = (0..sample.valid_len())
        .filter(|&t| predicted.get(t) != Some(&targets[t]))
        .count();
    Ok(SampleEval {
        index,
        raw_len: sample.raw().len(),
        byte_error: wrong as f64 / sample.valid_len() as f64,
        wrong,
        valid_len: sample.valid_len(),
        eos: eos_diff(&predicted, &sample),
    })
}

/// Evaluates `sample_count` corpus samples chosen by `seed`, in selection order.
pub fn evaluate_samples<M: Autoencoder + ?Sized>(
    model: &M,
    corpus: &Corpus,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<SampleEval>> {
    select_samples(corpus.len(), sample_count, seed)?
        .into_iter()
        .map(|i| eval_one(model, &corpus.samples()[i], i))
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean byte error and EOS-difference histogram.
pub fn evaluate<M: Autoencoder + ?Sized>(
    model: &M,
    corpus: &Corpus,
    sample_count: usize,
    seed: u64,
    checkpoint: &str,
) -> Result<MetricsReport> {
    let evals = evaluate_samples(model, corpus, sample_count, seed)?;
    let mut r = MetricsReport::new(
        "eval",
        Provenance {
            checkpoint: checkpoint.into(),
            corpus: corpus.source().into(),
            seed,
            sample_count,
        },
    );
    let pooled = evals.iter().map(|e| e.wrong).sum::<usize>() as f64
        / evals.iter().map(|e| e.valid_len).sum::<usize>() as f64;
    r.scalars.insert(
        "byte_error".into(),
        mean(evals.iter().map(|e| e.byte_error)),
    );
    r.scalars.insert("byte_error_pooled".into(), pooled);
    let diffs: Vec<i64> = evals.iter().map(|e| e.eos.diff).collect();
    let exact = diffs.iter().filter(|&&d| d == 0).count();
    r.scalars.insert(
        "eos_exact_fraction".into(),
        exact as f64 / evals.len() as f64,
    );
    r.scalars.insert(
        "eos_unterminated".into(),
        evals.iter().filter(|e| !e.eos.terminated).count() as f64,
    );
    r.histograms
        .insert("eos_diff".into(), Histogram::integer(&diffs));
    Ok(r)
}

/// The mutation probabilities 0.0, 0.1, ..., 1.0.
pub fn default_p_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Reconstruction error of mutated inputs, measured both against the
/// original bytes and against the mutated bytes.
pub fn mutation_experiment<M: Autoencoder + ?Sized>(
    model: &M,
    corpus: &Corpus,
    p_grid: &[f64],
    sample_count: usize,
    seed: u64,
    checkpoint: &str,
) -> Result<MetricsReport> {
    let picks = select_samples(corpus.len(), sample_count, seed)?;
    let mut r = MetricsReport::new(
        "mutate",
        Provenance {
            checkpoint: checkpoint.into(),
            corpus: corpus.source().into(),
            seed,
            sample_count,
        },
    );
    let mut table = Table::new(&["p", "error_vs_groundtruth", "error_vs_mutated"]);
    for (pi, &p) in p_grid.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pi as u64 + 1);
        let mut vs_truth = Vec::with_capacity(picks.len());
        let mut vs_mutated = Vec::with_capacity(picks.len());
        for &i in &picks {
            let raw = &corpus.samples()[i];
            let mutated = data::mutate(raw, p, &mut rng)?;
            let (sample, predicted) = model.predict(&mutated)?;
            let original = data::prepare_padded(&raw[..sample.raw().len()], sample.padded_len())?;
            vs_truth.push(byte_error(&predicted, &original));
            vs_mutated.push(byte_error(&predicted, &sample));
        }
        let (t, m) = (mean(vs_truth), mean(vs_mutated));
        r.scalars.insert(format!("p{p:.1}.error_vs_groundtruth"), t);
        r.scalars.insert(format!("p{p:.1}.error_vs_mutated"), m);
        table.push(vec![format!("{p:.1}"), t.to_string(), m.to_string()]);
    }
    r.tables.insert("curves".into(), table);
    Ok(r)
}

pub const LENGTH_BIN_WIDTH: usize = 64;

/// Upper limit of the length bin holding `raw_len`: 1..=64 -> 64, 65..=128 -> 128.
pub fn length_bin(raw_len: usize, width: usize) -> usize {
    raw_len.div_ceil(width).max(1) * width
}

/// Recursion level a length bin is grouped under: 64 -> 4, 128 -> 5,
/// 192..=256 -> 6, 320..=512 -> 7, 576..=1024 -> 8.
pub fn recursion_level(bin: usize) -> usize {
    bin.next_power_of_two().trailing_zeros() as usize - 2
}

/// Byte error per length bin and per recursion level.
pub fn error_by_length<M: Autoencoder + ?Sized>(
    model: &M,
    corpus: &Corpus,
    bin_width: usize,
    sample_count: usize,
    seed: u64,
    checkpoint: &str,
) -> Result<MetricsReport> {
    if bin_width == 0 {
        return Err(Error::contract("bin_width must be positive"));
    }
    let evals = evaluate_samples(model, corpus, sample_count, seed)?;
    let mut r = MetricsReport::new(
        "length",
        Provenance {
            checkpoint: checkpoint.into(),
            corpus: corpus.source().into(),
            seed,
            sample_count,
        },
    );
    let mut bins: BTreeMap<usize, Vec<&SampleEval>> = BTreeMap::new();
    for e in &evals {
        bins.entry(length_bin(e.raw_len, bin_width))
            .or_default()
            .push(e);
    }
    let summarize = |group: &[&SampleEval]| {
        let wrong: usize = group.iter().map(|e| e.wrong).sum();
        let valid: usize = group.iter().map(|e| e.valid_len).sum();
        (
            mean(group.iter().map(|e| e.byte_error)),
            wrong as f64 / valid as f64,
        )
    };
    let mut by_bin = Table::new(&["bin", "count", "mean_error", "pooled_error", "level"]);
    let mut levels: BTreeMap<usize, Vec<&SampleEval>> = BTreeMap::new();
    for (&bin, group) in &bins {
        let (m, pooled) = summarize(group);
        r.scalars.insert(format!("bin.{bin}.mean"), m);
        r.scalars.insert(format!("bin.{bin}.pooled"), pooled);
        r.scalars
            .insert(format!("bin.{bin}.count"), group.len() as f64);
        by_bin.push(vec![
            bin.to_string(),
            group.len().to_string(),
            m.to_string(),
            pooled.to_string(),
            recursion_level(bin).to_string(),
        ]);
        levels
            .entry(recursion_level(bin))
            .or_default()
            .extend(group.iter().copied());
    }
    let mut by_level = Table::new(&["level", "count", "mean_error", "pooled_error"]);
    for (&level, group) in &levels {
        let (m, pooled) = summarize(group);
        r.scalars.insert(format!("level.{level}.mean"), m);
        r.scalars.insert(format!("level.{level}.pooled"), pooled);
        by_level.push(vec![
            level.to_string(),
            group.len().to_string(),
            m.to_string(),
            pooled.to_string(),
        ]);
    }
    let max_bin = bins.keys().last().copied().unwrap_or(bin_width);
    let edges: Vec<f64> = (0..=max_bin / bin_width)
        .map(|i| (i * bin_width) as f64 + 0.5)
        .collect();
    let counts = (1..=max_bin / bin_width)
        .map(|i| bins.get(&(i * bin_width)).map_or(0, |g| g.len() as u64))
        .collect();
    r.histograms
        .insert("length".into(), Histogram { edges, counts });
    r.tables.insert("bins".into(), by_bin);
    r.tables.insert("levels".into(), by_level);
    Ok(r)
}

/// One model configuration in an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: BrcaConfig,
}

/// The three encoder pooling kinds on top of `base`.
pub fn pooling_variants(base: &BrcaConfig) -> Vec<Variant> {
    PoolKind::ALL
        .iter()
        .map(|&pool| Variant {
            label: pool.to_string(),
            config: BrcaConfig {
                pool,
                ..base.clone()
            },
        })
        .collect()
}

/// Shared-weight recursion against an unshared model padded to `fixed_length`.
pub fn static_variants(base: &BrcaConfig, fixed_length: usize) -> Vec<Variant> {
    vec![
        Variant {
            label: "recursive".into(),
            config: BrcaConfig {
                fixed_length: None,
                share_recursion_weights: true,
                ..base.clone()
            },
        },
        Variant {
            label: "static".into(),
            config: base.clone().static_model(fixed_length),
        },
    ]
}

pub fn depth_variants(base: &BrcaConfig, depths: &[usize]) -> Vec<Variant> {
    depths
        .iter()
        .map(|&n| Variant {
            label: format!("n{n}"),
            config: BrcaConfig { n, ..base.clone() },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Pooling,
    Static,
    Depth,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Pooling => "pooling",
            AblationKind::Static => "static",
            AblationKind::Depth => "depth",
        }
    }
}

/// Trains each variant with the same training config and seed, then reports
/// train/test byte error side by side. Expected orderings that do not hold
/// are flagged in `notes` and the `trend_inversions` scalar.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    kind: AblationKind,
    variants: &[Variant],
    train: &Corpus,
    test: &Corpus,
    cfg: &TrainConfig,
    sample_count: usize,
    seed: u64,
    progress: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<MetricsReport> {
    let mut r = MetricsReport::new(
        kind.name(),
        Provenance {
            checkpoint: "trained in run".into(),
            corpus: train.source().into(),
            seed,
            sample_count,
        },
    );
    let mut table = Table::new(&[
        "variant",
        "n",
        "depth_at_1024",
        "train_error",
        "test_error",
        "final_loss",
    ]);
    let mut errors = Vec::new();
    for v in variants {
        let model = BrcaModel::<f32>::new(v.config.clone())?;
        let mut trainer = Trainer::new(model, cfg.clone())?;
        let mut last_loss = f64::NAN;
        let label = v.label.clone();
        let mut sink = |rec: &EpochRecord, _: &Trainer<BrcaModel<f32>>| -> Result<Control> {
            last_loss = rec.loss;
            progress(&label, rec);
            Ok(Control::Continue)
        };
        trainer.train(train, &mut sink)?;
        let model = trainer.into_model();
        let err = |c: &Corpus| -> Result<f64> {
            Ok(mean(
                evaluate_samples(&model, c, sample_count, seed)?
                    .iter()
                    .map(|e| e.byte_error),
            ))
        };
        let (tr, te) = (err(train)?, err(test)?);
        r.scalars.insert(format!("{}.train_error", v.label), tr);
        r.scalars.insert(format!("{}.test_error", v.label), te);
        table.push(vec![
            v.label.clone(),
            v.config.n.to_string(),
            param_layer_count(v.config.n, 1024)?.to_string(),
            tr.to_string(),
            te.to_string(),
            last_loss.to_string(),
        ]);
        errors.push((v.label.clone(), te));
    }
    r.notes = trend_inversions(kind, &errors);
    r.scalars
        .insert("trend_inversions".into(), r.notes.len() as f64);
    r.tables.insert("comparison".into(), table);
    Ok(r)
}

/// Checks the expected ordering of test errors: max pooling best, recursive
/// no worse than static, error non-increasing in depth (variants in order).
/// Variants that all score the same are flagged too, since a tie carries no
/// ordering at all.
pub fn trend_inversions(kind: AblationKind, errors: &[(String, f64)]) -> Vec<String> {
    let mut notes = Vec::new();
    let lo = errors.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    let hi = errors.iter().map(|(_, e)| *e).fold(f64::NEG_INFINITY, f64::max);
    if errors.len() > 1 && hi - lo <= 1e-9 {
        notes.push(format!(
            "no separation: every variant has test error {lo:.4}; train longer to rank them"
        ));
        return notes;
    }
    let get = |label: &str| errors.iter().find(|(l, _)| l == label).map(|(_, e)| *e);
    match kind {
        AblationKind::Pooling => {
            if let Some(max) = get("max") {
                for (label, e) in errors.iter().filter(|(l, _)| l != "max") {
                    if *e < max {
                        notes.push(format!(
                            "inversion: {label} pooling ({e:.4}) beats max pooling ({max:.4})"
                        ));
                    }
                }
            }
        }
        AblationKind::Static => {
            if let (Some(rec), Some(st)) = (get("recursive"), get("static")) {
                if rec > st {
                    notes.push(format!(
                        "inversion: recursive ({rec:.4}) worse than static ({st:.4})"
                    ));
                }
            }
        }
        AblationKind::Depth => {
            for w in errors.windows(2) {
                if w[1].1 > w[0].1 {
                    notes.push(format!(
                        "inversion: {} ({:.4}) worse than {} ({:.4})",
                        w[1].0, w[1].1, w[0].0, w[0].1
                    ));
                }
            }
        }
    }
    notes
}
