//! The recursive convolutional autoencoder.
//!
//! Six module groups: encoder prefix (convolutions), encoder recursion
//! (convolutions + pooling, applied until the length reaches 4), encoder
//! postfix (linear layers on the 1024-vector code), and the mirrored decoder
//! groups, where the recursion group doubles the length with a 256->512
//! convolution followed by a sub-pixel reshape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, ByteSample, BYTE_CLASSES, MIN_PADDED_LEN};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::layers::{
    self, conv1d, pixel_shuffle_2, pool2, relu, residual_stack, Conv1dParams, LinearParams,
    PoolKind, ShuffleOrder,
};
use crate::params::{ParamGrads, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Feature size of every convolution.
pub const FEATURES: usize = 256;
pub const KERNEL: usize = 3;
/// Length of the code representation.
pub const CODE_LENGTH: usize = MIN_PADDED_LEN;
/// Size of the flattened code.
pub const CODE_SIZE: usize = FEATURES * CODE_LENGTH;

/// How the encoder postfix and decoder prefix layers see the code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeLayers {
    /// Full affine maps over the flattened 1024-vector.
    #[default]
    Flattened,
    /// The same 256x256 map at each of the 4 code positions.
    PerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrcaConfig {
    /// Parameterized layers per group.
    pub n: usize,
    pub pool: PoolKind,
    /// `false` gives the static control model with one parameter copy per
    /// recursion level.
    pub share_recursion_weights: bool,
    /// Force every input to this padded length (the static model uses 1024).
    pub fixed_length: Option<usize>,
    /// Largest padded length an unshared model can take when `fixed_length`
    /// is unset; sets the number of recursion copies.
    pub max_padded_length: usize,
    pub shuffle: ShuffleOrder,
    pub code_layers: CodeLayers,
    /// Scale of the `sqrt(6 / fan_in)` uniform bound for every layer.
    pub init_gain: f64,
    /// Extra scale on the second layer of each residual pair.
    pub residual_gain: f64,
    /// Scale on the final byte projection.
    pub output_gain: f64,
    pub seed: u64,
}

impl Default for BrcaConfig {
    fn default() -> Self {
        BrcaConfig {
            n: 8,
            pool: PoolKind::Max,
            share_recursion_weights: true,
            fixed_length: None,
            max_padded_length: 1024,
            shuffle: ShuffleOrder::Interleaved,
            code_layers: CodeLayers::Flattened,
            // At gain 1 the residual stacks blow activations up with depth.
            init_gain: 0.408,
            residual_gain: 1.0,
            output_gain: 1.0,
            seed: 1,
        }
    }
}

impl BrcaConfig {
    pub fn with_n(n: usize) -> Self {
        BrcaConfig {
            n,
            ..Self::default()
        }
    }

    /// The static control: unshared recursion copies, inputs padded to `len`.
    pub fn static_model(mut self, len: usize) -> Self {
        self.share_recursion_weights = false;
        self.fixed_length = Some(len);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::contract(format!(
                "n must be even and >= 2, got {}",
                self.n
            )));
        }
        if let Some(len) = self.fixed_length {
            recursion_count(len)?;
        }
        recursion_count(self.max_padded_length)?;
        for (name, v) in [
            ("init_gain", self.init_gain),
            ("residual_gain", self.residual_gain),
            ("output_gain", self.output_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Recursion-group copies per side.
    pub fn recursion_copies(&self) -> Result<usize> {
        if self.share_recursion_weights {
            return Ok(1);
        }
        let len = self.fixed_length.unwrap_or(self.max_padded_length);
        Ok(recursion_count(len)?.max(1))
    }
}

/// Number of recursion-group applications for a padded length:
/// `log2(padded_len) - 2`.
pub fn recursion_count(padded_len: usize) -> Result<usize> {
    if !padded_len.is_power_of_two() || padded_len < MIN_PADDED_LEN {
        return Err(Error::contract(format!(
            "padded length {padded_len} must be a power of two >= 4"
        )));
    }
    Ok(padded_len.trailing_zeros() as usize - 2)
}

/// Parameterized depth `2 n (recursions + 2)`, counting a shared group once
/// per application.
pub fn param_layer_count(n: usize, padded_len: usize) -> Result<usize> {
    Ok(2 * n * (recursion_count(padded_len)? + 2))
}

#[derive(Debug, Clone)]
struct DecoderRecursion {
    up: Conv1dParams,
    convs: Vec<Conv1dParams>,
}

/// Parameters and wiring of the autoencoder.
#[derive(Debug, Clone)]
pub struct BrcaModel<T> {
    config: BrcaConfig,
    params: ParamStore<T>,
    enc_prefix: Vec<Conv1dParams>,
    enc_recursion: Vec<Vec<Conv1dParams>>,
    enc_postfix: Vec<LinearParams>,
    dec_prefix: Vec<LinearParams>,
    dec_recursion: Vec<DecoderRecursion>,
    dec_postfix: Vec<Conv1dParams>,
    output: Conv1dParams,
}

/// Stage name and output shape of one step of the forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Init gain of layer `index` in a residual stack; odd indices close a pair.
fn gain_for(config: &BrcaConfig, index: usize) -> f64 {
    if index % 2 == 1 {
        config.init_gain * config.residual_gain
    } else {
        config.init_gain
    }
}

impl<T: Scalar> BrcaModel<T> {
    pub fn new(config: BrcaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let n = config.n;
        let copies = config.recursion_copies()?;
        let ps = &mut params;
        let rng = &mut rng;

        let conv_group = |ps: &mut ParamStore<T>,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          group: ParamGroup,
                          count: usize| {
            (0..count)
                .map(|i| {
                    Conv1dParams::init(
                        ps,
                        &format!("{name}.{i}"),
                        group,
                        FEATURES,
                        FEATURES,
                        KERNEL,
                        gain_for(&config, i),
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let code_dim = match config.code_layers {
            CodeLayers::Flattened => CODE_SIZE,
            CodeLayers::PerPosition => FEATURES,
        };
        let linear_group =
            |ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, group: ParamGroup| {
                (0..n)
                    .map(|i| {
                        LinearParams::init(
                            ps,
                            &format!("{name}.{i}"),
                            group,
                            code_dim,
                            code_dim,
                            gain_for(&config, i),
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            };

        let enc_prefix = conv_group(ps, rng, "enc.prefix", ParamGroup::EncPrefix, n)?;
        let enc_recursion = (0..copies)
            .map(|c| {
                conv_group(
                    ps,
                    rng,
                    &format!("enc.recursion.{c}"),
                    ParamGroup::EncRecursion,
                    n,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_postfix = linear_group(ps, rng, "enc.postfix", ParamGroup::EncPostfix)?;
        let dec_prefix = linear_group(ps, rng, "dec.prefix", ParamGroup::DecPrefix)?;
        let dec_recursion = (0..copies)
            .map(|c| {
                let name = format!("dec.recursion.{c}");
                let up = Conv1dParams::init(
                    ps,
                    &format!("{name}.up"),
                    ParamGroup::DecRecursion,
                    FEATURES,
                    2 * FEATURES,
                    KERNEL,
                    config.init_gain,
                    rng,
                )?;
                let convs = (0..n - 1)
                    .map(|i| {
                        Conv1dParams::init(
                            ps,
                            &format!("{name}.{i}"),
                            ParamGroup::DecRecursion,
                            FEATURES,
                            FEATURES,
                            KERNEL,
                            gain_for(&config, i),
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DecoderRecursion { up, convs })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_postfix = conv_group(ps, rng, "dec.postfix", ParamGroup::DecPostfix, n)?;
        let output = Conv1dParams::init(
            ps,
            "dec.output",
            ParamGroup::Output,
            FEATURES,
            BYTE_CLASSES,
            KERNEL,
            config.init_gain * config.output_gain,
            rng,
        )?;
        Ok(BrcaModel {
            config,
            params,
            enc_prefix,
            enc_recursion,
            enc_postfix,
            dec_prefix,
            dec_recursion,
            dec_postfix,
            output,
        })
    }

    pub fn config(&self) -> &BrcaConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> BrcaModel<U> {
        BrcaModel {
            config: self.config.clone(),
            params: self.params.cast(),
            enc_prefix: self.enc_prefix.clone(),
            enc_recursion: self.enc_recursion.clone(),
            enc_postfix: self.enc_postfix.clone(),
            dec_prefix: self.dec_prefix.clone(),
            dec_recursion: self.dec_recursion.clone(),
            dec_postfix: self.dec_postfix.clone(),
            output: self.output.clone(),
        }
    }

    /// Parameters of both recursion groups (all copies).
    pub fn recursion_param_ids(&self) -> Vec<ParamId> {
        self.params
            .entries()
            .filter(|(_, e)| e.group.is_recursion())
            .map(|(id, _)| id)
            .collect()
    }

    /// Padded length this model uses for a raw sample of `raw_len` bytes.
    pub fn padded_len_for(&self, raw_len: usize) -> Result<usize> {
        match self.config.fixed_length {
            Some(len) => Ok(len),
            None => data::padded_length(raw_len),
        }
    }

    /// Prepares raw bytes the way this model expects them. A fixed-length
    /// model keeps at most `fixed_length - 1` bytes so the EOS still fits.
    pub fn prepare(&self, raw: &[u8]) -> Result<ByteSample> {
        match self.config.fixed_length {
            Some(len) => data::prepare_padded(&raw[..raw.len().min(len - 1)], len),
            None => data::prepare(raw),
        }
    }

    fn check_length(&self, padded_len: usize) -> Result<usize> {
        let r = recursion_count(padded_len)?;
        if let Some(len) = self.config.fixed_length {
            if padded_len != len {
                return Err(Error::contract(format!(
                    "static model takes padded length {len}, got {padded_len}"
                )));
            }
        }
        if !self.config.share_recursion_weights && r > self.enc_recursion.len() {
            return Err(Error::contract(format!(
                "padded length {padded_len} needs {r} recursion copies, model has {}",
                self.enc_recursion.len()
            )));
        }
        Ok(r)
    }

    fn copy_index(&self, application: usize) -> usize {
        if self.config.share_recursion_weights {
            0
        } else {
            application
        }
    }

    /// Encodes a prepared sample into the `[1024]` code.
    pub fn encode(&self, g: &mut Graph<'_, T>, sample: &ByteSample) -> Result<NodeId> {
        let x = g.input(&sample.onehot::<T>());
        self.encode_node(g, x)
    }

    /// Encodes a `[256, padded_len]` input node.
    pub fn encode_node(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != BYTE_CLASSES {
            return Err(Error::contract(format!(
                "encoder input must be [256, L], got {shape:?}"
            )));
        }
        let r = self.check_length(shape[1])?;
        let mut h = residual_stack(g, x, &self.enc_prefix)?;
        for i in 0..r {
            h = residual_stack(g, h, &self.enc_recursion[self.copy_index(i)])?;
            h = pool2(g, h, self.config.pool)?;
        }
        match self.config.code_layers {
            CodeLayers::Flattened => {
                let flat = g.record(OpKind::Reshape(vec![CODE_SIZE]), &[h])?;
                residual_stack(g, flat, &self.enc_postfix)
            }
            CodeLayers::PerPosition => {
                let h = residual_stack(g, h, &self.enc_postfix)?;
                g.record(OpKind::Reshape(vec![CODE_SIZE]), &[h])
            }
        }
    }

    /// Decodes a `[1024]` code into logits `[256, padded_len]`.
    pub fn decode(&self, g: &mut Graph<'_, T>, code: NodeId, padded_len: usize) -> Result<NodeId> {
        if g.shape(code) != [CODE_SIZE] {
            return Err(Error::contract(format!(
                "code must be [{CODE_SIZE}], got {:?}",
                g.shape(code)
            )));
        }
        let r = self.check_length(padded_len)?;
        let mut h = match self.config.code_layers {
            CodeLayers::Flattened => {
                let h = residual_stack(g, code, &self.dec_prefix)?;
                g.record(OpKind::Reshape(vec![FEATURES, CODE_LENGTH]), &[h])?
            }
            CodeLayers::PerPosition => {
                let h = g.record(OpKind::Reshape(vec![FEATURES, CODE_LENGTH]), &[code])?;
                residual_stack(g, h, &self.dec_prefix)?
            }
        };
        for i in 0..r {
            let group = &self.dec_recursion[self.copy_index(i)];
            let a = relu(g, h)?;
            let up = conv1d(g, a, &group.up)?;
            h = pixel_shuffle_2(g, up, self.config.shuffle)?;
            h = residual_stack(g, h, &group.convs)?;
        }
        h = residual_stack(g, h, &self.dec_postfix)?;
        let a = relu(g, h)?;
        conv1d(g, a, &self.output)
    }

    /// Mean NLL over the valid positions (bytes plus terminating null).
    /// Returns `(loss, logits)`.
    pub fn autoencode_loss(
        &self,
        g: &mut Graph<'_, T>,
        sample: &ByteSample,
    ) -> Result<(NodeId, NodeId)> {
        let code = self.encode(g, sample)?;
        let logits = self.decode(g, code, sample.padded_len())?;
        let loss = layers::softmax_nll(g, logits, &sample.targets(), &sample.valid_positions())?;
        Ok((loss, logits))
    }

    /// Per-position argmax bytes of the reconstruction (length `padded_len`).
    pub fn reconstruct(&self, sample: &ByteSample) -> Result<Vec<u8>> {
        let mut g = Graph::with_params(&self.params);
        let code = self.encode(&mut g, sample)?;
        let logits = self.decode(&mut g, code, sample.padded_len())?;
        Ok(data::argmax_columns(
            g.value(logits),
            BYTE_CLASSES,
            sample.padded_len(),
        ))
    }

    /// Forward and backward on one sample. Returns the loss, the per-position
    /// argmax bytes and the parameter gradients.
    pub fn loss_and_grads(&self, sample: &ByteSample) -> Result<(f64, Vec<u8>, ParamGrads<T>)> {
        let mut g = Graph::with_params(&self.params);
        let (loss, logits) = self.autoencode_loss(&mut g, sample)?;
        let value = g.value(loss)[0].as_f64();
        let predicted = data::argmax_columns(g.value(logits), BYTE_CLASSES, sample.padded_len());
        g.backward(loss)?;
        Ok((value, predicted, g.into_param_grads()))
    }

    /// Parameterized layers executed by one forward pass at `padded_len`,
    /// counted from the recorded graph.
    pub fn executed_layer_count(&self, padded_len: usize) -> Result<usize> {
        let mut g = Graph::with_params(&self.params);
        let x = g.input_raw(
            &[BYTE_CLASSES, padded_len],
            vec![T::zero(); BYTE_CLASSES * padded_len],
        )?;
        let code = self.encode_node(&mut g, x)?;
        self.decode(&mut g, code, padded_len)?;
        Ok(g.parameterized_layer_count())
    }

    /// Distinct parameterized layers stored in the model.
    pub fn stored_layer_count(&self) -> usize {
        self.enc_prefix.len()
            + self.enc_recursion.iter().map(Vec::len).sum::<usize>()
            + self.enc_postfix.len()
            + self.dec_prefix.len()
            + self
                .dec_recursion
                .iter()
                .map(|d| 1 + d.convs.len())
                .sum::<usize>()
            + self.dec_postfix.len()
            + 1
    }

    /// Shapes after each group for an input of `padded_len`.
    pub fn stages(&self, padded_len: usize) -> Result<Vec<Stage>> {
        self.check_length(padded_len)?;
        stage_shapes(padded_len)
    }
}

/// Shapes after each group of any model for an input of `padded_len`.
pub fn stage_shapes(padded_len: usize) -> Result<Vec<Stage>> {
    let r = recursion_count(padded_len)?;
    let st = |name: String, shape: Vec<usize>| Stage { name, shape };
    let mut out = vec![
        st("input one-hot".into(), vec![BYTE_CLASSES, padded_len]),
        st("encoder prefix".into(), vec![FEATURES, padded_len]),
    ];
    let mut len = padded_len;
    for i in 0..r {
        len /= 2;
        out.push(st(
            format!("encoder recursion {}", i + 1),
            vec![FEATURES, len],
        ));
    }
    out.push(st("encoder postfix (code)".into(), vec![CODE_SIZE]));
    out.push(st("decoder prefix".into(), vec![FEATURES, CODE_LENGTH]));
    for i in 0..r {
        out.push(st(
            format!("decoder recursion {} expand", i + 1),
            vec![2 * FEATURES, len],
        ));
        len *= 2;
        out.push(st(
            format!("decoder recursion {} reshape", i + 1),
            vec![FEATURES, len],
        ));
    }
    out.push(st("decoder postfix".into(), vec![FEATURES, len]));
    out.push(st("output logits".into(), vec![BYTE_CLASSES, len]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursion_count_examples() {
        assert_eq!(recursion_count(1024).unwrap(), 8);
        assert_eq!(recursion_count(4).unwrap(), 0);
        assert_eq!(recursion_count(64).unwrap(), 4);
        assert!(recursion_count(2).is_err());
        assert!(recursion_count(48).is_err());
    }

    #[test]
    fn param_layer_count_examples() {
        assert_eq!(param_layer_count(8, 1024).unwrap(), 160);
        assert_eq!(param_layer_count(2, 1024).unwrap(), 40);
        assert_eq!(param_layer_count(16, 1024).unwrap(), 320);
        assert_eq!(param_layer_count(8, 4).unwrap(), 32);
    }

    #[test]
    fn config_rejects_odd_n() {
        assert!(BrcaModel::<f32>::new(BrcaConfig::with_n(3)).is_err());
        assert!(BrcaModel::<f32>::new(BrcaConfig::with_n(0)).is_err());
    }

    #[test]
    fn static_model_has_eight_copies() {
        let m = BrcaModel::<f32>::new(BrcaConfig::with_n(2).static_model(1024)).unwrap();
        assert_eq!(m.enc_recursion.len(), 8);
        assert_eq!(m.dec_recursion.len(), 8);
        assert!(m.prepare(b"short").unwrap().padded_len() == 1024);
    }
}
