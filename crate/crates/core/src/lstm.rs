//! Sequence-to-sequence LSTM baseline: an encoder over the reversed bytes
//! hands its final state to a decoder that re-emits the bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{self, log_softmax, BeamResult, Decoder};
use crate::checkpoint::Checkpoint;
use crate::data::{self, argmax_columns, ByteSample, BYTE_CLASSES, EOS};
use crate::error::{Error, Result};
use crate::eval::Autoencoder;
use crate::graph::{Graph, NodeId, OpKind};
use crate::layers::{linear, softmax_nll, LinearParams};
use crate::params::{ParamGrads, ParamGroup, ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::trainer::Trainable;

/// Input fed to the decoder at step `t > 0` during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedMode {
    /// Ground-truth byte `t - 1` (teacher forcing).
    #[default]
    GroundTruth,
    /// The decoder's own argmax at step `t - 1`.
    Generated,
    /// Byte `t - 1` of the beam-search output for the sample; the loss is
    /// still measured against the ground truth.
    BeamPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    /// Embedding and hidden size.
    pub dim: usize,
    pub beam: usize,
    pub feed: FeedMode,
    /// Uniform init bound for cell and projection weights is
    /// `gain * sqrt(6 / dim)`.
    pub init_gain: f64,
    pub embed_bound: f64,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            dim: 1024,
            beam: 2,
            feed: FeedMode::GroundTruth,
            init_gain: 0.408,
            embed_bound: 1.0,
            seed: 1,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.beam == 0 {
            return Err(Error::contract("lstm dim and beam must be positive"));
        }
        Ok(())
    }
}

/// Gate weights for one cell: rows are the input, forget, output and
/// candidate gates, in that order.
#[derive(Debug, Clone, Copy)]
pub struct CellParams {
    pub input: LinearParams,
    pub hidden: LinearParams,
}

/// One LSTM step inside a graph.
pub fn lstm_cell<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    cell: &CellParams,
) -> Result<(NodeId, NodeId)> {
    let dim = g.shape(h)[0];
    if g.shape(x) != [dim] || g.shape(c) != [dim] {
        return Err(Error::shape(
            "lstm_cell",
            format!("x {:?}, h {:?}, c {:?}", g.shape(x), g.shape(h), g.shape(c)),
        ));
    }
    let zx = linear(g, x, &cell.input)?;
    let zh = linear(g, h, &cell.hidden)?;
    let z = g.record(OpKind::Add, &[zx, zh])?;
    let gate = |g: &mut Graph<'_, T>, k: usize, op: OpKind| -> Result<NodeId> {
        let s = g.record(
            OpKind::Slice {
                start: k * dim,
                len: dim,
            },
            &[z],
        )?;
        g.record(op, &[s])
    };
    let i = gate(g, 0, OpKind::Sigmoid)?;
    let f = gate(g, 1, OpKind::Sigmoid)?;
    let o = gate(g, 2, OpKind::Sigmoid)?;
    let cand = gate(g, 3, OpKind::Tanh)?;
    let fc = g.record(OpKind::Mul, &[f, c])?;
    let ig = g.record(OpKind::Mul, &[i, cand])?;
    let c2 = g.record(OpKind::Add, &[fc, ig])?;
    let tc = g.record(OpKind::Tanh, &[c2])?;
    let h2 = g.record(OpKind::Mul, &[o, tc])?;
    Ok((h2, c2))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub struct LstmModel<T> {
    config: LstmConfig,
    params: ParamStore<T>,
    embed: ParamId,
    encoder: CellParams,
    decoder: CellParams,
    output: LinearParams,
}

impl<T: Scalar> LstmModel<T> {
    pub fn new(config: LstmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let group = ParamGroup::Lstm;
        let embed = params.add_uniform(
            "embed",
            group,
            &[BYTE_CLASSES, d],
            config.embed_bound,
            &mut rng,
        )?;
        let mut cell = |name: &str, params: &mut ParamStore<T>| -> Result<CellParams> {
            Ok(CellParams {
                input: LinearParams::init(
                    params,
                    &format!("{name}.x"),
                    group,
                    d,
                    4 * d,
                    config.init_gain,
                    &mut rng,
                )?,
                hidden: LinearParams::init(
                    params,
                    &format!("{name}.h"),
                    group,
                    d,
                    4 * d,
                    config.init_gain,
                    &mut rng,
                )?,
            })
        };
        let encoder = cell("encoder", &mut params)?;
        let decoder = cell("decoder", &mut params)?;
        let output = LinearParams::init(
            &mut params,
            "output",
            group,
            d,
            BYTE_CLASSES,
            config.init_gain,
            &mut rng,
        )?;
        Ok(LstmModel {
            config,
            params,
            embed,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder_cell(&self) -> &CellParams {
        &self.encoder
    }

    pub fn decoder_cell(&self) -> &CellParams {
        &self.decoder
    }

    pub fn cast<U: Scalar>(&self) -> LstmModel<U> {
        LstmModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            encoder: self.encoder,
            decoder: self.decoder,
            output: self.output,
        }
    }

    fn embed_node(&self, g: &mut Graph<'_, T>, byte: u8) -> Result<NodeId> {
        let table = g.param(self.embed)?;
        g.record(OpKind::Embed(byte as usize), &[table])
    }

    fn zero_state(&self, g: &mut Graph<'_, T>) -> Result<(NodeId, NodeId)> {
        let d = self.config.dim;
        Ok((
            g.input_raw(&[d], vec![T::zero(); d])?,
            g.input_raw(&[d], vec![T::zero(); d])?,
        ))
    }

    /// Runs the encoder over `bytes` in the given order from a zero state.
    pub fn encode_forward(&self, g: &mut Graph<'_, T>, bytes: &[u8]) -> Result<(NodeId, NodeId)> {
        if bytes.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let (mut h, mut c) = self.zero_state(g)?;
        for &b in bytes {
            let x = self.embed_node(g, b)?;
            (h, c) = lstm_cell(g, x, h, c, &self.encoder)?;
        }
        Ok((h, c))
    }

    /// Feeds `bytes` (terminated by EOS) last to first; returns the final state.
    pub fn encode_reversed(&self, g: &mut Graph<'_, T>, bytes: &[u8]) -> Result<(NodeId, NodeId)> {
        let reversed: Vec<u8> = bytes.iter().rev().copied().collect();
        self.encode_forward(g, &reversed)
    }

    /// Mean NLL of `targets` with the decoder started from `(h0, c0)` and
    /// input byte 0 at the first step. Returns the loss and `[256, T]` logits.
    pub fn decode_train(
        &self,
        g: &mut Graph<'_, T>,
        h0: NodeId,
        c0: NodeId,
        targets: &[u8],
        feed: FeedMode,
    ) -> Result<(NodeId, NodeId)> {
        if targets.last() != Some(&EOS) {
            return Err(Error::contract(
                "decoder targets must end with the EOS byte",
            ));
        }
        let path = match feed {
            FeedMode::BeamPath => {
                let (h, c) = (g.value(h0).to_vec(), g.value(c0).to_vec());
                self.beam_from_state(h, c, targets.len(), self.config.beam)?
                    .tokens
            }
            _ => Vec::new(),
        };
        let (mut h, mut c) = (h0, c0);
        let mut prev = EOS;
        let mut columns = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let x = self.embed_node(g, prev)?;
            (h, c) = lstm_cell(g, x, h, c, &self.decoder)?;
            let logits = linear(g, h, &self.output)?;
            prev = match feed {
                FeedMode::GroundTruth => targets[t],
                FeedMode::Generated => argmax_columns(g.value(logits), BYTE_CLASSES, 1)[0],
                FeedMode::BeamPath => path.get(t).copied().unwrap_or(EOS),
            };
            columns.push(logits);
        }
        let logits = g.record(OpKind::StackColumns, &columns)?;
        let mask: Vec<usize> = (0..targets.len()).collect();
        let loss = softmax_nll(g, logits, targets, &mask)?;
        Ok((loss, logits))
    }

    /// Encoder plus training-mode decoder over the sample's bytes and EOS.
    pub fn autoencode_loss(
        &self,
        g: &mut Graph<'_, T>,
        sample: &ByteSample,
    ) -> Result<(NodeId, NodeId)> {
        let bytes = &sample.targets()[..sample.valid_len()];
        let (h, c) = self.encode_reversed(g, bytes)?;
        self.decode_train(g, h, c, bytes, self.config.feed)
    }

    pub fn loss_and_grads(&self, sample: &ByteSample) -> Result<(f64, Vec<u8>, ParamGrads<T>)> {
        let mut g = Graph::with_params(&self.params);
        let (loss, logits) = self.autoencode_loss(&mut g, sample)?;
        let value = g.value(loss)[0].as_f64();
        let predicted = argmax_columns(g.value(logits), BYTE_CLASSES, sample.valid_len());
        g.backward(loss)?;
        Ok((value, predicted, g.into_param_grads()))
    }

    /// One cell step outside a graph.
    pub fn cell_step(&self, cell: &CellParams, x: &[T], h: &[T], c: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.config.dim;
        let p = &self.params;
        let mut z: Vec<T> = p.get(cell.input.bias).values().to_vec();
        for (b, hb) in z.iter_mut().zip(p.get(cell.hidden.bias).values()) {
            *b += *hb;
        }
        gemm(
            false,
            false,
            4 * d,
            d,
            1,
            T::one(),
            p.get(cell.input.weight).values(),
            x,
            T::one(),
            &mut z,
        );
        gemm(
            false,
            false,
            4 * d,
            d,
            1,
            T::one(),
            p.get(cell.hidden.weight).values(),
            h,
            T::one(),
            &mut z,
        );
        let mut h2 = vec![T::zero(); d];
        let mut c2 = vec![T::zero(); d];
        for k in 0..d {
            let i = sigmoid(z[k].as_f64());
            let f = sigmoid(z[d + k].as_f64());
            let o = sigmoid(z[2 * d + k].as_f64());
            let g = z[3 * d + k].as_f64().tanh();
            let cn = f * c[k].as_f64() + i * g;
            c2[k] = T::from_f64(cn);
            h2[k] = T::from_f64(o * cn.tanh());
        }
        (h2, c2)
    }

    fn embedding(&self, byte: u8) -> &[T] {
        let d = self.config.dim;
        &self.params.get(self.embed).values()[byte as usize * d..(byte as usize + 1) * d]
    }

    /// Final encoder state for `bytes` read last to first, outside a graph.
    pub fn encode_state(&self, bytes: &[u8]) -> Result<(Vec<T>, Vec<T>)> {
        if bytes.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let d = self.config.dim;
        let (mut h, mut c) = (vec![T::zero(); d], vec![T::zero(); d]);
        for &b in bytes.iter().rev() {
            (h, c) = self.cell_step(&self.encoder, self.embedding(b), &h, &c);
        }
        Ok((h, c))
    }

    fn output_log_probs(&self, h: &[T]) -> Vec<f64> {
        let d = self.config.dim;
        let mut z: Vec<T> = self.params.get(self.output.bias).values().to_vec();
        gemm(
            false,
            false,
            BYTE_CLASSES,
            d,
            1,
            T::one(),
            self.params.get(self.output.weight).values(),
            h,
            T::one(),
            &mut z,
        );
        log_softmax(&z.iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }

    fn beam_from_state(
        &self,
        h: Vec<T>,
        c: Vec<T>,
        max_len: usize,
        beam: usize,
    ) -> Result<BeamResult> {
        beam::beam_search(&LstmDecoder(self), (h, c), EOS, max_len, beam)
    }

    /// Decodes from an encoder state with beam search.
    pub fn decode_beam(
        &self,
        h0: Vec<T>,
        c0: Vec<T>,
        max_len: usize,
        beam: usize,
    ) -> Result<BeamResult> {
        self.beam_from_state(h0, c0, max_len, beam)
    }

    pub fn decode_greedy(&self, h0: Vec<T>, c0: Vec<T>, max_len: usize) -> Result<BeamResult> {
        beam::greedy_decode(&LstmDecoder(self), (h0, c0), EOS, max_len)
    }
}

/// The decoder half of an [`LstmModel`] as a step-wise token model.
pub struct LstmDecoder<'a, T>(pub &'a LstmModel<T>);

impl<T: Scalar> Decoder for LstmDecoder<'_, T> {
    type State = (Vec<T>, Vec<T>);

    fn vocab(&self) -> usize {
        BYTE_CLASSES
    }

    fn step(&self, state: &Self::State, input: u8) -> Result<(Self::State, Vec<f64>)> {
        let m = self.0;
        let (h, c) = m.cell_step(&m.decoder, m.embedding(input), &state.0, &state.1);
        let lp = m.output_log_probs(&h);
        Ok(((h, c), lp))
    }
}

impl<T: Scalar> Autoencoder for LstmModel<T> {
    /// Beam-decodes up to the padded length; positions after the EOS are 0.
    fn predict(&self, raw: &[u8]) -> Result<(ByteSample, Vec<u8>)> {
        let sample = data::prepare(raw)?;
        let (h, c) = self.encode_state(&sample.targets()[..sample.valid_len()])?;
        let mut out = self
            .decode_beam(h, c, sample.padded_len(), self.config.beam)?
            .tokens;
        out.resize(sample.padded_len(), EOS);
        Ok((sample, out))
    }
}

impl Trainable for LstmModel<f32> {
    const KIND: &'static str = "lstm";

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn prepare(&self, raw: &[u8]) -> Result<ByteSample> {
        data::prepare(raw)
    }

    fn loss_and_grads(&self, sample: &ByteSample) -> Result<(f64, Vec<u8>, ParamGrads<f32>)> {
        LstmModel::loss_and_grads(self, sample)
    }

    fn recursion_clones(&self, _: &ByteSample) -> Result<usize> {
        Ok(0)
    }

    fn recursion_param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }

    fn write_config(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_config("model", &self.config)
    }

    fn from_config(ckpt: &Checkpoint) -> Result<Self> {
        LstmModel::new(ckpt.get_config::<LstmConfig>("model")?)
    }
}
