//! Layer set of the autoencoder: temporal convolution, linear maps, ReLU,
//! pairwise pooling, sub-pixel reshaping, residual pairs and the masked
//! softmax loss. Each function records onto a [`Graph`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::kernels;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Max,
    Average,
    L2,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::Max, PoolKind::Average, PoolKind::L2];
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Max => "max",
            PoolKind::Average => "average",
            PoolKind::L2 => "l2",
        })
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PoolKind::Max),
            "average" | "avg" | "mean" => Ok(PoolKind::Average),
            "l2" => Ok(PoolKind::L2),
            other => Err(Error::RejectedInput(format!("unknown pool kind {other:?}"))),
        }
    }
}

/// Feature grouping used when reshaping `[2F, L]` into `[F, 2L]`.
///
/// `Interleaved`: `out[c, 2t + s] = x[2c + s, t]`.
/// `Blocked`: `out[c, 2t + s] = x[c + s F, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleOrder {
    #[default]
    Interleaved,
    Blocked,
}

impl FromStr for ShuffleOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interleaved" => Ok(ShuffleOrder::Interleaved),
            "blocked" => Ok(ShuffleOrder::Blocked),
            other => Err(Error::RejectedInput(format!(
                "unknown shuffle order {other:?}"
            ))),
        }
    }
}

/// Weight `[out, in, kernel]` and bias `[out]` of a temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Weight `[out, in]` and bias `[out]` of an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Uniform initialization bound `sqrt(6 / fan_in)` scaled by `gain`.
pub fn init_bound(fan_in: usize, gain: f64) -> f64 {
    gain * (6.0 / fan_in as f64).sqrt()
}

impl Conv1dParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = init_bound(in_features * kernel, gain);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[out_features, in_features, kernel],
            bound,
            rng,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            group,
            Tensor::zeros(&[out_features])?,
        );
        Ok(Conv1dParams { weight, bias })
    }
}

impl LinearParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = init_bound(in_dim, gain);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[out_dim, in_dim],
            bound,
            rng,
        )?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])?);
        Ok(LinearParams { weight, bias })
    }
}

/// A layer with parameters that can be applied inside a residual pair.
pub trait ParamLayer {
    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId>;
}

impl ParamLayer for Conv1dParams {
    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        conv1d(g, x, self)
    }
}

impl ParamLayer for LinearParams {
    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        linear(g, x, self)
    }
}

/// Length-preserving convolution, `out[f, t] = b[f] + sum_{g,k} w[f,g,k] x[g, t+k-1]`.
pub fn conv1d<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, p: &Conv1dParams) -> Result<NodeId> {
    let w = g.param(p.weight)?;
    let b = g.param(p.bias)?;
    g.record(OpKind::Conv1d, &[x, w, b])
}

pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, p: &LinearParams) -> Result<NodeId> {
    let w = g.param(p.weight)?;
    let b = g.param(p.bias)?;
    g.record(OpKind::Linear, &[x, w, b])
}

pub fn relu<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
    g.record(OpKind::Relu, &[x])
}

pub fn pool2<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, kind: PoolKind) -> Result<NodeId> {
    g.record(OpKind::Pool2(kind), &[x])
}

pub fn pixel_shuffle_2<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    order: ShuffleOrder,
) -> Result<NodeId> {
    g.record(OpKind::PixelShuffle(order), &[x])
}

/// `x + second(relu(first(relu(x))))`.
pub fn residual_pair<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    first: &impl ParamLayer,
    second: &impl ParamLayer,
) -> Result<NodeId> {
    let h = relu(g, x)?;
    let h = first.apply(g, h)?;
    let h = relu(g, h)?;
    let branch = second.apply(g, h)?;
    if g.shape(branch) != g.shape(x) {
        return Err(Error::shape(
            "residual_pair",
            format!("skip {:?} vs branch {:?}", g.shape(x), g.shape(branch)),
        ));
    }
    g.record(OpKind::Add, &[x, branch])
}

/// Applies `layers` as consecutive residual pairs. A trailing odd layer is
/// applied as `layer(relu(x))` without a skip.
pub fn residual_stack<T: Scalar, L: ParamLayer>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    layers: &[L],
) -> Result<NodeId> {
    let mut h = x;
    for chunk in layers.chunks(2) {
        h = match chunk {
            [a, b] => residual_pair(g, h, a, b)?,
            [a] => {
                let r = relu(g, h)?;
                a.apply(g, r)?
            }
            _ => unreachable!(),
        };
    }
    Ok(h)
}

/// Mean negative log-likelihood of `targets` over the `mask` positions.
pub fn softmax_nll<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: NodeId,
    targets: &[u8],
    mask: &[usize],
) -> Result<NodeId> {
    g.record(
        OpKind::SoftmaxNll {
            targets: targets.iter().map(|&b| b as usize).collect(),
            mask: mask.to_vec(),
        },
        &[logits],
    )
}

/// Graph-free sub-pixel reshape of a `[2F, L]` tensor into `[F, 2L]`.
pub fn pixel_shuffle_tensor<T: Scalar>(x: &Tensor<T>, order: ShuffleOrder) -> Result<Tensor<T>> {
    match x.shape() {
        [f, l] if f % 2 == 0 => Tensor::new(
            &[f / 2, 2 * l],
            kernels::shuffle_forward(x.values(), *f, *l, order),
        ),
        s => Err(Error::shape(
            "pixel_shuffle_2",
            format!("needs [even F, L], got {s:?}"),
        )),
    }
}

/// Graph-free pairwise pooling of a `[F, L]` tensor.
pub fn pool2_tensor<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    match x.shape() {
        [f, l] if l % 2 == 0 => Tensor::new(
            &[*f, l / 2],
            kernels::pool2_forward(x.values(), *f, *l, kind).0,
        ),
        s => Err(Error::shape(
            "pool2",
            format!("needs [F, even L], got {s:?}"),
        )),
    }
}
