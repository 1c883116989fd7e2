//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are either caller
//! inputs or parameters borrowed from a [`ParamStore`]; requesting the same
//! parameter twice yields the same node, so weight sharing falls out of the
//! recording. [`Graph::backward`] accumulates into leaf gradients, which the
//! caller moves into the store with [`Graph::into_param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{PoolKind, ShuffleOrder};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{check_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation descriptor passed to [`Graph::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise `a + b`.
    Add,
    /// Elementwise `a * b`.
    Mul,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    Relu,
    Sigmoid,
    Tanh,
    /// Multiply by a constant.
    Scale(f64),
    /// Inputs `x[c_in, L]`, `weight[c_out, c_in, k]`, `bias[c_out]`; odd `k`,
    /// zero padding keeps the length.
    Conv1d,
    /// Inputs `x[in]` or `x[in, L]`, `weight[out, in]`, `bias[out]`.
    Linear,
    Pool2(PoolKind),
    PixelShuffle(ShuffleOrder),
    Reshape(Vec<usize>),
    /// Mean negative log-likelihood of `targets` under the column softmax of
    /// `logits[classes, L]`, over the positions listed in `mask`.
    SoftmaxNll {
        targets: Vec<usize>,
        mask: Vec<usize>,
    },
    /// Row `index` of `table[rows, dim]`.
    Embed(usize),
    /// Contiguous range of the flattened input.
    Slice {
        start: usize,
        len: usize,
    },
    /// `k` vectors of shape `[d]` become columns of `[d, k]`.
    StackColumns,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Scale(_) => "scale",
            OpKind::Conv1d => "conv1d",
            OpKind::Linear => "linear",
            OpKind::Pool2(_) => "pool2",
            OpKind::PixelShuffle(_) => "pixel_shuffle_2",
            OpKind::Reshape(_) => "reshape",
            OpKind::SoftmaxNll { .. } => "softmax_nll",
            OpKind::Embed(_) => "embed",
            OpKind::Slice { .. } => "slice",
            OpKind::StackColumns => "stack_columns",
        }
    }

    pub fn is_parameterized_layer(&self) -> bool {
        matches!(self, OpKind::Conv1d | OpKind::Linear)
    }
}

enum Source {
    Input,
    Param(ParamId),
    Op(OpKind),
}

enum Cache<T> {
    None,
    Cols(Vec<T>),
    Winners(Vec<u8>),
    Probs(Vec<Vec<T>>),
}

struct Node<T> {
    source: Source,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// Empty for parameter leaves, whose values live in the store.
    value: Vec<T>,
    cache: Cache<T>,
}

pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    leaf_grads: HashMap<NodeId, Vec<T>>,
    last_backward: Vec<NodeId>,
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<'static, T> {
    /// A graph without parameters; every leaf is an input.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            leaf_grads: HashMap::new(),
            last_backward: Vec::new(),
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            leaf_grads: HashMap::new(),
            last_backward: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input leaf holding a copy of `tensor`'s values.
    pub fn input(&mut self, tensor: &Tensor<T>) -> NodeId {
        self.push(
            Source::Input,
            Vec::new(),
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Cache::None,
        )
    }

    pub fn input_raw(&mut self, shape: &[usize], values: Vec<T>) -> Result<NodeId> {
        let numel = check_shape(shape)?;
        if numel != values.len() {
            return Err(Error::shape(
                "input",
                format!("shape {shape:?} with {} values", values.len()),
            ));
        }
        Ok(self.push(
            Source::Input,
            Vec::new(),
            shape.to_vec(),
            values,
            Cache::None,
        ))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(n);
        }
        let store = self
            .params
            .ok_or_else(|| Error::contract("graph has no parameter store"))?;
        if id.index() >= store.len() {
            return Err(Error::contract(format!("unknown parameter {id:?}")));
        }
        let shape = store.get(id).shape().to_vec();
        let n = self.push(
            Source::Param(id),
            Vec::new(),
            shape,
            Vec::new(),
            Cache::None,
        );
        self.param_nodes.insert(id, n);
        Ok(n)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        let node = &self.nodes[id.0];
        match node.source {
            Source::Param(p) => self
                .params
                .expect("param node without store")
                .get(p)
                .values(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id), self.value(id).to_vec()).expect("node shapes are valid")
    }

    /// Accumulated gradient of a leaf (input or parameter) node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.leaf_grads.get(&id).map(Vec::as_slice)
    }

    /// Number of convolution and linear ops recorded so far.
    pub fn parameterized_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.source, Source::Op(op) if op.is_parameterized_layer()))
            .count()
    }

    /// Which piece of every piecewise op was taken: the sign of each ReLU
    /// input and the winner of each max-pool pair. Two evaluations with equal
    /// patterns lie on the same smooth piece of the graph's function.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match (&node.source, &node.cache) {
                (Source::Op(OpKind::Relu), _) => {
                    bits.extend(self.value(node.inputs[0]).iter().map(|&v| v > T::zero()));
                }
                (Source::Op(OpKind::Pool2(_)), Cache::Winners(w)) => {
                    bits.extend(w.iter().map(|&b| b == 1));
                }
                _ => {}
            }
        }
        bits
    }

    /// Node ids visited (with a nonzero incoming gradient path) by the most
    /// recent backward pass, in visiting order.
    pub fn last_backward_order(&self) -> &[NodeId] {
        &self.last_backward
    }

    fn push(
        &mut self,
        source: Source,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<T>,
        cache: Cache<T>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            source,
            inputs,
            shape,
            value,
            cache,
        });
        id
    }

    fn check_ids(&self, op: &OpKind, inputs: &[NodeId], arity: usize) -> Result<()> {
        if arity != usize::MAX && inputs.len() != arity {
            return Err(Error::shape(
                op.name(),
                format!("expects {arity} inputs, got {}", inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::contract(format!(
                "{}: unknown node {bad:?}",
                op.name()
            )));
        }
        Ok(())
    }

    /// Executes `op` on `inputs`, appends the result node and returns its id.
    pub fn record(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match &op {
            OpKind::Add | OpKind::Mul | OpKind::MatMul => 2,
            OpKind::Conv1d | OpKind::Linear => 3,
            OpKind::StackColumns => usize::MAX,
            _ => 1,
        };
        self.check_ids(&op, inputs, arity)?;
        let name = op.name();
        let (shape, value, cache) = match &op {
            OpKind::Add | OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.shape(a) != self.shape(b) {
                    return Err(Error::shape(
                        name,
                        format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
                    ));
                }
                let (va, vb) = (self.value(a), self.value(b));
                let v = if op == OpKind::Add {
                    va.iter().zip(vb).map(|(&x, &y)| x + y).collect()
                } else {
                    va.iter().zip(vb).map(|(&x, &y)| x * y).collect()
                };
                (self.shape(a).to_vec(), v, Cache::None)
            }
            OpKind::Sum => {
                let s: T = self.value(inputs[0]).iter().copied().sum();
                (vec![1], vec![s], Cache::None)
            }
            OpKind::MatMul => {
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::shape(name, format!("{sa:?} x {sb:?}")));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![T::zero(); m * n];
                gemm(
                    false,
                    false,
                    m,
                    k,
                    n,
                    T::one(),
                    self.value(inputs[0]),
                    self.value(inputs[1]),
                    T::zero(),
                    &mut out,
                );
                (vec![m, n], out, Cache::None)
            }
            OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Scale(_) => {
                let x = self.value(inputs[0]);
                let v: Vec<T> = match &op {
                    OpKind::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
                    OpKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                    OpKind::Tanh => x.iter().map(|&v| v.tanh()).collect(),
                    OpKind::Scale(c) => {
                        let c = T::from_f64(*c);
                        x.iter().map(|&v| v * c).collect()
                    }
                    _ => unreachable!(),
                };
                (self.shape(inputs[0]).to_vec(), v, Cache::None)
            }
            OpKind::Conv1d => {
                let (sx, sw, sb) = (
                    self.shape(inputs[0]),
                    self.shape(inputs[1]),
                    self.shape(inputs[2]),
                );
                if sx.len() != 2
                    || sw.len() != 3
                    || sb.len() != 1
                    || sw[1] != sx[0]
                    || sb[0] != sw[0]
                    || sw[2] % 2 == 0
                {
                    return Err(Error::shape(
                        name,
                        format!("x {sx:?}, weight {sw:?}, bias {sb:?}"),
                    ));
                }
                let (c_in, len, c_out, k) = (sx[0], sx[1], sw[0], sw[2]);
                let cols = kernels::im2col(self.value(inputs[0]), c_in, len, k);
                let mut out = broadcast_bias(self.value(inputs[2]), len);
                gemm(
                    false,
                    false,
                    c_out,
                    c_in * k,
                    len,
                    T::one(),
                    self.value(inputs[1]),
                    &cols,
                    T::one(),
                    &mut out,
                );
                (vec![c_out, len], out, Cache::Cols(cols))
            }
            OpKind::Linear => {
                let (sx, sw, sb) = (
                    self.shape(inputs[0]),
                    self.shape(inputs[1]),
                    self.shape(inputs[2]),
                );
                if sw.len() != 2
                    || sb.len() != 1
                    || sb[0] != sw[0]
                    || sx.len() > 2
                    || sx[0] != sw[1]
                {
                    return Err(Error::shape(
                        name,
                        format!("x {sx:?}, weight {sw:?}, bias {sb:?}"),
                    ));
                }
                let cols = if sx.len() == 2 { sx[1] } else { 1 };
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let mut out = broadcast_bias(self.value(inputs[2]), cols);
                gemm(
                    false,
                    false,
                    out_dim,
                    in_dim,
                    cols,
                    T::one(),
                    self.value(inputs[1]),
                    self.value(inputs[0]),
                    T::one(),
                    &mut out,
                );
                let shape = if sx.len() == 2 {
                    vec![out_dim, cols]
                } else {
                    vec![out_dim]
                };
                (shape, out, Cache::None)
            }
            OpKind::Pool2(kind) => {
                let sx = self.shape(inputs[0]);
                if sx.len() != 2 || sx[1] % 2 != 0 {
                    return Err(Error::shape(name, format!("needs [F, even L], got {sx:?}")));
                }
                let (f, l) = (sx[0], sx[1]);
                let (out, winners) = kernels::pool2_forward(self.value(inputs[0]), f, l, *kind);
                (vec![f, l / 2], out, Cache::Winners(winners))
            }
            OpKind::PixelShuffle(order) => {
                let sx = self.shape(inputs[0]);
                if sx.len() != 2 || sx[0] % 2 != 0 {
                    return Err(Error::shape(name, format!("needs [even F, L], got {sx:?}")));
                }
                let (f, l) = (sx[0], sx[1]);
                let out = kernels::shuffle_forward(self.value(inputs[0]), f, l, *order);
                (vec![f / 2, 2 * l], out, Cache::None)
            }
            OpKind::Reshape(shape) => {
                let numel = check_shape(shape)?;
                if numel != self.value(inputs[0]).len() {
                    return Err(Error::shape(
                        name,
                        format!("{:?} -> {shape:?}", self.shape(inputs[0])),
                    ));
                }
                (shape.clone(), self.value(inputs[0]).to_vec(), Cache::None)
            }
            OpKind::SoftmaxNll { targets, mask } => {
                let sx = self.shape(inputs[0]);
                let (classes, len) = match sx {
                    [c] => (*c, 1),
                    [c, l] => (*c, *l),
                    _ => return Err(Error::shape(name, format!("logits {sx:?}"))),
                };
                if mask.is_empty() {
                    return Err(Error::contract("softmax_nll: empty mask"));
                }
                if targets.len() != len {
                    return Err(Error::shape(
                        name,
                        format!("{} targets for length {len}", targets.len()),
                    ));
                }
                let logits = self.value(inputs[0]);
                let mut probs = Vec::with_capacity(mask.len());
                let mut loss = T::zero();
                for &t in mask {
                    if t >= len || targets[t] >= classes {
                        return Err(Error::contract(format!(
                            "softmax_nll: bad masked position {t}"
                        )));
                    }
                    let p = kernels::softmax_column(logits, classes, len, t);
                    // log-softmax computed directly for accuracy
                    let maxv = (0..classes)
                        .map(|v| logits[v * len + t])
                        .fold(T::neg_infinity(), T::max);
                    let lse = maxv
                        + (0..classes)
                            .map(|v| (logits[v * len + t] - maxv).exp())
                            .sum::<T>()
                            .ln();
                    loss += lse - logits[targets[t] * len + t];
                    probs.push(p);
                }
                loss /= T::from_f64(mask.len() as f64);
                (vec![1], vec![loss], Cache::Probs(probs))
            }
            OpKind::Embed(index) => {
                let st = self.shape(inputs[0]);
                if st.len() != 2 || *index >= st[0] {
                    return Err(Error::shape(name, format!("row {index} of {st:?}")));
                }
                let d = st[1];
                (
                    vec![d],
                    self.value(inputs[0])[index * d..(index + 1) * d].to_vec(),
                    Cache::None,
                )
            }
            OpKind::Slice { start, len } => {
                let x = self.value(inputs[0]);
                if *len == 0 || start + len > x.len() {
                    return Err(Error::shape(
                        name,
                        format!("[{start}, {}) of {} values", start + len, x.len()),
                    ));
                }
                (vec![*len], x[*start..start + len].to_vec(), Cache::None)
            }
            OpKind::StackColumns => {
                if inputs.is_empty() {
                    return Err(Error::contract("stack_columns: no inputs"));
                }
                let d = self.value(inputs[0]).len();
                if inputs.iter().any(|&i| self.shape(i) != [d]) {
                    return Err(Error::shape(
                        name,
                        "all inputs must be vectors of equal length",
                    ));
                }
                let k = inputs.len();
                let mut out = vec![T::zero(); d * k];
                for (j, &i) in inputs.iter().enumerate() {
                    for (r, &v) in self.value(i).iter().enumerate() {
                        out[r * k + j] = v;
                    }
                }
                (vec![d, k], out, Cache::None)
            }
        };
        Ok(self.push(Source::Op(op), inputs.to_vec(), shape, value, cache))
    }

    /// Back-propagates from the scalar `loss`, adding `d loss / d leaf` into
    /// the accumulated leaf gradients. Intermediate gradients are transient,
    /// so a second call over the same graph doubles every leaf gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("unknown loss node {loss:?}")));
        }
        if self.shape(loss) != [1] {
            return Err(Error::contract(format!(
                "loss must have shape [1], got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.last_backward.clear();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.last_backward.push(NodeId(i));
            let node = &self.nodes[i];
            let op = match &node.source {
                Source::Input | Source::Param(_) => {
                    let acc = self
                        .leaf_grads
                        .entry(NodeId(i))
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    add_into(acc, &g);
                    continue;
                }
                Source::Op(op) => op,
            };
            let ins = &node.inputs;
            match op {
                OpKind::Add => {
                    add_grad(&mut grads, ins[0], &g);
                    add_grad(&mut grads, ins[1], &g);
                }
                OpKind::Mul => {
                    let (va, vb) = (self.value(ins[0]), self.value(ins[1]));
                    let ga: Vec<T> = g.iter().zip(vb).map(|(&d, &b)| d * b).collect();
                    let gb: Vec<T> = g.iter().zip(va).map(|(&d, &a)| d * a).collect();
                    add_grad(&mut grads, ins[0], &ga);
                    add_grad(&mut grads, ins[1], &gb);
                }
                OpKind::Sum => {
                    let n = self.value(ins[0]).len();
                    add_grad(&mut grads, ins[0], &vec![g[0]; n]);
                }
                OpKind::MatMul => {
                    let (sa, sb) = (self.shape(ins[0]), self.shape(ins[1]));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        false,
                        true,
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        self.value(ins[1]),
                        T::zero(),
                        &mut ga,
                    );
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        true,
                        false,
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(ins[0]),
                        &g,
                        T::zero(),
                        &mut gb,
                    );
                    add_grad(&mut grads, ins[0], &ga);
                    add_grad(&mut grads, ins[1], &gb);
                }
                OpKind::Relu => {
                    let x = self.value(ins[0]);
                    let gx: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Sigmoid => {
                    let gx: Vec<T> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&d, &y)| d * y * (T::one() - y))
                        .collect();
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Tanh => {
                    let gx: Vec<T> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&d, &y)| d * (T::one() - y * y))
                        .collect();
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Scale(c) => {
                    let c = T::from_f64(*c);
                    let gx: Vec<T> = g.iter().map(|&d| d * c).collect();
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Conv1d => {
                    let (sx, sw) = (self.shape(ins[0]), self.shape(ins[1]));
                    let (c_in, len, c_out, k) = (sx[0], sx[1], sw[0], sw[2]);
                    let Cache::Cols(cols) = &node.cache else {
                        unreachable!()
                    };
                    let mut gw = vec![T::zero(); c_out * c_in * k];
                    gemm(
                        false,
                        true,
                        c_out,
                        len,
                        c_in * k,
                        T::one(),
                        &g,
                        cols,
                        T::zero(),
                        &mut gw,
                    );
                    let gb = row_sums(&g, c_out, len);
                    let mut gcols = vec![T::zero(); c_in * k * len];
                    gemm(
                        true,
                        false,
                        c_in * k,
                        c_out,
                        len,
                        T::one(),
                        self.value(ins[1]),
                        &g,
                        T::zero(),
                        &mut gcols,
                    );
                    let mut gx = vec![T::zero(); c_in * len];
                    kernels::col2im_add(&gcols, c_in, len, k, &mut gx);
                    add_grad(&mut grads, ins[0], &gx);
                    add_grad(&mut grads, ins[1], &gw);
                    add_grad(&mut grads, ins[2], &gb);
                }
                OpKind::Linear => {
                    let sw = self.shape(ins[1]);
                    let (out_dim, in_dim) = (sw[0], sw[1]);
                    let cols = g.len() / out_dim;
                    let mut gw = vec![T::zero(); out_dim * in_dim];
                    gemm(
                        false,
                        true,
                        out_dim,
                        cols,
                        in_dim,
                        T::one(),
                        &g,
                        self.value(ins[0]),
                        T::zero(),
                        &mut gw,
                    );
                    let gb = row_sums(&g, out_dim, cols);
                    let mut gx = vec![T::zero(); in_dim * cols];
                    gemm(
                        true,
                        false,
                        in_dim,
                        out_dim,
                        cols,
                        T::one(),
                        self.value(ins[1]),
                        &g,
                        T::zero(),
                        &mut gx,
                    );
                    add_grad(&mut grads, ins[0], &gx);
                    add_grad(&mut grads, ins[1], &gw);
                    add_grad(&mut grads, ins[2], &gb);
                }
                OpKind::Pool2(kind) => {
                    let sx = self.shape(ins[0]);
                    let (f, l) = (sx[0], sx[1]);
                    let winners = match &node.cache {
                        Cache::Winners(w) => w.as_slice(),
                        _ => &[],
                    };
                    let mut gx = vec![T::zero(); f * l];
                    kernels::pool2_backward_add(
                        self.value(ins[0]),
                        &node.value,
                        winners,
                        &g,
                        f,
                        l,
                        *kind,
                        &mut gx,
                    );
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::PixelShuffle(order) => {
                    let sx = self.shape(ins[0]);
                    let mut gx = vec![T::zero(); sx[0] * sx[1]];
                    kernels::shuffle_backward_add(&g, sx[0], sx[1], *order, &mut gx);
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Reshape(_) => add_grad(&mut grads, ins[0], &g),
                OpKind::SoftmaxNll { targets, mask } => {
                    let sx = self.shape(ins[0]);
                    let classes = sx[0];
                    let len = if sx.len() == 2 { sx[1] } else { 1 };
                    let Cache::Probs(probs) = &node.cache else {
                        unreachable!()
                    };
                    let scale = g[0] / T::from_f64(mask.len() as f64);
                    let mut gx = vec![T::zero(); classes * len];
                    for (&t, p) in mask.iter().zip(probs) {
                        for v in 0..classes {
                            gx[v * len + t] += scale * p[v];
                        }
                        gx[targets[t] * len + t] -= scale;
                    }
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::Embed(index) => {
                    let st = self.shape(ins[0]);
                    let d = st[1];
                    let mut gt = vec![T::zero(); st[0] * d];
                    gt[index * d..(index + 1) * d].copy_from_slice(&g);
                    add_grad(&mut grads, ins[0], &gt);
                }
                OpKind::Slice { start, len } => {
                    let n = self.value(ins[0]).len();
                    let mut gx = vec![T::zero(); n];
                    gx[*start..start + len].copy_from_slice(&g);
                    add_grad(&mut grads, ins[0], &gx);
                }
                OpKind::StackColumns => {
                    let k = ins.len();
                    let d = g.len() / k;
                    for (j, &inp) in ins.iter().enumerate() {
                        let col: Vec<T> = (0..d).map(|r| g[r * k + j]).collect();
                        add_grad(&mut grads, inp, &col);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moves parameter gradients out of the graph, releasing the store borrow.
    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let mut grads: Vec<(ParamId, Vec<T>)> = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, node)| self.leaf_grads.remove(node).map(|g| (pid, g)))
            .collect();
        grads.sort_by_key(|(p, _)| *p);
        ParamGrads { grads }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn broadcast_bias<T: Scalar>(bias: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(bias.len() * cols);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(cols));
    }
    out
}

fn row_sums<T: Scalar>(g: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| g[r * cols..(r + 1) * cols].iter().copied().sum())
        .collect()
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &d) in acc.iter_mut().zip(g) {
        *a += d;
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
    match &mut grads[id.0] {
        Some(acc) => add_into(acc, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_input(g: &mut Graph<'static, f64>, v: &[f64]) -> NodeId {
        g.input_raw(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn first_node_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.input_raw(&[2, 3], vec![1.0; 6]).unwrap();
        let b = g.input_raw(&[2, 3], vec![2.0; 6]).unwrap();
        let mut fresh = Graph::<f64>::new();
        let fa = fresh.input_raw(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(fa.index(), 0);
        let out = g.record(OpKind::Add, &[a, b]).unwrap();
        assert_eq!(g.shape(out), &[2, 3]);
        assert_eq!(g.value(out), &[3.0; 6]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input_raw(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.input_raw(&[4, 5], vec![0.0; 20]).unwrap();
        let err = g.record(OpKind::MatMul, &[a, b]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn backward_visits_in_reverse() {
        let mut g = Graph::<f64>::new();
        let x = vec_input(&mut g, &[1.0, 2.0]);
        let mut h = x;
        for _ in 0..3 {
            h = g.record(OpKind::Tanh, &[h]).unwrap();
        }
        let loss = g.record(OpKind::Sum, &[h]).unwrap();
        g.backward(loss).unwrap();
        let order: Vec<usize> = g.last_backward_order().iter().map(|n| n.index()).collect();
        assert_eq!(order, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = vec_input(&mut g, &[1.0, 2.0, 3.0]);
        let s = g.record(OpKind::Sum, &[x]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = vec_input(&mut g, &[1.0, 2.0, 3.0]);
        let sq = g.record(OpKind::Mul, &[x, x]).unwrap();
        let s = g.record(OpKind::Sum, &[sq]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = vec_input(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::<f64>::new();
        let x = vec_input(&mut g, &[0.5, -1.5]);
        let t = g.record(OpKind::Tanh, &[x]).unwrap();
        let sq = g.record(OpKind::Mul, &[t, x]).unwrap();
        let s = g.record(OpKind::Sum, &[sq]).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_param_is_one_node() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add(
            "w",
            crate::params::ParamGroup::EncRecursion,
            Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(),
        );
        let mut g = Graph::with_params(&store);
        let a = g.param(p).unwrap();
        let b = g.param(p).unwrap();
        assert_eq!(a, b);
        let prod = g.record(OpKind::Mul, &[a, b]).unwrap();
        let s = g.record(OpKind::Sum, &[prod]).unwrap();
        g.backward(s).unwrap();
        let grads = g.into_param_grads();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(p).grad().unwrap(), &[2.0, 4.0]);
    }
}
