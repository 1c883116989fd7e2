//! Finite-difference gradient checks in double precision, plus forward
//! oracles for the layer kernels.

use brca::gradcheck::{grad_check, grad_check_inputs, grad_check_params};
use brca::graph::{Graph, OpKind};
use brca::layers::{self, Conv1dParams, LinearParams, PoolKind, ShuffleOrder};
use brca::model::{BrcaConfig, BrcaModel};
use brca::params::{ParamGroup, ParamId, ParamStore};
use brca::{prepare, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_f64(
        shape,
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
    .unwrap()
}

/// Values spaced apart so max-pooling and relu stay away from their kinks
/// under a finite-difference step.
fn separated(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0)
        .collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_f64(shape, &v).unwrap()
}

fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; cout * len];
    for o in 0..cout {
        for t in 0..len {
            let mut s = b[o];
            for c in 0..cin {
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src >= 0 && (src as usize) < len {
                        s += w[(o * cin + c) * k + kk] * x[c * len + src as usize];
                    }
                }
            }
            out[o * len + t] = s;
        }
    }
    out
}

#[test]
fn conv1d_matches_naive_loops() {
    for (cin, cout, k, len) in [(3, 4, 3, 5), (2, 5, 1, 7), (4, 2, 5, 3), (1, 1, 3, 1)] {
        let x = random(&[cin, len], 1);
        let w = random(&[cout, cin, k], 2);
        let b = random(&[cout], 3);
        let mut g = Graph::new();
        let ids = [g.input(&x), g.input(&w), g.input(&b)];
        let y = g.record(OpKind::Conv1d, &ids).unwrap();
        let expect = naive_conv(x.values(), w.values(), b.values(), cin, cout, k, len);
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_gradients() {
    let inputs = [random(&[3, 6], 4), random(&[4, 3, 3], 5), random(&[4], 6)];
    let dev = grad_check_inputs(|g, ids| g.record(OpKind::Conv1d, ids), &inputs, EPS).unwrap();
    assert!(dev < TOL, "conv1d deviation {dev}");
}

#[test]
fn linear_matches_matvec_and_gradients() {
    let x = random(&[5], 7);
    let w = random(&[3, 5], 8);
    let b = random(&[3], 9);
    let mut g = Graph::new();
    let ids = [g.input(&x), g.input(&w), g.input(&b)];
    let y = g.record(OpKind::Linear, &ids).unwrap();
    for o in 0..3 {
        let e: f64 = b.values()[o]
            + (0..5)
                .map(|i| w.values()[o * 5 + i] * x.values()[i])
                .sum::<f64>();
        assert!((g.value(y)[o] - e).abs() < 1e-12);
    }
    for x_shape in [vec![5], vec![5, 4]] {
        let inputs = [random(&x_shape, 10), w.clone(), b.clone()];
        let dev = grad_check_inputs(|g, ids| g.record(OpKind::Linear, ids), &inputs, EPS).unwrap();
        assert!(dev < TOL, "linear {x_shape:?} deviation {dev}");
    }
}

#[test]
fn elementwise_gradients() {
    let x = separated(&[4, 5], 11);
    for op in [
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Scale(-1.7),
        OpKind::Sum,
    ] {
        let dev = grad_check(|g, x| g.record(op.clone(), &[x]), &x, EPS).unwrap();
        assert!(dev < TOL, "{op:?} deviation {dev}");
    }
    let inputs = [random(&[6], 12), random(&[6], 13)];
    for op in [OpKind::Add, OpKind::Mul] {
        let dev = grad_check_inputs(|g, ids| g.record(op.clone(), ids), &inputs, EPS).unwrap();
        assert!(dev < TOL, "{op:?} deviation {dev}");
    }
    let inputs = [random(&[3, 4], 14), random(&[4, 2], 15)];
    let dev = grad_check_inputs(|g, ids| g.record(OpKind::MatMul, ids), &inputs, EPS).unwrap();
    assert!(dev < TOL, "matmul deviation {dev}");
}

#[test]
fn structural_op_gradients() {
    let x = random(&[4, 6], 16);
    let ops = [
        OpKind::Reshape(vec![24]),
        OpKind::Slice { start: 5, len: 9 },
        OpKind::PixelShuffle(ShuffleOrder::Interleaved),
        OpKind::PixelShuffle(ShuffleOrder::Blocked),
        OpKind::Embed(2),
    ];
    for op in ops {
        let dev = grad_check(|g, x| g.record(op.clone(), &[x]), &x, EPS).unwrap();
        assert!(dev < TOL, "{op:?} deviation {dev}");
    }
    let cols = [random(&[3], 17), random(&[3], 18), random(&[3], 19)];
    let dev = grad_check_inputs(|g, ids| g.record(OpKind::StackColumns, ids), &cols, EPS).unwrap();
    assert!(dev < TOL, "stack deviation {dev}");
}

#[test]
fn pooling_gradients() {
    let x = separated(&[3, 8], 20);
    for kind in PoolKind::ALL {
        let dev = grad_check(|g, x| layers::pool2(g, x, kind), &x, EPS).unwrap();
        assert!(dev < TOL, "{kind} pooling deviation {dev}");
    }
}

#[test]
fn softmax_nll_gradients() {
    let logits = random(&[256, 4], 21);
    let dev = grad_check(
        |g, x| layers::softmax_nll(g, x, &[3, 200, 0, 7], &[0, 1, 2]),
        &logits,
        EPS,
    )
    .unwrap();
    assert!(dev < TOL, "softmax_nll deviation {dev}");
}

#[test]
fn residual_pair_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::<f64>::new();
    let a = Conv1dParams::init(
        &mut store,
        "a",
        ParamGroup::EncPrefix,
        4,
        4,
        3,
        1.0,
        &mut rng,
    )
    .unwrap();
    let b = Conv1dParams::init(
        &mut store,
        "b",
        ParamGroup::EncPrefix,
        4,
        4,
        3,
        1.0,
        &mut rng,
    )
    .unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = separated(&[4, 5], 23);
    let loss = |g: &mut Graph<'_, f64>| {
        let xi = g.input(&x);
        let y = layers::residual_pair(g, xi, &a, &b)?;
        let w = g.input(&random(&[4, 5], 24));
        let p = g.record(OpKind::Mul, &[y, w])?;
        g.record(OpKind::Sum, &[p])
    };
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let dev = grad_check_params(&store, loss, &coords, EPS).unwrap();
    assert!(dev < TOL, "residual pair deviation {dev}");

    let mut store2 = ParamStore::<f64>::new();
    let l = LinearParams::init(
        &mut store2,
        "l",
        ParamGroup::EncPostfix,
        6,
        6,
        1.0,
        &mut rng,
    )
    .unwrap();
    let m = LinearParams::init(
        &mut store2,
        "m",
        ParamGroup::EncPostfix,
        6,
        6,
        1.0,
        &mut rng,
    )
    .unwrap();
    let v = random(&[6], 25);
    let loss = |g: &mut Graph<'_, f64>| {
        let xi = g.input(&v);
        let y = layers::residual_pair(g, xi, &l, &m)?;
        let s = g.record(OpKind::Tanh, &[y])?;
        g.record(OpKind::Sum, &[s])
    };
    let coords: Vec<(ParamId, usize)> = store2
        .ids()
        .flat_map(|id| (0..store2.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let dev = grad_check_params(&store2, loss, &coords, EPS).unwrap();
    assert!(dev < TOL, "linear residual pair deviation {dev}");
}

/// Ten random parameter coordinates of the full n = 2 autoencoder on a
/// length-8 sample.
#[test]
fn full_model_gradients() {
    for shuffle in [ShuffleOrder::Interleaved, ShuffleOrder::Blocked] {
        let cfg = BrcaConfig {
            n: 2,
            shuffle,
            ..Default::default()
        };
        let model = BrcaModel::<f64>::new(cfg).unwrap();
        let sample = prepare(b"recurse").unwrap();
        assert_eq!(sample.padded_len(), 8);
        let store = model.params();
        let ids: Vec<ParamId> = store.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let coords: Vec<(ParamId, usize)> = (0..10)
            .map(|_| {
                let id = ids[rng.gen_range(0..ids.len())];
                (id, rng.gen_range(0..store.get(id).numel()))
            })
            .collect();
        let loss = |g: &mut Graph<'_, f64>| model.autoencode_loss(g, &sample).map(|(l, _)| l);
        let dev = grad_check_params(store, loss, &coords, EPS).unwrap();
        assert!(dev < TOL, "{shuffle:?} full model deviation {dev}");
    }
}
