//! LSTM baseline: cell gradients, a scalar-loop cell oracle and decoding.

use brca::beam::{beam_search, greedy_decode};
use brca::gradcheck::grad_check_params;
use brca::graph::Graph;
use brca::lstm::{lstm_cell, LstmConfig, LstmDecoder, LstmModel};
use brca::params::ParamId;
use brca::{prepare, OpKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn model(dim: usize, seed: u64) -> LstmModel<f64> {
    LstmModel::new(LstmConfig {
        dim,
        seed,
        init_gain: 1.0,
        ..Default::default()
    })
    .unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Written out element by element from the gate equations.
fn cell_oracle(m: &LstmModel<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let p = m.params();
    let cell = m.encoder_cell();
    let (wx, bx) = (p.get(cell.input.weight).values(), p.get(cell.input.bias).values());
    let (wh, bh) = (p.get(cell.hidden.weight).values(), p.get(cell.hidden.bias).values());
    let pre = |row: usize| -> f64 {
        let mut s = bx[row] + bh[row];
        for k in 0..d {
            s += wx[row * d + k] * x[k] + wh[row * d + k] * h[k];
        }
        s
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h2 = vec![0.0; d];
    let mut c2 = vec![0.0; d];
    for j in 0..d {
        let i = sig(pre(j));
        let f = sig(pre(d + j));
        let o = sig(pre(2 * d + j));
        let g = pre(3 * d + j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[test]
fn cell_matches_scalar_oracle_in_graph_and_direct() {
    let m = model(6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let (x, h, c) = (random_vec(6, &mut rng), random_vec(6, &mut rng), random_vec(6, &mut rng));
        let (eh, ec) = cell_oracle(&m, &x, &h, &c);
        let (dh, dc) = m.cell_step(m.encoder_cell(), &x, &h, &c);
        let mut g = Graph::with_params(m.params());
        let nodes: Vec<_> = [&x, &h, &c]
            .iter()
            .map(|v| g.input_raw(&[6], v.to_vec()).unwrap())
            .collect();
        let (gh, gc) = lstm_cell(&mut g, nodes[0], nodes[1], nodes[2], m.encoder_cell()).unwrap();
        for j in 0..6 {
            for (a, b) in [(dh[j], eh[j]), (dc[j], ec[j]), (g.value(gh)[j], eh[j]), (g.value(gc)[j], ec[j])] {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

/// Ten random parameter coordinates of `m`, drawn from every tensor.
fn coords(m: &LstmModel<f64>, seed: u64) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = m.params().ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..m.params().get(id).numel()))
        })
        .collect()
}

#[test]
fn two_cell_steps_gradients() {
    // The second step sees the first step's (h, c), so the state paths are
    // differentiated too.
    let m = model(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x1, x2, h0, c0) = (
        random_vec(5, &mut rng),
        random_vec(5, &mut rng),
        random_vec(5, &mut rng),
        random_vec(5, &mut rng),
    );
    let loss = |g: &mut Graph<'_, f64>| {
        let ids: Vec<_> = [&x1, &x2, &h0, &c0]
            .iter()
            .map(|v| g.input_raw(&[5], v.to_vec()))
            .collect::<brca::Result<_>>()?;
        let (h1, c1) = lstm_cell(g, ids[0], ids[2], ids[3], m.encoder_cell())?;
        let (h2, c2) = lstm_cell(g, ids[1], h1, c1, m.encoder_cell())?;
        let w = g.input_raw(&[5], vec![0.3, -1.1, 0.7, 1.9, -0.4])?;
        let hw = g.record(OpKind::Mul, &[h2, w])?;
        let s = g.record(OpKind::Add, &[hw, c2])?;
        g.record(OpKind::Sum, &[s])
    };
    let cell = m.encoder_cell();
    let tensors = [cell.input.weight, cell.input.bias, cell.hidden.weight, cell.hidden.bias];
    let picks: Vec<(ParamId, usize)> = (0..10)
        .map(|k| {
            let id = tensors[k % 4];
            (id, rng.gen_range(0..m.params().get(id).numel()))
        })
        .collect();
    let dev = grad_check_params(m.params(), loss, &picks, EPS).unwrap();
    assert!(dev < TOL, "cell deviation {dev}");
}

#[test]
fn autoencoder_loss_gradients() {
    let m = model(4, 7);
    let sample = prepare(b"lstm").unwrap();
    let loss = |g: &mut Graph<'_, f64>| m.autoencode_loss(g, &sample).map(|(l, _)| l);
    let dev = grad_check_params(m.params(), loss, &coords(&m, 8), EPS).unwrap();
    assert!(dev < TOL, "autoencoder deviation {dev}");
}

#[test]
fn beam_of_one_is_greedy_on_the_lstm() {
    let m = model(8, 9).cast::<f32>();
    for text in [&b"a"[..], b"hello", b"greedy beam"] {
        let (h, c) = m.encode_state(text).unwrap();
        let d = LstmDecoder(&m);
        let b = beam_search(&d, (h.clone(), c.clone()), 0, 12, 1).unwrap();
        let g = greedy_decode(&d, (h, c), 0, 12).unwrap();
        assert_eq!(b, g);
    }
}

#[test]
fn graph_encoder_matches_direct_state() {
    let m = model(6, 10);
    let text = b"state";
    let (h, c) = m.encode_state(text).unwrap();
    let mut g = Graph::with_params(m.params());
    let (gh, gc) = m.encode_reversed(&mut g, text).unwrap();
    for j in 0..6 {
        assert!((g.value(gh)[j] - h[j]).abs() < 1e-12);
        assert!((g.value(gc)[j] - c[j]).abs() < 1e-12);
    }
}
