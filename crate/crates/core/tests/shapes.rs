//! Forward shapes of the autoencoder over every raw length up to 300, and
//! the layer-count arithmetic.

use brca::graph::Graph;
use brca::model::{param_layer_count, recursion_count, stage_shapes, BrcaConfig, BrcaModel};
use brca::{prepare, PoolKind, ShuffleOrder};

fn small(n: usize) -> BrcaModel<f32> {
    BrcaModel::new(BrcaConfig {
        n,
        init_gain: 0.408,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn encode_decode_shapes_for_lengths_1_to_300() {
    let model = small(2);
    let raw: Vec<u8> = (0..300).map(|i| b'a' + (i % 26) as u8).collect();
    for l in 1..=300 {
        let sample = prepare(&raw[..l]).unwrap();
        let p = sample.padded_len();
        let mut g = Graph::with_params(model.params());
        let code = model.encode(&mut g, &sample).unwrap();
        assert_eq!(g.shape(code), [1024], "code shape at length {l}");
        let logits = model.decode(&mut g, code, p).unwrap();
        assert_eq!(g.shape(logits), [256, p], "logits shape at length {l}");
        assert!(g.value(logits).iter().all(|v| v.is_finite()));
        let stages = stage_shapes(p).unwrap();
        assert_eq!(stages.last().unwrap().shape, vec![256, p]);
        assert_eq!(stages.len(), 6 + 3 * recursion_count(p).unwrap());
    }
}

#[test]
fn stage_listing_halves_then_doubles() {
    let stages = stage_shapes(64).unwrap();
    let lengths: Vec<usize> = stages
        .iter()
        .filter(|s| s.shape.len() == 2 && s.shape[0] == 256)
        .map(|s| s.shape[1])
        .collect();
    assert_eq!(
        lengths,
        vec![64, 64, 32, 16, 8, 4, 4, 8, 16, 32, 64, 64, 64]
    );
}

#[test]
fn depth_pairs() {
    for (n, depth) in [(2, 40), (4, 80), (8, 160), (16, 320)] {
        assert_eq!(param_layer_count(n, 1024).unwrap(), depth);
    }
    assert_eq!(param_layer_count(8, 4).unwrap(), 32);
}

#[test]
fn executed_layers_match_formula_plus_projection() {
    for n in [2, 4] {
        let model = small(n);
        for p in [4, 8, 32, 256] {
            assert_eq!(
                model.executed_layer_count(p).unwrap(),
                param_layer_count(n, p).unwrap() + 1,
                "n={n} padded={p}"
            );
        }
    }
}

#[test]
fn static_model_counts_its_copies() {
    let model = BrcaModel::<f32>::new(BrcaConfig::with_n(2).static_model(64)).unwrap();
    assert_eq!(model.executed_layer_count(64).unwrap(), param_layer_count(2, 64).unwrap() + 1);
    assert!(model.executed_layer_count(32).is_err());
    let long: Vec<u8> = vec![b'x'; 200];
    let s = model.prepare(&long).unwrap();
    assert_eq!(s.padded_len(), 64);
    assert_eq!(s.valid_len(), 64);
    // Four fixed groups of n, two sides of four recursion copies of n, and
    // the output projection.
    assert_eq!(model.stored_layer_count(), 4 * 2 + 2 * 4 * 2 + 1);
}

#[test]
fn every_variant_builds_the_same_shapes() {
    for pool in [PoolKind::Max, PoolKind::Average, PoolKind::L2] {
        for shuffle in [ShuffleOrder::Interleaved, ShuffleOrder::Blocked] {
            let model = BrcaModel::<f32>::new(BrcaConfig {
                n: 2,
                pool,
                shuffle,
                init_gain: 0.408,
                ..Default::default()
            })
            .unwrap();
            let s = prepare(b"variant check").unwrap();
            assert_eq!(model.reconstruct(&s).unwrap().len(), 16);
        }
    }
}
