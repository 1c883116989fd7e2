//! Property tests for the data pipeline and the graph-free layer kernels.

use brca::data::{mutate, padded_length, prepare, prepare_padded, Decoded, EOS};
use brca::eval::{length_bin, recursion_level, select_samples};
use brca::layers::{pixel_shuffle_tensor, pool2_tensor, PoolKind, ShuffleOrder};
use brca::model::recursion_count;
use brca::{Corpus, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raw_bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(1u8..=255, 1..=max)
}

/// Smallest power of two that is at least 4 and holds `l` bytes plus the
/// terminator, found by doubling.
fn padded_oracle(l: usize) -> usize {
    let mut p = 4;
    while p < l + 1 {
        p *= 2;
    }
    p
}

proptest! {
    #[test]
    fn padded_length_matches_doubling(l in 1usize..100_000) {
        let p = padded_length(l).unwrap();
        prop_assert_eq!(p, padded_oracle(l));
        prop_assert!(p.is_power_of_two() && p > l);
        prop_assert!(p == 4 || p / 2 < l + 1);
    }

    #[test]
    fn recursion_reaches_code_length(l in 1usize..100_000) {
        let p = padded_length(l).unwrap();
        let r = recursion_count(p).unwrap();
        prop_assert_eq!(p >> r, 4);
    }

    #[test]
    fn onehot_and_mask(raw in raw_bytes(300)) {
        let s = prepare(&raw).unwrap();
        let len = s.padded_len();
        let oh = s.onehot::<f64>();
        prop_assert_eq!(oh.shape(), &[256, len][..]);
        let v = oh.values();
        let targets = s.targets();
        for t in 0..len {
            let col: f64 = (0..256).map(|c| v[c * len + t]).sum();
            if t < s.valid_len() {
                prop_assert_eq!(col, 1.0);
                prop_assert_eq!(v[targets[t] as usize * len + t], 1.0);
            } else {
                prop_assert_eq!(col, 0.0);
            }
        }
        prop_assert_eq!(targets[s.eos_position()], EOS);
        prop_assert_eq!(&targets[..raw.len()], &raw[..]);
        prop_assert_eq!(s.valid_positions(), (0..=raw.len()).collect::<Vec<_>>());
    }

    #[test]
    fn prepared_targets_decode_to_raw(raw in raw_bytes(300)) {
        let s = prepare(&raw).unwrap();
        let d = Decoded::from_positions(&s.targets());
        prop_assert!(d.terminated);
        prop_assert_eq!(d.bytes, raw);
    }

    #[test]
    fn null_bytes_rejected(mut raw in raw_bytes(64), at in any::<prop::sample::Index>()) {
        let i = at.index(raw.len());
        raw[i] = EOS;
        prop_assert!(prepare(&raw).is_err());
    }

    #[test]
    fn oversized_padding_request_rejected(raw in raw_bytes(64)) {
        let p = padded_length(raw.len()).unwrap();
        prop_assert!(prepare_padded(&raw, p / 2).is_err() || p / 2 < 4);
        prop_assert!(prepare_padded(&raw, p * 2).is_ok());
    }

    #[test]
    fn mutation_never_emits_null_and_respects_extremes(raw in raw_bytes(200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(mutate(&raw, 0.0, &mut rng).unwrap(), raw.clone());
        let all = mutate(&raw, 1.0, &mut rng).unwrap();
        prop_assert_eq!(all.len(), raw.len());
        for (a, b) in raw.iter().zip(&all) {
            prop_assert!(a != b && *b != EOS);
        }
        let half = mutate(&raw, 0.5, &mut rng).unwrap();
        prop_assert!(half.iter().all(|&b| b != EOS));
    }

    #[test]
    fn mutation_is_seeded(raw in raw_bytes(100), seed in any::<u64>(), p in 0.0f64..=1.0) {
        let a = mutate(&raw, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = mutate(&raw, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shuffle_is_a_permutation_keeping_pairs_local(
        half in 1usize..12,
        len in 1usize..12,
        blocked in any::<bool>(),
    ) {
        let f = 2 * half;
        let order = if blocked { ShuffleOrder::Blocked } else { ShuffleOrder::Interleaved };
        let tags: Vec<f64> = (0..f * len).map(|i| i as f64).collect();
        let x = Tensor::new(&[f, len], tags).unwrap();
        let y = pixel_shuffle_tensor(&x, order).unwrap();
        prop_assert_eq!(y.shape(), &[half, 2 * len][..]);
        let mut seen: Vec<usize> = y.values().iter().map(|&v| v as usize).collect();
        // Output positions 2t and 2t+1 both come from input position t.
        for c in 0..half {
            for t in 0..2 * len {
                let src = y.values()[c * 2 * len + t] as usize;
                prop_assert_eq!(src % len, t / 2);
            }
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..f * len).collect::<Vec<_>>());
    }

    #[test]
    fn pooling_bounds(
        values in prop::collection::vec(-10.0f64..10.0, 2..64).prop_filter("even", |v| v.len() % 2 == 0),
    ) {
        let len = values.len();
        let x = Tensor::new(&[1, len], values.clone()).unwrap();
        let max = pool2_tensor(&x, PoolKind::Max).unwrap();
        let avg = pool2_tensor(&x, PoolKind::Average).unwrap();
        let l2 = pool2_tensor(&x, PoolKind::L2).unwrap();
        for t in 0..len / 2 {
            let (a, b) = (values[2 * t], values[2 * t + 1]);
            prop_assert_eq!(max.values()[t], a.max(b));
            prop_assert!((avg.values()[t] - (a + b) / 2.0).abs() < 1e-12);
            let rms = l2.values()[t];
            prop_assert!(rms >= avg.values()[t].abs() - 1e-12);
            prop_assert!(rms <= a.abs().max(b.abs()) + 1e-12);
        }
    }

    #[test]
    fn selection_is_deterministic_and_in_range(n in 1usize..200, k in 1usize..400, seed in any::<u64>()) {
        let a = select_samples(n, k, seed).unwrap();
        prop_assert_eq!(&a, &select_samples(n, k, seed).unwrap());
        prop_assert_eq!(a.len(), k);
        prop_assert!(a.iter().all(|&i| i < n));
        if k <= n {
            let mut d = a.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), k);
        }
    }

    #[test]
    fn length_bins_cover_their_samples(l in 1usize..2000, width in 1usize..200) {
        let bin = length_bin(l, width);
        prop_assert!(bin >= l && bin - l < width && bin % width == 0);
        prop_assert!(4usize << recursion_level(bin) >= bin);
    }

    #[test]
    fn corpus_lines_are_capped(lines in prop::collection::vec(raw_bytes(80), 1..20), cap in 1usize..100) {
        let lines: Vec<Vec<u8>> = lines
            .into_iter()
            .map(|l| l.into_iter().map(|b| if b == b'\n' || b == b'\r' { b'x' } else { b }).collect())
            .collect();
        let text = lines.join(&b'\n');
        let c = Corpus::from_bytes("prop", &text, cap).unwrap();
        prop_assert_eq!(c.len(), lines.len());
        for (s, l) in c.samples().iter().zip(&lines) {
            prop_assert_eq!(&s[..], &l[..l.len().min(cap)]);
        }
    }
}
