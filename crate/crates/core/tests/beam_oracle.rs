//! Beam search against exhaustive enumeration on small random decoders.

use brca::beam::{beam_search, greedy_decode, log_softmax, BeamResult, Decoder};
use brca::Result;
use proptest::prelude::*;

/// Scores depend on the whole prefix, so no Markov shortcut can hide a bug.
#[derive(Debug)]
struct Toy {
    vocab: usize,
    seed: u64,
    /// Added to the EOS logit; negative values make termination rare.
    eos_bias: f64,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

impl Decoder for Toy {
    type State = Vec<u8>;

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn step(&self, history: &Vec<u8>, input: u8) -> Result<(Vec<u8>, Vec<f64>)> {
        let mut next = history.clone();
        next.push(input);
        let mut h = self.seed;
        for &b in &next {
            h = mix(h ^ u64::from(b).wrapping_add(0x9e37_79b9));
        }
        let logits: Vec<f64> = (0..self.vocab)
            .map(|v| {
                let r = mix(h.wrapping_add(v as u64)) >> 11;
                let z = 3.0 * (r as f64 / (1u64 << 53) as f64);
                if v == 0 {
                    z + self.eos_bias
                } else {
                    z
                }
            })
            .collect();
        Ok((next, log_softmax(&logits)))
    }
}

/// Every sequence that ends in EOS within `max_len`, plus every length
/// `max_len` sequence without EOS, with its summed log-probability.
fn enumerate(d: &Toy, max_len: usize) -> Vec<(Vec<u8>, f64, bool)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u8>::new(), 0.0, Vec::<u8>::new())];
    while let Some((tokens, lp, state)) = stack.pop() {
        let input = tokens.last().copied().unwrap_or(0);
        let (next, scores) = d.step(&state, input).unwrap();
        for (v, s) in scores.iter().enumerate() {
            let mut t = tokens.clone();
            t.push(v as u8);
            if v == 0 {
                out.push((t, lp + s, true));
            } else if t.len() == max_len {
                out.push((t, lp + s, false));
            } else {
                stack.push((t, lp + s, next.clone()));
            }
        }
    }
    out
}

fn optimum(d: &Toy, max_len: usize) -> BeamResult {
    let all = enumerate(d, max_len);
    let best = all
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .unwrap();
    BeamResult {
        tokens: best.0,
        log_prob: best.1,
        terminated: best.2,
    }
}

fn toy() -> impl Strategy<Value = (Toy, usize)> {
    (2usize..=8, 1usize..=4, any::<u64>(), prop::sample::select(vec![0.0, -2.0, -6.0])).prop_map(
        |(vocab, len, seed, eos_bias)| {
            (
                Toy {
                    vocab,
                    seed,
                    eos_bias,
                },
                len,
            )
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn full_beam_finds_the_exhaustive_optimum((d, len) in toy()) {
        let width = d.vocab.pow(len as u32);
        let best = optimum(&d, len);
        let found = beam_search(&d, Vec::new(), 0, len, width).unwrap();
        prop_assert_eq!(&found.tokens, &best.tokens);
        prop_assert_eq!(found.terminated, best.terminated);
        prop_assert!((found.log_prob - best.log_prob).abs() < 1e-12);
    }

    #[test]
    fn narrow_beams_never_beat_the_optimum((d, len) in toy(), beam in 1usize..4) {
        let best = optimum(&d, len);
        let found = beam_search(&d, Vec::new(), 0, len, beam).unwrap();
        prop_assert!(found.log_prob <= best.log_prob + 1e-12);
        prop_assert!(found.tokens.len() <= len);
        prop_assert_eq!(found.terminated, found.tokens.last() == Some(&0));
    }

    #[test]
    fn beam_of_one_is_greedy((d, len) in toy()) {
        let b = beam_search(&d, Vec::new(), 0, len, 1).unwrap();
        let g = greedy_decode(&d, Vec::new(), 0, len).unwrap();
        prop_assert_eq!(b, g);
    }
}

#[test]
fn enumeration_probabilities_sum_to_one() {
    for len in 1..=4 {
        let d = Toy {
            vocab: 5,
            seed: 17,
            eos_bias: -1.0,
        };
        let total: f64 = enumerate(&d, len).iter().map(|s| s.1.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "len {len}: {total}");
    }
}
