//! Beam search and greedy decoding over any step-wise token model.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A left-to-right model emitting one token per step.
pub trait Decoder {
    type State: Clone;

    fn vocab(&self) -> usize;

    /// Token that finalizes a hypothesis.
    fn eos(&self) -> u8 {
        0
    }

    /// Feeds `input` and returns the next state with log-probabilities over
    /// the vocabulary.
    fn step(&self, state: &Self::State, input: u8) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Emitted tokens, including the final EOS when terminated.
    pub tokens: Vec<u8>,
    pub log_prob: f64,
    pub terminated: bool,
}

/// Higher log-probability first, then the lexicographically smaller sequence.
fn rank(a_lp: f64, a: &[u8], b_lp: f64, b: &[u8]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a.cmp(b))
}

struct Hyp<S> {
    tokens: Vec<u8>,
    log_prob: f64,
    state: S,
}

/// Keeps the `beam` best partial sequences by summed log-probability; a
/// hypothesis that emits EOS is finalized. Returns the most likely of the
/// finalized sequences and those cut off at `max_len`.
pub fn beam_search<D: Decoder>(
    d: &D,
    init: D::State,
    start: u8,
    max_len: usize,
    beam: usize,
) -> Result<BeamResult> {
    if max_len == 0 || beam == 0 {
        return Err(Error::contract(
            "beam search needs max_len >= 1 and beam >= 1",
        ));
    }
    let eos = d.eos();
    let mut running = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
    }];
    let mut finished: Vec<(Vec<u8>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(usize, Vec<u8>, f64)> = Vec::with_capacity(running.len() * d.vocab());
        let mut next_states = Vec::with_capacity(running.len());
        for (hi, h) in running.iter().enumerate() {
            let input = h.tokens.last().copied().unwrap_or(start);
            let (state, log_probs) = d.step(&h.state, input)?;
            if log_probs.len() != d.vocab() {
                return Err(Error::contract(format!(
                    "decoder returned {} scores for vocab {}",
                    log_probs.len(),
                    d.vocab()
                )));
            }
            for (v, lp) in log_probs.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v as u8);
                cands.push((hi, tokens, h.log_prob + lp));
            }
            next_states.push(state);
        }
        cands.sort_by(|a, b| rank(a.2, &a.1, b.2, &b.1));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (hi, tokens, lp) in cands {
            if tokens.last() == Some(&eos) {
                finished.push((tokens, lp));
            } else {
                next.push(Hyp {
                    tokens,
                    log_prob: lp,
                    state: next_states[hi].clone(),
                });
            }
        }
        running = next;
        let best_done = finished
            .iter()
            .map(|f| f.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_open = running
            .iter()
            .map(|h| h.log_prob)
            .fold(f64::NEG_INFINITY, f64::max);
        // Log-probabilities only decrease, so an open hypothesis strictly
        // below the best finished one can never overtake it.
        if running.is_empty() || best_done > best_open {
            break;
        }
    }
    // Hypotheses still open here ran into `max_len`; they compete with the
    // finished ones as truncated outputs.
    let open = running.into_iter().map(|h| (h.tokens, h.log_prob, false));
    let done = finished.into_iter().map(|(t, lp)| (t, lp, true));
    let (tokens, log_prob, terminated) = done
        .chain(open)
        .min_by(|a, b| rank(a.1, &a.0, b.1, &b.0))
        .ok_or_else(|| Error::contract("beam search ended with no hypotheses"))?;
    Ok(BeamResult {
        tokens,
        log_prob,
        terminated,
    })
}

/// Picks the most likely token at every step (ties to the smaller token).
pub fn greedy_decode<D: Decoder>(
    d: &D,
    init: D::State,
    start: u8,
    max_len: usize,
) -> Result<BeamResult> {
    if max_len == 0 {
        return Err(Error::contract("greedy decoding needs max_len >= 1"));
    }
    let (mut state, mut input) = (init, start);
    let mut out = BeamResult {
        tokens: Vec::new(),
        log_prob: 0.0,
        terminated: false,
    };
    for _ in 0..max_len {
        let (next, log_probs) = d.step(&state, input)?;
        let (v, lp) =
            log_probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (v, &lp)| {
                    if lp > best.1 {
                        (v, lp)
                    } else {
                        best
                    }
                });
        out.tokens.push(v as u8);
        out.log_prob += lp;
        if v as u8 == d.eos() {
            out.terminated = true;
            break;
        }
        state = next;
        input = v as u8;
    }
    Ok(out)
}

/// Log-softmax of `logits` in double precision.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-step distributions, independent of history.
    struct Table(Vec<Vec<f64>>);

    impl Decoder for Table {
        type State = usize;
        fn vocab(&self) -> usize {
            self.0[0].len()
        }
        fn step(&self, t: &usize, _: u8) -> Result<(usize, Vec<f64>)> {
            Ok((t + 1, log_softmax(&self.0[(*t).min(self.0.len() - 1)])))
        }
    }

    #[test]
    fn near_deterministic_model_gives_greedy_path() {
        let d = Table(vec![
            vec![0.0, 50.0, 0.0],
            vec![0.0, 0.0, 50.0],
            vec![50.0, 0.0, 0.0],
        ]);
        let g = greedy_decode(&d, 0, 0, 5).unwrap();
        let b = beam_search(&d, 0, 0, 5, 2).unwrap();
        assert_eq!(g.tokens, vec![1, 2, 0]);
        assert_eq!(b.tokens, g.tokens);
        assert!(b.terminated);
    }

    #[test]
    fn unterminated_at_max_len() {
        let d = Table(vec![vec![-50.0, 0.0]]);
        let b = beam_search(&d, 0, 0, 3, 1).unwrap();
        assert_eq!(b.tokens, vec![1, 1, 1]);
        assert!(!b.terminated);
    }

    #[test]
    fn ties_prefer_smaller_sequence() {
        let d = Table(vec![vec![0.0, 1.0, 1.0], vec![5.0, 0.0, 0.0]]);
        let b = beam_search(&d, 0, 0, 4, 2).unwrap();
        assert_eq!(b.tokens, vec![1, 0]);
        let g = greedy_decode(&d, 0, 0, 4).unwrap();
        assert_eq!(g.tokens, vec![1, 0]);
    }

    #[test]
    fn rejects_zero_sizes() {
        let d = Table(vec![vec![0.0, 0.0]]);
        assert!(beam_search(&d, 0, 0, 0, 2).is_err());
        assert!(beam_search(&d, 0, 0, 2, 0).is_err());
        assert!(greedy_decode(&d, 0, 0, 0).is_err());
    }
}
