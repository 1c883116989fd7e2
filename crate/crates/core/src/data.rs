//! Byte-level sample preparation and corpus handling.
//!
//! Every sample gets a terminating null byte and is zero-padded to a power of
//! two (at least 4). Padding columns of the one-hot matrix are all-zero.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// End-of-sequence byte.
pub const EOS: u8 = 0;
pub const BYTE_CLASSES: usize = 256;
pub const MIN_PADDED_LEN: usize = 4;
pub const DEFAULT_LENGTH_CAP: usize = 1024;

/// `max(4, 2^ceil(log2(l + 1)))`.
pub fn padded_length(l: usize) -> Result<usize> {
    if l == 0 {
        return Err(Error::contract("padded_length of an empty sample"));
    }
    Ok((l + 1).next_power_of_two().max(MIN_PADDED_LEN))
}

/// A prepared sample: raw bytes plus the padding geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteSample {
    raw: Vec<u8>,
    padded_len: usize,
}

/// Prepares `raw` with the natural padded length.
pub fn prepare(raw: &[u8]) -> Result<ByteSample> {
    if raw.is_empty() {
        return Err(Error::contract("cannot prepare an empty sample"));
    }
    prepare_padded(raw, padded_length(raw.len())?)
}

/// Prepares `raw` padded to a caller-chosen power of two, as the static model
/// does with its fixed input length.
pub fn prepare_padded(raw: &[u8], padded_len: usize) -> Result<ByteSample> {
    if raw.is_empty() {
        return Err(Error::contract("cannot prepare an empty sample"));
    }
    if let Some(pos) = raw.iter().position(|&b| b == EOS) {
        return Err(Error::RejectedInput(format!(
            "null byte at offset {pos}; null is reserved for end-of-sequence"
        )));
    }
    if !padded_len.is_power_of_two() || padded_len < MIN_PADDED_LEN {
        return Err(Error::contract(format!(
            "padded length {padded_len} must be a power of two >= 4"
        )));
    }
    if raw.len() + 1 > padded_len {
        return Err(Error::contract(format!(
            "sample of {} bytes plus terminator does not fit padded length {padded_len}",
            raw.len()
        )));
    }
    Ok(ByteSample {
        raw: raw.to_vec(),
        padded_len,
    })
}

impl ByteSample {
    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    /// Raw length plus the terminating null.
    pub fn valid_len(&self) -> usize {
        self.raw.len() + 1
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    /// Position of the terminating null, i.e. the raw length.
    pub fn eos_position(&self) -> usize {
        self.raw.len()
    }

    /// Target byte per padded position: the raw bytes, the null, then zeros
    /// (which are masked out of every loss and metric).
    pub fn targets(&self) -> Vec<u8> {
        let mut t = self.raw.clone();
        t.resize(self.padded_len, EOS);
        t
    }

    /// Positions that count towards loss and error.
    pub fn valid_positions(&self) -> Vec<usize> {
        (0..self.valid_len()).collect()
    }

    /// One-hot matrix `[256, padded_len]`; columns past the null are zero.
    pub fn onehot<T: Scalar>(&self) -> Tensor<T> {
        let len = self.padded_len;
        let mut v = vec![T::zero(); BYTE_CLASSES * len];
        for (t, &b) in self.raw.iter().chain(std::iter::once(&EOS)).enumerate() {
            v[b as usize * len + t] = T::one();
        }
        Tensor::new(&[BYTE_CLASSES, len], v).expect("one-hot shape")
    }
}

/// Per-position argmax over the class axis of `[classes, len]` values; ties
/// go to the smaller class.
pub fn argmax_columns<T: Scalar>(values: &[T], classes: usize, len: usize) -> Vec<u8> {
    (0..len)
        .map(|t| {
            let mut best = 0;
            for c in 1..classes {
                if values[c * len + t] > values[best * len + t] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Bytes read off a decoder output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Everything before the first null.
    pub bytes: Vec<u8>,
    /// Whether a null occurred at all.
    pub terminated: bool,
}

impl Decoded {
    /// Splits per-position bytes at the first null.
    pub fn from_positions(positions: &[u8]) -> Self {
        match positions.iter().position(|&b| b == EOS) {
            Some(p) => Decoded {
                bytes: positions[..p].to_vec(),
                terminated: true,
            },
            None => Decoded {
                bytes: positions.to_vec(),
                terminated: false,
            },
        }
    }
}

/// Argmax-decodes `logits[256, L]` and cuts at the first null.
pub fn decode_output<T: Scalar>(logits: &Tensor<T>) -> Result<Decoded> {
    let (classes, len) = match logits.shape() {
        [c, l] => (*c, *l),
        [c] => (*c, 1),
        s => return Err(Error::shape("decode_output", format!("logits {s:?}"))),
    };
    Ok(Decoded::from_positions(&argmax_columns(
        logits.values(),
        classes,
        len,
    )))
}

/// Replaces each byte independently with probability `p` by a uniform draw
/// from `1..=255` excluding its current value.
pub fn mutate<R: Rng>(raw: &[u8], p: f64, rng: &mut R) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!(
            "mutation probability {p} outside [0, 1]"
        )));
    }
    Ok(raw
        .iter()
        .map(|&b| {
            if rng.gen::<f64>() < p {
                let r: u8 = rng.gen_range(1..=254);
                if b != EOS && r >= b {
                    r + 1
                } else {
                    r
                }
            } else {
                b
            }
        })
        .collect())
}

/// Newline-delimited paragraphs, each truncated to `cap` bytes.
#[derive(Debug, Clone)]
pub struct Corpus {
    source: String,
    samples: Vec<Vec<u8>>,
    cap: usize,
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>, cap: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(path.display().to_string(), &bytes, cap)
    }

    /// Splits `text` on `\n`, dropping a trailing `\r` and empty lines.
    pub fn from_bytes(source: impl Into<String>, text: &[u8], cap: usize) -> Result<Self> {
        let lines = text
            .split(|&b| b == b'\n')
            .map(|l| l.strip_suffix(b"\r").unwrap_or(l));
        Self::from_samples(source, lines, cap)
    }

    pub fn from_samples<I, S>(source: impl Into<String>, samples: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        if cap == 0 {
            return Err(Error::contract("corpus length cap must be positive"));
        }
        let source = source.into();
        let mut out = Vec::new();
        for (line_no, s) in samples.into_iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() {
                continue;
            }
            if s.contains(&EOS) {
                return Err(Error::RejectedInput(format!(
                    "{source}: line {} contains a null byte",
                    line_no + 1
                )));
            }
            out.push(s[..s.len().min(cap)].to_vec());
        }
        Ok(Corpus {
            source,
            samples: out,
            cap,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<u8>] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Option<&[u8]> {
        self.samples.get(i).map(Vec::as_slice)
    }

    /// The first `count` samples whose length is at most `max_len`.
    pub fn subset(&self, count: usize, max_len: usize) -> Corpus {
        Corpus {
            source: format!("{}[first {count} <= {max_len}B]", self.source),
            samples: self
                .samples
                .iter()
                .filter(|s| s.len() <= max_len)
                .take(count)
                .cloned()
                .collect(),
            cap: self.cap.min(max_len),
        }
    }

    /// Uniformly picks a raw sample.
    pub fn pick<R: Rng>(&self, rng: &mut R) -> Result<&[u8]> {
        if self.samples.is_empty() {
            return Err(Error::contract(format!("corpus {} is empty", self.source)));
        }
        Ok(&self.samples[rng.gen_range(0..self.samples.len())])
    }

    /// Uniformly picks and prepares a sample.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R) -> Result<ByteSample> {
        prepare(self.pick(rng)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padded_length_examples() {
        assert_eq!(padded_length(3).unwrap(), 4);
        assert_eq!(padded_length(1).unwrap(), 4);
        assert_eq!(padded_length(5).unwrap(), 8);
        assert_eq!(padded_length(7).unwrap(), 8);
        assert_eq!(padded_length(1023).unwrap(), 1024);
        assert_eq!(padded_length(1024).unwrap(), 2048);
        assert!(padded_length(0).is_err());
    }

    #[test]
    fn prepare_ab() {
        let s = prepare(b"ab").unwrap();
        assert_eq!((s.valid_len(), s.padded_len()), (3, 4));
        let oh = s.onehot::<f32>();
        let v = oh.values();
        let col = |t: usize| -> Vec<f32> { (0..256).map(|c| v[c * 4 + t]).collect() };
        assert_eq!(col(0)[b'a' as usize], 1.0);
        assert_eq!(col(2)[0], 1.0);
        assert_eq!(col(2).iter().sum::<f32>(), 1.0);
        assert_eq!(col(3).iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn prepare_seven_bytes_fills_exactly() {
        let s = prepare(b"abcdefg").unwrap();
        assert_eq!(s.padded_len(), 8);
        assert_eq!(s.valid_len(), s.padded_len());
        assert_eq!(s.targets()[7], EOS);
    }

    #[test]
    fn prepare_rejects_null_and_empty() {
        assert!(matches!(prepare(b"a\0b"), Err(Error::RejectedInput(_))));
        assert!(matches!(prepare(b""), Err(Error::Contract(_))));
        assert!(prepare_padded(b"abcd", 4).is_err());
    }

    #[test]
    fn multibyte_text_is_raw_bytes() {
        let s = prepare("中文".as_bytes()).unwrap();
        assert_eq!(s.raw().len(), 6);
        assert_eq!(s.padded_len(), 8);
    }

    #[test]
    fn decode_output_examples() {
        assert_eq!(
            Decoded::from_positions(&[104, 105, 0, 7]),
            Decoded {
                bytes: b"hi".to_vec(),
                terminated: true
            }
        );
        assert_eq!(
            Decoded::from_positions(&[0, 5, 6, 7]),
            Decoded {
                bytes: vec![],
                terminated: true
            }
        );
        let d = Decoded::from_positions(&[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!((d.bytes.len(), d.terminated), (8, false));
    }

    #[test]
    fn mutate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<u8> = (1..=255u8).cycle().take(1000).collect();
        assert_eq!(mutate(&raw, 0.0, &mut rng).unwrap(), raw);
        let m = mutate(&raw, 1.0, &mut rng).unwrap();
        assert!(m.iter().zip(&raw).all(|(a, b)| a != b));
        assert!(m.iter().all(|&b| b != EOS));
        assert!(mutate(&raw, 1.5, &mut rng).is_err());
        assert!(mutate(&raw, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mutate_fraction_concentrates() {
        // Binomial(10000, 0.5) has sd 50 bytes = 0.005; 0.02 is four sd.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = vec![b'x'; 10_000];
        let m = mutate(&raw, 0.5, &mut rng).unwrap();
        let frac = m.iter().zip(&raw).filter(|(a, b)| a != b).count() as f64 / raw.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn corpus_sampling() {
        let c = Corpus::from_bytes("one", b"only line\n", 1024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(c.sample_batch(&mut rng).unwrap().raw(), b"only line");
        }
        let long = vec![b'z'; 3000];
        let c = Corpus::from_samples("long", [long], 1024).unwrap();
        assert_eq!(c.get(0).unwrap().len(), 1024);
        let empty = Corpus::from_bytes("empty", b"\n\n", 8).unwrap();
        assert!(empty.sample_batch(&mut rng).is_err());
    }

    #[test]
    fn corpus_picks_are_reproducible() {
        let c = Corpus::from_bytes("abc", b"a\nbb\nccc\ndddd\n", 1024).unwrap();
        let picks = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| c.pick(&mut rng).unwrap().len())
                .collect::<Vec<_>>()
        };
        assert_eq!(picks(9), picks(9));
    }

    #[test]
    fn corpus_rejects_null_lines_and_strips_cr() {
        assert!(Corpus::from_bytes("x", b"ok\nbad\0line\n", 64).is_err());
        let c = Corpus::from_bytes("x", b"line\r\n", 64).unwrap();
        assert_eq!(c.get(0).unwrap(), b"line");
    }
}
