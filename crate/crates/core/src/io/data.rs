//! Synthetic noisy-copy task.
//!
//! Each utterance is a token sequence over `V` content tokens (`1..=V`)
//! and one noise token (`0`); its transcript is the content tokens in
//! order. Utterances can be rendered as noisy feature frames, where every
//! token becomes `frames_per_token` copies of a fixed code vector plus
//! Gaussian noise, so that recovering a token needs context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::blocks::InputSeq;
use crate::error::{Error, Result};

pub const NOISE_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Token sequence length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    /// Frames per token when rendering features; `1` with `feature_dim = 0`
    /// keeps raw token inputs.
    #[serde(default = "one")]
    pub frames_per_token: usize,
    /// Feature width; `0` means token inputs.
    #[serde(default)]
    pub feature_dim: usize,
    /// Standard deviation of the per-frame Gaussian noise.
    #[serde(default)]
    pub feature_noise: f64,
}

fn one() -> usize {
    1
}

impl DataConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let fail = |clause: &str| Err(Error::Config(clause.to_string()));
        if vocab < 2 {
            return fail("vocab must be at least 2");
        }
        if !(0.0..=0.9).contains(&self.noise_rate) {
            return fail("noise_rate must lie in [0, 0.9]");
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return fail("length range must satisfy 1 <= min_len <= max_len");
        }
        if self.frames_per_token == 0 {
            return fail("frames_per_token must be positive");
        }
        if self.feature_dim == 0 && (self.frames_per_token != 1 || self.feature_noise != 0.0) {
            return fail("token inputs need frames_per_token = 1 and feature_noise = 0");
        }
        if !(self.feature_noise >= 0.0) {
            return fail("feature_noise must be non-negative");
        }
        Ok(())
    }

    pub fn uses_features(&self) -> bool {
        self.feature_dim > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Vec<usize>,
    pub input: InputSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Content tokens of `tokens` in order.
pub fn transcript(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != NOISE_TOKEN)
        .collect()
}

/// Draws one token sequence. A content token never repeats the token
/// right before it, so every transcript is CTC-alignable to its frames.
fn sample_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize, noise_rate: f64) -> Vec<usize> {
    loop {
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen::<f64>() < noise_rate {
                tokens.push(NOISE_TOKEN);
                continue;
            }
            let prev = tokens.last().copied().filter(|&t| t != NOISE_TOKEN);
            let tok = match prev {
                Some(p) => {
                    // uniform over the V-1 tokens other than `p`
                    let k = rng.gen_range(1..vocab);
                    if k >= p {
                        k + 1
                    } else {
                        k
                    }
                }
                None => rng.gen_range(1..=vocab),
            };
            tokens.push(tok);
        }
        if tokens.iter().any(|&t| t != NOISE_TOKEN) {
            return tokens;
        }
    }
}

/// Unit-norm code vector per token, fixed by the data seed.
fn codebook(seed: u64, vocab: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..=vocab)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn render(
    tokens: &[usize],
    code: &[Vec<f64>],
    cfg: &DataConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    let noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(tokens.len() * cfg.frames_per_token * cfg.feature_dim);
    for &t in tokens {
        for _ in 0..cfg.frames_per_token {
            for &c in &code[t] {
                let n = if cfg.feature_noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push(c + n);
            }
        }
    }
    Array::new(
        vec![tokens.len() * cfg.frames_per_token, cfg.feature_dim],
        data,
    )
}

pub fn generate_split(
    cfg: &DataConfig,
    vocab: usize,
    split: Split,
    count: usize,
) -> Result<Vec<Example>> {
    cfg.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream());
    let code = cfg
        .uses_features()
        .then(|| codebook(cfg.seed, vocab, cfg.feature_dim));
    (0..count)
        .map(|_| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let tokens = sample_tokens(&mut rng, len, vocab, cfg.noise_rate);
            let input = match &code {
                Some(code) => InputSeq::Features(render(&tokens, code, cfg, &mut rng)?),
                None => InputSeq::Tokens(tokens.clone()),
            };
            Ok(Example {
                target: transcript(&tokens),
                tokens,
                input,
            })
        })
        .collect()
}

/// Train, dev and test splits, each from its own random stream.
pub fn generate_dataset(cfg: &DataConfig, vocab: usize) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(cfg, vocab, Split::Train, cfg.train_size)?,
        dev: generate_split(cfg, vocab, Split::Dev, cfg.dev_size)?,
        test: generate_split(cfg, vocab, Split::Test, cfg.test_size)?,
    })
}
