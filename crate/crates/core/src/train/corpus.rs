//! Byte-level corpus ingestion and batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training windows kept by default; the router needs only a few thousand.
pub const DEFAULT_MAX_WINDOWS: usize = 5000;

/// One fixed-length training example. `targets[i]` is the byte after
/// `inputs[i]`; the final target of the final window is `None` (padding,
/// excluded from the loss) when the text ends there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusOptions {
    pub window: usize,
    /// Cap on training windows after shuffling; `None` keeps all.
    #[serde(default = "default_cap")]
    pub max_windows: Option<usize>,
    /// Share of the shuffled windows held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_cap() -> Option<usize> {
    Some(DEFAULT_MAX_WINDOWS)
}

fn default_eval_fraction() -> f64 {
    0.1
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            window: 64,
            max_windows: default_cap(),
            eval_fraction: default_eval_fraction(),
            seed: 0,
        }
    }
}

/// Disjoint train and eval windows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub window: usize,
    pub train: Vec<Window>,
    pub eval: Vec<Window>,
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Non-overlapping windows of `window` inputs; a trailing partial window is dropped.
pub fn windows(tokens: &[usize], window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    Ok(tokens
        .chunks_exact(window)
        .enumerate()
        .map(|(i, chunk)| {
            let start = i * window;
            Window {
                inputs: chunk.to_vec(),
                targets: (start + 1..start + window + 1).map(|j| tokens.get(j).copied()).collect(),
            }
        })
        .collect())
}

pub fn dataset_from_text(text: &str, opts: &CorpusOptions) -> Result<Dataset> {
    if text.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    if !(0.0..1.0).contains(&opts.eval_fraction) {
        return Err(Error::Config(format!(
            "eval_fraction must lie in [0, 1), got {}",
            opts.eval_fraction
        )));
    }
    let mut all = windows(&tokenize(text), opts.window)?;
    if all.is_empty() {
        return Err(Error::Data(format!(
            "corpus of {} bytes holds no full window of {}",
            text.len(),
            opts.window
        )));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_eval = ((all.len() as f64 * opts.eval_fraction).round() as usize).min(all.len() - 1);
    let eval = all.split_off(all.len() - n_eval);
    if let Some(cap) = opts.max_windows {
        all.truncate(cap);
    }
    Ok(Dataset {
        window: opts.window,
        train: all,
        eval,
    })
}

pub fn ingest_corpus(path: &Path, opts: &CorpusOptions) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Data(format!("{}: not UTF-8 ({e})", path.display())))?;
    dataset_from_text(&text, opts)
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the farmer", "a small bird", "the teacher", "our neighbor",
];
const VERBS: &[&str] = &["sees", "likes", "finds", "carries", "follows", "paints", "hears", "keeps"];
const OBJECTS: &[&str] = &[
    "the red ball", "a wooden box", "the river", "an apple", "the green door", "a long letter", "the moon",
    "a quiet song",
];
const PLACES: &[&str] = &[
    "in the garden", "near the house", "at the market", "by the sea", "under the tree", "on the hill",
];

/// Deterministic synthetic English-like text of about `n_bytes` bytes.
///
/// Sentences follow a small grammar, with a number-counting clause that gives
/// the model something position-dependent to learn.
pub fn synthetic_corpus(seed: u64, n_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
        let s = pick(&mut rng, SUBJECTS);
        let v = pick(&mut rng, VERBS);
        let o = pick(&mut rng, OBJECTS);
        match rng.random_range(0..3) {
            0 => out.push_str(&format!("{s} {v} {o}. ")),
            1 => {
                let p = pick(&mut rng, PLACES);
                out.push_str(&format!("{s} {v} {o} {p}. "));
            }
            _ => {
                let n = rng.random_range(1..7);
                let count: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
                out.push_str(&format!("{s} counts {}. ", count.join(" ")));
            }
        }
    }
    out
}

/// Endless seeded epochs over a window set.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("no training windows".into()));
        }
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    /// Indices of the next `size` windows, wrapping into a new epoch as needed.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_byte_window() {
        let w = windows(&tokenize("ab"), 2).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].inputs, vec![97, 98]);
        assert_eq!(w[0].targets, vec![Some(98), None]);
        let w = windows(&tokenize("abcde"), 2).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].targets, vec![Some(100), Some(101)]);
        assert!(windows(&tokenize("a"), 2).unwrap().is_empty());
    }

    #[test]
    fn split_is_disjoint_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text: String = (0..20_000).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        let opts = CorpusOptions {
            window: 16,
            max_windows: Some(100),
            eval_fraction: 0.2,
            seed: 3,
        };
        let d = dataset_from_text(&text, &opts).unwrap();
        assert_eq!(d.train.len(), 100);
        assert_eq!(d.eval.len(), (text.len() / 16) / 5);
        for e in &d.eval {
            assert!(!d.train.contains(e));
        }
        let again = dataset_from_text(&text, &opts).unwrap();
        assert_eq!(again.train, d.train);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4).unwrap();
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(dataset_from_text("", &CorpusOptions::default()).is_err());
    }
}
