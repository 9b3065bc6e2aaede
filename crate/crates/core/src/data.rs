//! Byte corpus loading, the 90/5/5 split, stream batching and the
//! variable-length window sampler.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest window the sampler emits.
pub const MIN_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
    pub source: Option<PathBuf>,
    pub total_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl CorpusSplits {
    /// Valid and test each get `⌊N/20⌋` bytes; train keeps the remainder.
    /// Rejects corpora shorter than `10·batch`.
    pub fn from_bytes(bytes: Vec<u8>, batch: usize) -> Result<Self> {
        let n = bytes.len();
        if n == 0 {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        if n < 10 * batch.max(1) {
            return Err(Error::Corpus(format!("corpus of {n} bytes is shorter than 10 x batch size {batch}")));
        }
        let held = n / 20;
        let train_len = n - 2 * held;
        let test = bytes[train_len + held..].to_vec();
        let valid = bytes[train_len..train_len + held].to_vec();
        let mut train = bytes;
        train.truncate(train_len);
        Ok(CorpusSplits { train, valid, test, source: None, total_len: n })
    }

    pub fn get(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Reads `path` verbatim and splits it.
pub fn load_corpus(path: &Path, batch: usize) -> Result<CorpusSplits> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut s = CorpusSplits::from_bytes(bytes, batch)?;
    s.source = Some(path.to_path_buf());
    Ok(s)
}

/// A byte stream cut into `batch` equal contiguous tracks, stored row-major
/// as `[rows, batch]`: column `c` continues track `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batched {
    pub rows: usize,
    pub batch: usize,
    pub data: Vec<u8>,
}

impl Batched {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.batch + col]
    }

    /// Rows `[start, end)` flattened time-major, as token ids.
    pub fn rows_as_ids(&self, start: usize, end: usize) -> Vec<usize> {
        self.data[start * self.batch..end * self.batch].iter().map(|&b| b as usize).collect()
    }
}

pub fn batchify(split: &[u8], batch: usize) -> Result<Batched> {
    if batch == 0 || batch > split.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} invalid for a stream of {} bytes",
            split.len()
        )));
    }
    let rows = split.len() / batch;
    let mut data = vec![0u8; rows * batch];
    for c in 0..batch {
        for r in 0..rows {
            data[r * batch + c] = split[c * rows + r];
        }
    }
    Ok(Batched { rows, batch, data })
}

/// Window-length law for training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch: usize,
    /// Center `L_c` of the length distribution.
    pub center: usize,
    pub sigma: f64,
    /// Chance of using `L_c/2` as the center for one window.
    pub halve_prob: f64,
}

impl BatchPlan {
    pub fn new(batch: usize, center: usize) -> Self {
        BatchPlan { batch, center, sigma: 5.0, halve_prob: 0.05 }
    }

    /// `max(5, round(Normal(c, σ)))` where `c` is `L_c`, or `L_c/2` with
    /// probability `halve_prob`.
    pub fn draw_len<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let center = if rng.random::<f64>() < self.halve_prob { self.center as f64 / 2.0 } else { self.center as f64 };
        let l = Normal::new(center, self.sigma).expect("sigma is finite and positive").sample(rng).round();
        if l < MIN_WINDOW as f64 {
            MIN_WINDOW
        } else {
            l as usize
        }
    }

    /// Mean window length implied by the law, ignoring the clamp.
    pub fn expected_len(&self) -> f64 {
        let c = self.center as f64;
        (1.0 - self.halve_prob) * c + self.halve_prob * c / 2.0
    }
}

/// A `[len, batch]` slice of the tracks with next-byte targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

fn window_at(data: &Batched, start: usize, len: usize) -> Window {
    Window { start, len, inputs: data.rows_as_ids(start, start + len), targets: data.rows_as_ids(start + 1, start + len + 1) }
}

/// Next training window from `cursor`, truncated to the remaining rows;
/// `None` when fewer than 5 rows with targets remain (end of epoch).
pub fn next_window<R: Rng + ?Sized>(data: &Batched, plan: &BatchPlan, cursor: usize, rng: &mut R) -> Option<Window> {
    let avail = data.rows.saturating_sub(1).saturating_sub(cursor);
    if avail < MIN_WINDOW {
        return None;
    }
    let len = plan.draw_len(rng).min(avail);
    Some(window_at(data, cursor, len))
}

/// Fixed-length evaluation windows covering every row with a target; the
/// last one may be shorter.
pub fn eval_windows(data: &Batched, len: usize) -> impl Iterator<Item = Window> + '_ {
    let avail = data.rows.saturating_sub(1);
    let len = len.max(1);
    (0..avail).step_by(len).map(move |s| window_at(data, s, len.min(avail - s)))
}

/// Deterministic English-like markup text: Zipf-distributed pseudo-words in
/// sentences and paragraphs wrapped in a few XML-ish tags. Useful as a
/// stand-in corpus with realistic byte statistics.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const ONSETS: [&str; 20] =
        ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch", "th", "pl"];
    const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "io"];
    const CODAS: [&str; 10] = ["", "", "n", "r", "s", "t", "l", "nd", "st", "ng"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..3000)
        .map(|_| {
            let syll = 1 + (rng.random::<f64>() * rng.random::<f64>() * 4.0) as usize;
            (0..syll)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        VOWELS[rng.random_range(0..VOWELS.len())],
                        CODAS[rng.random_range(0..CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    // Zipf(1) cumulative weights
    let cdf: Vec<f64> = lexicon
        .iter()
        .enumerate()
        .scan(0.0, |acc, (i, _)| {
            *acc += 1.0 / (i as f64 + 1.0);
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().unwrap();
    let n_words = lexicon.len();
    let pick = |rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * total;
        cdf.partition_point(|&c| c < u).min(n_words - 1)
    };
    let mut out = String::with_capacity(n_bytes + 256);
    let mut page = 0usize;
    while out.len() < n_bytes {
        page += 1;
        let title: Vec<&str> = (0..rng.random_range(1..4)).map(|_| lexicon[pick(&mut rng)].as_str()).collect();
        out.push_str(&format!("<page>\n  <title>{}</title>\n  <id>{page}</id>\n  <text>", title.join(" ")));
        for _ in 0..rng.random_range(2..6) {
            for _ in 0..rng.random_range(2..7) {
                let n = rng.random_range(4..16);
                for k in 0..n {
                    let w = &lexicon[pick(&mut rng)];
                    if k == 0 {
                        let mut ch = w.chars();
                        let first = ch.next().unwrap().to_ascii_uppercase();
                        out.push(first);
                        out.push_str(ch.as_str());
                    } else if rng.random::<f64>() < 0.06 {
                        out.push_str(&format!("[[{w}]]"));
                    } else {
                        out.push_str(w);
                    }
                    if k + 1 < n {
                        out.push(if rng.random::<f64>() < 0.08 { ',' } else { ' ' });
                        if out.ends_with(',') {
                            out.push(' ');
                        }
                    }
                }
                out.push_str(". ");
            }
            out.push_str("\n\n");
        }
        out.push_str("</text>\n</page>\n");
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}
