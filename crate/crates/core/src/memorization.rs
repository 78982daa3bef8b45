//! Prediction histories and memorized-sample bookkeeping.
//!
//! Each training sample keeps a ring buffer of its last `q` predicted labels.
//! A sample is *memorized* when the most frequent label in that window,
//! ties broken toward the smallest class index, equals its noisy label.
//! Partially filled windows use the entries they have; empty windows are
//! never memorized.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const DEFAULT_HISTORY_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionHistory {
    q: usize,
    classes: usize,
    /// `n * q` slots, one ring per sample.
    slots: Vec<u8>,
    /// Next write position per sample.
    head: Vec<u32>,
    fill: Vec<u32>,
}

impl PredictionHistory {
    pub fn new(samples: usize, q: usize, classes: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::Domain("history length q must be positive".into()));
        }
        if !(1..=256).contains(&classes) {
            return Err(Error::Domain(format!(
                "{classes} classes do not fit a u8 history"
            )));
        }
        Ok(Self {
            q,
            classes,
            slots: vec![0; samples * q],
            head: vec![0; samples],
            fill: vec![0; samples],
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> usize {
        self.fill.len()
    }

    /// Current window size of sample `i`.
    pub fn fill_count(&self, i: usize) -> usize {
        self.fill[i] as usize
    }

    /// Appends a prediction, evicting the oldest once `q` are stored.
    pub fn record(&mut self, sample: usize, label: usize) -> Result<()> {
        if sample >= self.samples() {
            return Err(Error::IndexOutOfRange {
                index: sample,
                len: self.samples(),
            });
        }
        if label >= self.classes {
            return Err(Error::Domain(format!(
                "predicted label {label} out of range for {} classes",
                self.classes
            )));
        }
        let h = self.head[sample] as usize;
        self.slots[sample * self.q + h] = label as u8;
        self.head[sample] = ((h + 1) % self.q) as u32;
        if (self.fill[sample] as usize) < self.q {
            self.fill[sample] += 1;
        }
        Ok(())
    }

    /// Window of sample `i`, oldest first.
    pub fn entries(&self, i: usize) -> Vec<usize> {
        let fill = self.fill[i] as usize;
        let ring = &self.slots[i * self.q..(i + 1) * self.q];
        let start = (self.head[i] as usize + self.q - fill) % self.q;
        (0..fill)
            .map(|o| ring[(start + o) % self.q] as usize)
            .collect()
    }

    /// Per-class counts over the window of sample `i`.
    pub fn counts(&self, i: usize) -> Vec<u32> {
        let mut counts = vec![0u32; self.classes];
        let fill = self.fill[i] as usize;
        let ring = &self.slots[i * self.q..(i + 1) * self.q];
        let start = (self.head[i] as usize + self.q - fill) % self.q;
        for o in 0..fill {
            counts[ring[(start + o) % self.q] as usize] += 1;
        }
        counts
    }

    /// Fraction of the window equal to `y`.
    pub fn label_probability(&self, i: usize, y: usize) -> Result<f64> {
        if i >= self.samples() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.samples(),
            });
        }
        let fill = self.fill_count(i);
        if fill == 0 {
            return Err(Error::EmptyHistory(i));
        }
        let c = self.counts(i).get(y).copied().unwrap_or(0);
        Ok(f64::from(c) / fill as f64)
    }

    /// Full distribution `P(y | x_i)` over classes, or `None` if empty.
    pub fn distribution(&self, i: usize) -> Option<Vec<f64>> {
        let fill = self.fill_count(i);
        if fill == 0 {
            return None;
        }
        Some(
            self.counts(i)
                .into_iter()
                .map(|c| f64::from(c) / fill as f64)
                .collect(),
        )
    }

    /// Most frequent label in the window, smallest index on ties.
    pub fn majority(&self, i: usize) -> Option<usize> {
        if self.fill[i] == 0 {
            return None;
        }
        let counts = self.counts(i);
        let mut best = 0;
        for (y, &c) in counts.iter().enumerate().skip(1) {
            if c > counts[best] {
                best = y;
            }
        }
        Some(best)
    }

    pub fn is_memorized(&self, i: usize, noisy_label: usize) -> bool {
        self.majority(i) == Some(noisy_label)
    }

    /// Memorization flag for every sample.
    pub fn memorization(&self, noisy_labels: &[usize]) -> MemorizationState {
        debug_assert_eq!(noisy_labels.len(), self.samples());
        MemorizationState {
            memorized: noisy_labels
                .iter()
                .enumerate()
                .map(|(i, &y)| self.is_memorized(i, y))
                .collect(),
        }
    }

    /// Sidecar format: magic `PSTH1`, `u32` sample count, `u32` q, then per
    /// sample a `u8` fill count followed by that many `u8` labels, oldest
    /// first. All integers little-endian.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(HISTORY_MAGIC)?;
        out.write_all(&(self.samples() as u32).to_le_bytes())?;
        out.write_all(&(self.q as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.samples() * (self.q + 1));
        for i in 0..self.samples() {
            let e = self.entries(i);
            buf.push(e.len() as u8);
            buf.extend(e.into_iter().map(|y| y as u8));
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R, classes: usize) -> Result<Self> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != HISTORY_MAGIC {
            return Err(Error::Format("history magic mismatch".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let q = u32::from_le_bytes(word) as usize;
        let mut h = Self::new(n, q, classes)?;
        let mut byte = [0u8; 1];
        for i in 0..n {
            input.read_exact(&mut byte)?;
            let len = byte[0] as usize;
            if len > q {
                return Err(Error::Format(format!(
                    "sample {i} has {len} entries, q is {q}"
                )));
            }
            let mut labels = vec![0u8; len];
            input.read_exact(&mut labels)?;
            for y in labels {
                h.record(i, y as usize)?;
            }
        }
        Ok(h)
    }
}

const HISTORY_MAGIC: &[u8; 5] = b"PSTH1";

/// Membership of each training sample in the memorized set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemorizationState {
    pub memorized: Vec<bool>,
}

impl MemorizationState {
    pub fn count(&self) -> usize {
        self.memorized.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.memorized
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Memorization precision and recall with the raw counts behind them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemorizationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub memorized_true: usize,
    pub memorized_false: usize,
    pub true_labeled: usize,
}

/// MP and MR of a memorized set against ground truth.
///
/// An empty memorized set has precision 1.0; a dataset without any
/// true-labeled sample has recall 1.0.
pub fn mp_mr(
    state: &MemorizationState,
    noisy_labels: &[usize],
    true_labels: &[usize],
) -> MemorizationMetrics {
    let mut memorized_true = 0;
    let mut memorized_false = 0;
    let mut true_labeled = 0;
    for ((&m, &noisy), &truth) in state.memorized.iter().zip(noisy_labels).zip(true_labels) {
        let clean = noisy == truth;
        true_labeled += usize::from(clean);
        if m {
            if clean {
                memorized_true += 1;
            } else {
                memorized_false += 1;
            }
        }
    }
    let memorized = memorized_true + memorized_false;
    MemorizationMetrics {
        precision: if memorized == 0 {
            1.0
        } else {
            memorized_true as f64 / memorized as f64
        },
        recall: if true_labeled == 0 {
            1.0
        } else {
            memorized_true as f64 / true_labeled as f64
        },
        memorized_true,
        memorized_false,
        true_labeled,
    }
}
