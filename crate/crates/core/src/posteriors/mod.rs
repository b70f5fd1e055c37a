//! Frame-level CTC posterior matrices: the boundary between the (external)
//! ASR model and everything downstream.

mod dataset;
pub mod grammar;
mod io;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::ops::logsumexp;
use crate::{Error, Result};

pub use dataset::{load_dataset, ClassCounts, Dataset, Manifest, Partitions};
pub use io::{read_posteriors, write_posteriors, MAGIC};
pub use synth::{synthesize_posteriors, ConfusionSource, FrameSpec, SynthConfig};

/// Row-normalization tolerance in probability space.
pub const ROW_TOLERANCE: f64 = 1e-6;

/// `F×(T+1)` log-posteriors; the CTC blank is the last class.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    frames: usize,
    classes: usize,
    values: Vec<f64>,
}

impl PosteriorMatrix {
    /// Validates shape and row-stochasticity. Entries may be `-inf`.
    pub fn new(frames: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("posterior matrix needs at least one frame"));
        }
        if classes < 2 {
            return Err(Error::invalid("posterior matrix needs at least one token plus blank"));
        }
        if values.len() != frames * classes {
            return Err(Error::invalid(format!(
                "{frames}x{classes} posterior matrix cannot hold {} values",
                values.len()
            )));
        }
        let m = Self {
            frames,
            classes,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for f in 0..self.frames {
            let row = self.row(f);
            if let Some(v) = row.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
                return Err(Error::NonFinite(format!("frame {f} holds {v}")));
            }
            if let Some(v) = row.iter().find(|&&v| v > ROW_TOLERANCE) {
                return Err(Error::data(format!("frame {f} has positive log-probability {v}")));
            }
            let total = logsumexp(row).exp();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::data(format!("frame {f} sums to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `T + 1`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Subword vocabulary size `T`.
    pub fn vocab_size(&self) -> usize {
        self.classes - 1
    }

    pub fn blank_index(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.classes..(frame + 1) * self.classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Frames reordered by `order`, a permutation of `0..F`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let values = order.iter().flat_map(|&f| self.row(f).iter().copied()).collect();
        Self {
            frames: self.frames,
            classes: self.classes,
            values,
        }
    }

    /// Mean Shannon entropy (nats) of the frame distributions.
    pub fn mean_row_entropy(&self) -> f64 {
        let total: f64 = (0..self.frames)
            .map(|f| {
                self.row(f)
                    .iter()
                    .filter(|v| v.is_finite())
                    .map(|&l| -l.exp() * l)
                    .sum::<f64>()
            })
            .sum();
        total / self.frames as f64
    }

    /// Greedy per-frame argmax (lowest id on ties).
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|f| {
                let row = self.row(f);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Unintended,
    Intended,
}

impl Label {
    /// Classifier target index: unintended 0, intended 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Unintended => 0,
            Label::Intended => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unintended => "unintended",
            Label::Intended => "intended",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intended" => Ok(Label::Intended),
            "unintended" => Ok(Label::Unintended),
            other => Err(Error::data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub label: Label,
    pub posteriors: PosteriorMatrix,
    pub reference: Option<Vec<u32>>,
}
