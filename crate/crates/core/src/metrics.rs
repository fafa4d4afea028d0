//! Confusion matrices and intersection-over-union. Class 0 is occupied,
//! class 1 is open.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PolarMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: predicted {predicted:?}, label {label:?}")]
    Shape {
        predicted: (usize, usize),
        label: (usize, usize),
    },
    #[error("confusion matrix is empty")]
    Empty,
}

/// `counts[predicted][actual]` pixel totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub mean_iou: f64,
    /// `None` for classes absent from both prediction and label.
    pub per_class: [Option<f64>; 2],
}

impl ConfusionMatrix {
    pub fn accumulate(&mut self, predicted: &PolarMask, label: &PolarMask) -> Result<(), MetricsError> {
        if (predicted.rows(), predicted.cols()) != (label.rows(), label.cols()) {
            return Err(MetricsError::Shape {
                predicted: (predicted.rows(), predicted.cols()),
                label: (label.rows(), label.cols()),
            });
        }
        for (&p, &a) in predicted.data().iter().zip(label.data()) {
            self.counts[p as usize][a as usize] += 1;
        }
        Ok(())
    }

    pub fn from_masks(predicted: &PolarMask, label: &PolarMask) -> Result<Self, MetricsError> {
        let mut cm = Self::default();
        cm.accumulate(predicted, label)?;
        Ok(cm)
    }

    pub fn merge(&mut self, other: &Self) {
        for p in 0..2 {
            for a in 0..2 {
                self.counts[p][a] += other.counts[p][a];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `TP / (TP + FP + FN)`, `None` when the union is empty.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let other = 1 - class;
        let tp = self.counts[class][class];
        let union = tp + self.counts[class][other] + self.counts[other][class];
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn mean_iou(&self) -> Result<IouReport, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let per_class = [self.iou(0), self.iou(1)];
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(IouReport {
            mean_iou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

/// Global (accumulated) and per-frame-averaged mean IoU over a set of
/// frames.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    pub global: ConfusionMatrix,
    frame_sum: f64,
    frames: usize,
}

impl IouAccumulator {
    pub fn add(&mut self, predicted: &PolarMask, label: &PolarMask) -> Result<(), MetricsError> {
        let cm = ConfusionMatrix::from_masks(predicted, label)?;
        self.frame_sum += cm.mean_iou()?.mean_iou;
        self.frames += 1;
        self.global.merge(&cm);
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn global(&self) -> Result<IouReport, MetricsError> {
        self.global.mean_iou()
    }

    pub fn frame_averaged(&self) -> Result<f64, MetricsError> {
        if self.frames == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(self.frame_sum / self.frames as f64)
    }
}
