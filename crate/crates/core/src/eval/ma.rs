use serde::{Deserialize, Serialize};

use crate::data::{ShapeClass, WeightClass};
use crate::error::{Error, Result};
use crate::model::{SHAPE_CLASSES, WEIGHT_CLASSES};

/// Class probabilities of both heads for one window or frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowProbs {
    pub shape: [f64; SHAPE_CLASSES],
    pub weight: [f64; WEIGHT_CLASSES],
}

impl WindowProbs {
    /// Probability 1 on the given classes.
    pub fn one_hot(shape: ShapeClass, weight: WeightClass) -> Self {
        let mut p = Self {
            shape: [0.0; SHAPE_CLASSES],
            weight: [0.0; WEIGHT_CLASSES],
        };
        p.shape[shape.index()] = 1.0;
        p.weight[weight.index()] = 1.0;
        p
    }
}

/// Running moving average of window probabilities for one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MAState {
    shape_sum: [f64; SHAPE_CLASSES],
    weight_sum: [f64; WEIGHT_CLASSES],
    count: usize,
    /// MA after each window, in arrival order.
    pub trace: Vec<WindowProbs>,
}

impl MAState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, probs: &WindowProbs) {
        for (s, p) in self.shape_sum.iter_mut().zip(probs.shape) {
            *s += p;
        }
        for (s, p) in self.weight_sum.iter_mut().zip(probs.weight) {
            *s += p;
        }
        self.count += 1;
        let ma = self.current().expect("count is positive");
        self.trace.push(ma);
    }

    /// Mean of every window seen so far; `None` before the first window.
    pub fn current(&self) -> Option<WindowProbs> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(WindowProbs {
            shape: self.shape_sum.map(|s| s / n),
            weight: self.weight_sum.map(|s| s / n),
        })
    }
}

pub fn update_ma(mut state: MAState, probs: &WindowProbs) -> MAState {
    state.update(probs);
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub shape: ShapeClass,
    pub weight: WeightClass,
    /// Another class shared the maximum and the lowest index was taken.
    pub shape_tie: bool,
    pub weight_tie: bool,
}

/// Index of the largest value, lowest index on ties, and whether a tie
/// occurred.
pub fn argmax_with_tie(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tie = false;
        } else if v == values[best] {
            tie = true;
        }
    }
    (best, tie)
}

pub fn decide(state: &MAState) -> Result<Decision> {
    let ma = state
        .current()
        .ok_or_else(|| Error::Usage("decide called before any window was aggregated".into()))?;
    let (s, shape_tie) = argmax_with_tie(&ma.shape);
    let (w, weight_tie) = argmax_with_tie(&ma.weight);
    Ok(Decision {
        shape: ShapeClass::from_index(s).expect("index within class count"),
        weight: WeightClass::from_index(w).expect("index within class count"),
        shape_tie,
        weight_tie,
    })
}
