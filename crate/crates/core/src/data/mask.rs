//! Binary reconstruction masks (1 = hidden from the model, scored by the
//! reconstruction loss).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BlendError, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Whole time bins masked across all neurons.
    #[default]
    Timestep,
    /// Individual (time, neuron) entries.
    Element,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Timestep => "timestep",
            MaskMode::Element => "element",
        })
    }
}

impl FromStr for MaskMode {
    type Err = BlendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timestep" => Ok(MaskMode::Timestep),
            "element" => Ok(MaskMode::Element),
            other => Err(BlendError::InvalidArgument(format!(
                "unknown mask mode `{other}`; valid: timestep, element"
            ))),
        }
    }
}

/// Mask over one trial, stored time-major (`T × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub timepoints: usize,
    pub neurons: usize,
    pub ratio: f64,
    pub mode: MaskMode,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(timepoints: usize, neurons: usize) -> Self {
        Mask {
            timepoints,
            neurons,
            ratio: 0.0,
            mode: MaskMode::Element,
            bits: vec![false; timepoints * neurons],
        }
    }

    pub fn full(timepoints: usize, neurons: usize) -> Self {
        Mask {
            timepoints,
            neurons,
            ratio: 1.0,
            mode: MaskMode::Element,
            bits: vec![true; timepoints * neurons],
        }
    }

    pub fn is_masked(&self, t: usize, n: usize) -> bool {
        self.bits[t * self.neurons + n]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of masked entries, `|m|`.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Additionally mask every bin of the listed neuron channels.
    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        for t in 0..self.timepoints {
            for &c in channels {
                self.bits[t * self.neurons + c] = true;
            }
        }
        self
    }

    /// The mask as a 0/1 tensor (`T × N`).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(
            self.timepoints,
            self.neurons,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Complement as a 0/1 tensor: 1 where the input stays visible.
    pub fn keep_tensor(&self) -> Arc<Tensor> {
        Arc::new(Tensor::from_rows(
            self.timepoints,
            self.neurons,
            self.bits.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
        ))
    }
}

/// Draw a mask. Timestep mode masks exactly `⌊ratio·T⌋` whole bins, element
/// mode exactly `⌊ratio·N·T⌋` entries, uniformly without replacement.
pub fn make_mask(
    neurons: usize,
    timepoints: usize,
    ratio: f64,
    mode: MaskMode,
    rng: &mut SeededRng,
) -> Result<Mask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(BlendError::InvalidArgument(format!(
            "mask ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut bits = vec![false; timepoints * neurons];
    match mode {
        MaskMode::Timestep => {
            let k = (ratio * timepoints as f64).floor() as usize;
            for t in rng.choose_distinct(timepoints, k) {
                bits[t * neurons..(t + 1) * neurons].fill(true);
            }
        }
        MaskMode::Element => {
            let k = (ratio * (timepoints * neurons) as f64).floor() as usize;
            for i in rng.choose_distinct(timepoints * neurons, k) {
                bits[i] = true;
            }
        }
    }
    Ok(Mask {
        timepoints,
        neurons,
        ratio,
        mode,
        bits,
    })
}

/// Zero the masked entries of a `T × N` trial.
pub fn apply_mask(spikes: &Tensor, mask: &Mask) -> Result<Tensor> {
    if spikes.rows() != mask.timepoints || spikes.cols() != mask.neurons {
        return Err(BlendError::Shape(format!(
            "spikes {:?} vs mask {}x{}",
            spikes.shape(),
            mask.timepoints,
            mask.neurons
        )));
    }
    let mut out = spikes.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask.bits) {
        if m {
            *v = 0.0;
        }
    }
    Ok(out)
}
