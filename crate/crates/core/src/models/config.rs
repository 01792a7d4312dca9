use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BlendError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Recurrent,
}

impl FromStr for Arch {
    type Err = BlendError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Arch::Transformer),
            "recurrent" => Ok(Arch::Recurrent),
            _ => Err(BlendError::InvalidArgument(format!(
                "unknown arch '{s}' (expected one of: transformer, recurrent)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Transformer => "transformer",
            Arch::Recurrent => "recurrent",
        })
    }
}

/// Teachers see behavior next to the masked spikes; students see spikes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

/// Observation model of the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// One log-rate per neuron and bin.
    #[default]
    Poisson,
    /// Categorical over counts `0..=max_count`.
    Ce,
}

impl FromStr for RecLoss {
    type Err = BlendError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(RecLoss::Poisson),
            "ce" => Ok(RecLoss::Ce),
            _ => Err(BlendError::InvalidArgument(format!(
                "unknown reconstruction loss '{s}' (expected one of: poisson, ce)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub role: Role,
    /// Transformer blocks. The recurrent model always records two hidden
    /// states (generator and factors) and ignores this field.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Factor width, recurrent only.
    pub factors: usize,
    pub dropout: f64,
    pub neurons: usize,
    /// Behavior width; nonzero exactly for teachers.
    pub behavior_dims: usize,
    pub max_t: usize,
    #[serde(default)]
    pub rec_loss: RecLoss,
    #[serde(default = "default_max_count")]
    pub max_count: usize,
}

fn default_max_count() -> usize {
    5
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::transformer(182, 0, 140)
    }
}

impl EncoderConfig {
    pub fn transformer(neurons: usize, behavior_dims: usize, max_t: usize) -> Self {
        EncoderConfig {
            arch: Arch::Transformer,
            role: role_for(behavior_dims),
            layers: 4,
            hidden: 128,
            heads: 2,
            factors: 0,
            dropout: 0.2,
            neurons,
            behavior_dims,
            max_t,
            rec_loss: RecLoss::Poisson,
            max_count: default_max_count(),
        }
    }

    pub fn recurrent(neurons: usize, behavior_dims: usize, max_t: usize) -> Self {
        EncoderConfig {
            arch: Arch::Recurrent,
            role: role_for(behavior_dims),
            layers: 1,
            hidden: 64,
            heads: 1,
            factors: 32,
            dropout: 0.05,
            neurons,
            behavior_dims,
            max_t,
            rec_loss: RecLoss::Poisson,
            max_count: default_max_count(),
        }
    }

    pub fn for_arch(arch: Arch, neurons: usize, behavior_dims: usize, max_t: usize) -> Self {
        match arch {
            Arch::Transformer => Self::transformer(neurons, behavior_dims, max_t),
            Arch::Recurrent => Self::recurrent(neurons, behavior_dims, max_t),
        }
    }

    /// Same architecture in the other role.
    pub fn with_role(&self, role: Role, behavior_dims: usize) -> Self {
        let mut c = self.clone();
        c.role = role;
        c.behavior_dims = if role == Role::Teacher { behavior_dims } else { 0 };
        c
    }

    pub fn input_width(&self) -> usize {
        self.neurons + self.behavior_dims
    }

    /// Number of hidden-state records a forward pass produces.
    pub fn hidden_records(&self) -> usize {
        match self.arch {
            Arch::Transformer => self.layers,
            Arch::Recurrent => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BlendError::InvalidArgument(m));
        if self.neurons == 0 || self.max_t == 0 || self.hidden == 0 {
            return bad("neurons, max_t and hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match (self.role, self.behavior_dims) {
            (Role::Teacher, 0) => return bad("a teacher needs behavior_dims >= 1".into()),
            (Role::Student, b) if b > 0 => {
                return bad(format!("a student takes no behavior input, got behavior_dims={b}"))
            }
            _ => {}
        }
        match self.arch {
            Arch::Transformer => {
                if self.layers == 0 || self.heads == 0 {
                    return bad("layers and heads must be >= 1".into());
                }
                if !self.hidden.is_multiple_of(self.heads) {
                    return bad(format!(
                        "hidden size {} is not divisible by {} heads",
                        self.hidden, self.heads
                    ));
                }
            }
            Arch::Recurrent => {
                if self.factors == 0 {
                    return bad("factors must be >= 1".into());
                }
            }
        }
        if self.rec_loss == RecLoss::Ce && self.max_count == 0 {
            return bad("max_count must be >= 1 for the categorical head".into());
        }
        Ok(())
    }

    /// Width of the readout: one log-rate per neuron, or one logit per
    /// count class per neuron.
    pub fn readout_width(&self) -> usize {
        match self.rec_loss {
            RecLoss::Poisson => self.neurons,
            RecLoss::Ce => self.neurons * (self.max_count + 1),
        }
    }
}

fn role_for(behavior_dims: usize) -> Role {
    if behavior_dims > 0 {
        Role::Teacher
    } else {
        Role::Student
    }
}
