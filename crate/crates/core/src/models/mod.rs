//! Sequence encoders mapping masked spike counts (optionally fused with
//! behavior) to per-neuron log firing rates.
//!
//! All tensors are time-major: a trial is `T × N`, and a batch of `b`
//! trials is stacked trial-major into `(b·T) × N`. Hidden records use the
//! same layout with the hidden width as columns.

pub mod checkpoint;
pub mod config;
pub mod discrete;
pub mod params;
mod recurrent;
mod transformer;

use std::sync::Arc;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointHeader};
pub use config::{Arch, EncoderConfig, RecLoss, Role};
pub use discrete::DiscreteBehaviorEmbedding;
pub use params::ParamStore;

use crate::error::{BlendError, Result};
use crate::exec::Execution;
use crate::numerics::{SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

/// Values of one forward pass over a single trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// `T × N` log firing rates.
    pub log_rates: Tensor,
    /// One `T × width` record per hidden layer.
    pub hidden: Vec<Tensor>,
}

/// Handles to the outputs of a batched forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `(b·T) × N`.
    pub log_rates: Var,
    /// `(b·T·N) × (C+1)` count-class log-probabilities, categorical head only.
    pub count_log_probs: Option<Var>,
    pub hidden: Vec<Var>,
    pub trials: usize,
    pub timepoints: usize,
}

pub(crate) struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut SeededRng>,
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, v: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return v;
        };
        if self.rate == 0.0 {
            return v;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let shape = tape.value(v).shape().to_vec();
        let n = tape.value(v).len();
        let bits = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(shape, bits).expect("same element count");
        tape.mul_const(v, Arc::new(mask))
    }
}

pub fn build_model(cfg: &EncoderConfig, rng: &SeededRng) -> Result<EncoderModel> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    match cfg.arch {
        Arch::Transformer => transformer::declare(cfg, &mut params, rng)?,
        Arch::Recurrent => recurrent::declare(cfg, &mut params, rng)?,
    }
    Ok(EncoderModel {
        config: cfg.clone(),
        params,
    })
}

impl EncoderModel {
    pub fn role(&self) -> Role {
        self.config.role
    }

    /// Column widths of the hidden records.
    pub fn hidden_widths(&self) -> Vec<usize> {
        match self.config.arch {
            Arch::Transformer => vec![self.config.hidden; self.config.layers],
            Arch::Recurrent => vec![self.config.hidden, self.config.factors],
        }
    }

    fn check_inputs(&self, masked: &[Tensor], behavior: Option<&[Tensor]>) -> Result<usize> {
        let cfg = &self.config;
        match (cfg.role, behavior) {
            (Role::Teacher, None) => {
                return Err(BlendError::compat(
                    "role",
                    "teacher forward needs behavior input",
                ))
            }
            (Role::Student, Some(_)) => {
                return Err(BlendError::compat(
                    "role",
                    "student forward takes spikes only",
                ))
            }
            _ => {}
        }
        let first = masked
            .first()
            .ok_or_else(|| BlendError::InvalidArgument("empty batch".into()))?;
        let t = first.rows();
        if t > cfg.max_t {
            return Err(BlendError::compat(
                "max_t",
                format!("trial has {t} bins, model supports at most {}", cfg.max_t),
            ));
        }
        for (i, x) in masked.iter().enumerate() {
            if x.rows() != t || x.cols() != cfg.neurons {
                return Err(BlendError::compat(
                    "neurons",
                    format!(
                        "trial {i} is {}×{}, expected {t}×{}",
                        x.rows(),
                        x.cols(),
                        cfg.neurons
                    ),
                ));
            }
        }
        if let Some(b) = behavior {
            if b.len() != masked.len() {
                return Err(BlendError::Shape("one behavior tensor per trial".into()));
            }
            for x in b {
                if x.rows() != t || x.cols() != cfg.behavior_dims {
                    return Err(BlendError::compat(
                        "behavior_dims",
                        format!(
                            "behavior is {}×{}, expected {t}×{}",
                            x.rows(),
                            x.cols(),
                            cfg.behavior_dims
                        ),
                    ));
                }
            }
        }
        Ok(t)
    }

    /// Records a batched forward pass. `dropout` enables train mode.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        masked: &[Tensor],
        behavior: Option<&[Tensor]>,
        dropout: Option<&mut SeededRng>,
    ) -> Result<TapeForward> {
        let t = self.check_inputs(masked, behavior)?;
        let cfg = &self.config;
        let b = masked.len();
        let width = cfg.input_width();
        let mut data = Vec::with_capacity(b * t * width);
        for (i, x) in masked.iter().enumerate() {
            for r in 0..t {
                data.extend_from_slice(x.row(r));
                if let Some(beh) = behavior {
                    data.extend_from_slice(beh[i].row(r));
                }
            }
        }
        let x = Tensor::from_rows(b * t, width, data);
        let mut drop = Dropout {
            rate: cfg.dropout,
            rng: dropout,
        };
        let (out, hidden) = match cfg.arch {
            Arch::Transformer => {
                let x = tape.constant(x);
                transformer::forward(cfg, &self.params, vars, tape, x, b, t, &mut drop)
            }
            Arch::Recurrent => recurrent::forward(cfg, &self.params, vars, tape, &x, b, t, &mut drop),
        };
        let (log_rates, count_log_probs) = match cfg.rec_loss {
            RecLoss::Poisson => (out, None),
            RecLoss::Ce => {
                let classes = cfg.max_count + 1;
                let logits = tape.reshape(out, b * t * cfg.neurons, classes);
                let lp = tape.log_softmax_rows(logits);
                let p = tape.exp(lp);
                let counts = tape.constant(Tensor::from_rows(
                    classes,
                    1,
                    (0..classes).map(|c| c as f64).collect(),
                ));
                let mean = tape.matmul(p, counts);
                let floor = tape.constant(Tensor::full(&[b * t * cfg.neurons, 1], 1e-9));
                let mean = tape.add(mean, floor);
                let lr = tape.ln(mean);
                (tape.reshape(lr, b * t, cfg.neurons), Some(lp))
            }
        };
        Ok(TapeForward {
            log_rates,
            count_log_probs,
            hidden,
            trials: b,
            timepoints: t,
        })
    }

    /// Single-trial forward. Dropout is active only when `train_rng` is given.
    pub fn forward(
        &self,
        masked: &Tensor,
        behavior: Option<&Tensor>,
        train_rng: Option<&mut SeededRng>,
    ) -> Result<ForwardResult> {
        let mut tape = Tape::inference();
        let vars = self.params.on_tape(&mut tape);
        let beh = behavior.map(|b| vec![b.clone()]);
        let f = self.forward_tape(
            &mut tape,
            &vars,
            std::slice::from_ref(masked),
            beh.as_deref(),
            train_rng,
        )?;
        Ok(ForwardResult {
            log_rates: tape.value(f.log_rates).clone(),
            hidden: f.hidden.iter().map(|h| tape.value(*h).clone()).collect(),
        })
    }

    /// Inference log-rates for many trials, computed in fixed chunks so the
    /// result does not depend on the execution mode.
    pub fn predict_log_rates(
        &self,
        masked: &[Tensor],
        behavior: Option<&[Tensor]>,
        exec: Execution,
    ) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 16;
        let chunks = masked.len().div_ceil(CHUNK);
        let parts = exec.map_indexed(chunks, |c| -> Result<Vec<Tensor>> {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(masked.len());
            let mut tape = Tape::inference();
            let vars = self.params.on_tape(&mut tape);
            let f = self.forward_tape(
                &mut tape,
                &vars,
                &masked[lo..hi],
                behavior.map(|b| &b[lo..hi]),
                None,
            )?;
            let all = tape.value(f.log_rates);
            let (t, n) = (f.timepoints, all.cols());
            Ok((0..hi - lo)
                .map(|i| Tensor::from_rows(t, n, all.data()[i * t * n..(i + 1) * t * n].to_vec()))
                .collect())
        });
        let mut out = Vec::with_capacity(masked.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Arch, behavior_dims: usize) -> EncoderConfig {
        let mut c = EncoderConfig::for_arch(arch, 6, behavior_dims, 12);
        c.layers = 2;
        c.hidden = 8;
        c.factors = 4;
        c
    }

    fn spikes(rng: &mut SeededRng, t: usize, n: usize) -> Tensor {
        Tensor::from_rows(t, n, (0..t * n).map(|_| rng.below(3) as f64).collect())
    }

    fn transformer_param_count(n: usize, b: usize, d: usize, l: usize, t: usize) -> usize {
        let embed = (n + b) * d + d + t * d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        embed + l * block + 2 * d + d * n + n
    }

    #[test]
    fn transformer_parameter_count_matches_formula() {
        let cfg = EncoderConfig::transformer(182, 0, 140);
        let m = build_model(&cfg, &SeededRng::new(0)).unwrap();
        assert_eq!(m.params.count(), transformer_param_count(182, 0, 128, 4, 140));
        let teacher = build_model(&cfg.with_role(Role::Teacher, 2), &SeededRng::new(0)).unwrap();
        assert_eq!(teacher.params.get("embed.w").unwrap().shape(), &[184, 128]);
    }

    #[test]
    fn recurrent_parameter_count_matches_formula() {
        let (n, b, d, f) = (182, 2, 64, 32);
        let cfg = EncoderConfig::recurrent(n, b, 140);
        let m = build_model(&cfg, &SeededRng::new(0)).unwrap();
        let gru_in = (n + b) * 3 * d + 3 * d + d * 3 * d + 3 * d;
        let expected = 2 * gru_in + (2 * d * d + d) + (3 * d + d * 3 * d + 3 * d) + d * f + f * n + n;
        assert_eq!(m.params.count(), expected);
    }

    #[test]
    fn same_seed_same_init() {
        for arch in [Arch::Transformer, Arch::Recurrent] {
            let a = build_model(&small(arch, 0), &SeededRng::new(3)).unwrap();
            let b = build_model(&small(arch, 0), &SeededRng::new(3)).unwrap();
            let c = build_model(&small(arch, 0), &SeededRng::new(4)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.params.fingerprint(), c.params.fingerprint());
        }
    }

    #[test]
    fn output_shape_and_hidden_records() {
        let mut rng = SeededRng::new(1);
        for arch in [Arch::Transformer, Arch::Recurrent] {
            let m = build_model(&small(arch, 2), &SeededRng::new(0)).unwrap();
            let x = spikes(&mut rng, 10, 6);
            let beh = Tensor::zeros(&[10, 2]);
            let f = m.forward(&x, Some(&beh), None).unwrap();
            assert_eq!(f.log_rates.shape(), &[10, 6]);
            assert_eq!(f.hidden.len(), m.config.hidden_records());
            for (h, w) in f.hidden.iter().zip(m.hidden_widths()) {
                assert_eq!(h.shape(), &[10, w]);
            }
        }
    }

    #[test]
    fn role_mismatch_and_long_trials_rejected() {
        let mut rng = SeededRng::new(1);
        let m = build_model(&small(Arch::Transformer, 0), &SeededRng::new(0)).unwrap();
        let x = spikes(&mut rng, 10, 6);
        let beh = Tensor::zeros(&[10, 2]);
        assert!(matches!(
            m.forward(&x, Some(&beh), None),
            Err(BlendError::Compatibility { .. })
        ));
        let long = spikes(&mut rng, 13, 6);
        assert!(m.forward(&long, None, None).is_err());
    }

    #[test]
    fn batch_trials_are_independent() {
        let mut rng = SeededRng::new(7);
        for arch in [Arch::Transformer, Arch::Recurrent] {
            let m = build_model(&small(arch, 0), &SeededRng::new(0)).unwrap();
            let xs: Vec<Tensor> = (0..3).map(|_| spikes(&mut rng, 12, 6)).collect();
            let fwd = m.predict_log_rates(&xs, None, Execution::Sequential).unwrap();
            let rev: Vec<Tensor> = xs.iter().rev().cloned().collect();
            let bwd = m.predict_log_rates(&rev, None, Execution::Sequential).unwrap();
            for i in 0..3 {
                let single = m.forward(&xs[i], None, None).unwrap().log_rates;
                assert!(fwd[i].zip_map(&single, |a, b| a - b).max_abs() < 1e-12);
                assert!(fwd[i].zip_map(&bwd[2 - i], |a, b| a - b).max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = SeededRng::new(2);
        let m = build_model(&small(Arch::Transformer, 0), &SeededRng::new(0)).unwrap();
        let x = spikes(&mut rng, 12, 6);
        let a = m.forward(&x, None, None).unwrap();
        let b = m.forward(&x, None, None).unwrap();
        assert_eq!(a, b);
        let mut d = SeededRng::new(5);
        let c = m.forward(&x, None, Some(&mut d)).unwrap();
        assert_ne!(a.log_rates, c.log_rates);
    }

    #[test]
    fn categorical_head_gives_log_expected_count() {
        let mut cfg = small(Arch::Transformer, 0);
        cfg.rec_loss = RecLoss::Ce;
        let m = build_model(&cfg, &SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(1);
        let x = spikes(&mut rng, 12, 6);
        let mut tape = Tape::inference();
        let vars = m.params.on_tape(&mut tape);
        let f = m.forward_tape(&mut tape, &vars, &[x], None, None).unwrap();
        let lp = tape.value(f.count_log_probs.unwrap()).clone();
        let lr = tape.value(f.log_rates);
        assert_eq!(lp.shape(), &[72, 6]);
        for (k, &v) in lr.data().iter().enumerate() {
            let e: f64 = lp.row(k).iter().enumerate().map(|(c, l)| c as f64 * l.exp()).sum();
            assert!((v - (e + 1e-9).ln()).abs() < 1e-12);
        }
    }

    /// One gradient step on random data touches every parameter tensor.
    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = SeededRng::new(11);
        for arch in [Arch::Transformer, Arch::Recurrent] {
            for rec in [RecLoss::Poisson, RecLoss::Ce] {
                let mut cfg = small(arch, 2);
                cfg.rec_loss = rec;
                let m = build_model(&cfg, &SeededRng::new(0)).unwrap();
                let xs: Vec<Tensor> = (0..2).map(|_| spikes(&mut rng, 12, 6)).collect();
                let bs: Vec<Tensor> = (0..2)
                    .map(|_| Tensor::from_rows(12, 2, (0..24).map(|_| rng.normal()).collect()))
                    .collect();
                let mut tape = Tape::new();
                let vars = m.params.on_tape(&mut tape);
                let mut drop = SeededRng::new(0);
                let f = m
                    .forward_tape(&mut tape, &vars, &xs, Some(&bs), Some(&mut drop))
                    .unwrap();
                let sq = tape.square(f.log_rates);
                let mut loss = tape.mean_all(sq);
                for h in &f.hidden {
                    let s = tape.square(*h);
                    let s = tape.mean_all(s);
                    loss = tape.add(loss, s);
                }
                let g = tape.backward(loss, m.params.len());
                for (i, name) in m.params.names().iter().enumerate() {
                    let gi = g.get(i).unwrap_or_else(|| panic!("{arch} {name}: no gradient"));
                    assert!(gi.max_abs() > 0.0, "{arch} {name}: all-zero gradient");
                }
            }
        }
    }

    #[test]
    fn recurrent_generator_is_autonomous() {
        let cfg = small(Arch::Recurrent, 0);
        let m = build_model(&cfg, &SeededRng::new(0)).unwrap();
        for name in m.params.names() {
            assert!(!name.starts_with("gen.wx"), "generator has input weights: {name}");
        }
    }
}
