//! Bidirectional GRU encoder feeding an autonomous GRU generator through a
//! deterministic initial condition, read out through low-dimensional factors.

use super::params::{fan_in_uniform, ParamStore};
use super::{Dropout, EncoderConfig};
use crate::error::Result;
use crate::numerics::{SeededRng, Tape, Tensor, Var};

pub(super) fn declare(cfg: &EncoderConfig, p: &mut ParamStore, rng: &SeededRng) -> Result<()> {
    let d = cfg.hidden;
    let weight = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
        p.push(name, fan_in_uniform(&mut rng.named(name), fan_in, fan_out))?;
        Ok(())
    };
    let bias = |p: &mut ParamStore, name: &str, width: usize| -> Result<()> {
        p.push(name, Tensor::zeros(&[1, width]))?;
        Ok(())
    };
    for dir in ["fwd", "bwd"] {
        weight(p, &format!("enc.{dir}.wx"), cfg.input_width(), 3 * d)?;
        bias(p, &format!("enc.{dir}.bx"), 3 * d)?;
        weight(p, &format!("enc.{dir}.wh"), d, 3 * d)?;
        bias(p, &format!("enc.{dir}.bh"), 3 * d)?;
    }
    weight(p, "ic.w", 2 * d, d)?;
    bias(p, "ic.b", d)?;
    // The generator's input is identically zero, so only its input bias survives.
    bias(p, "gen.bx", 3 * d)?;
    weight(p, "gen.wh", d, 3 * d)?;
    bias(p, "gen.bh", 3 * d)?;
    weight(p, "factors.w", d, cfg.factors)?;
    weight(p, "readout.w", cfg.factors, cfg.readout_width())?;
    bias(p, "readout.b", cfg.readout_width())
}

/// Input contribution to the three gate pre-activations.
enum GateInput {
    /// Per-row `b × 3d` projection of the current step's input.
    Rows(Var),
    /// `1 × 3d` bias broadcast over rows.
    Bias(Var),
}

fn gru_step(tape: &mut Tape, x: &GateInput, h: Var, wh: Var, bh: Var, d: usize) -> Var {
    let hh = tape.matmul(h, wh);
    let hh = tape.add_bias(hh, bh);
    let gate = |tape: &mut Tape, k: usize, hpart: Var| match x {
        GateInput::Rows(v) => {
            let xs = tape.slice_cols(*v, k * d, d);
            tape.add(xs, hpart)
        }
        GateInput::Bias(v) => {
            let xs = tape.slice_cols(*v, k * d, d);
            tape.add_bias(hpart, xs)
        }
    };
    let hr = tape.slice_cols(hh, 0, d);
    let r = gate(tape, 0, hr);
    let r = tape.sigmoid(r);
    let hz = tape.slice_cols(hh, d, d);
    let z = gate(tape, 1, hz);
    let z = tape.sigmoid(z);
    let hn = tape.slice_cols(hh, 2 * d, d);
    let rn = tape.mul(r, hn);
    let n = gate(tape, 2, rn);
    let n = tape.tanh(n);
    // h' = (1 - z) n + z h
    let diff = tape.sub(h, n);
    let zd = tape.mul(z, diff);
    tape.add(n, zd)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    cfg: &EncoderConfig,
    store: &ParamStore,
    vars: &[Var],
    tape: &mut Tape,
    x: &Tensor,
    trials: usize,
    t: usize,
    drop: &mut Dropout<'_>,
) -> (Var, Vec<Var>) {
    let p = |name: &str| vars[store.index_of(name).expect("declared parameter")];
    let d = cfg.hidden;
    let b = trials;
    let width = x.cols();
    // Reorder to step-major so that each step is a contiguous row block.
    let mut xs = Vec::with_capacity(x.len());
    for step in 0..t {
        for i in 0..b {
            xs.extend_from_slice(x.row(i * t + step));
        }
    }
    let xs = tape.constant(Tensor::from_rows(t * b, width, xs));

    let mut finals = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let n = |s: &str| format!("enc.{dir}.{s}");
        let proj = tape.matmul(xs, p(&n("wx")));
        let proj = tape.add_bias(proj, p(&n("bx")));
        let mut h = tape.constant(Tensor::zeros(&[b, d]));
        for k in 0..t {
            let step = if reverse { t - 1 - k } else { k };
            let xin = GateInput::Rows(tape.slice_rows(proj, step * b, b));
            h = gru_step(tape, &xin, h, p(&n("wh")), p(&n("bh")), d);
        }
        finals.push(h);
    }
    let enc = tape.concat_cols(&finals);
    let g0 = tape.matmul(enc, p("ic.w"));
    let mut h = tape.add_bias(g0, p("ic.b"));

    let gin = GateInput::Bias(p("gen.bx"));
    let mut states = Vec::with_capacity(t);
    for _ in 0..t {
        h = gru_step(tape, &gin, h, p("gen.wh"), p("gen.bh"), d);
        states.push(h);
    }
    let states = tape.concat_rows(&states);
    let order: Vec<usize> = (0..b)
        .flat_map(|i| (0..t).map(move |step| step * b + i))
        .collect();
    let states = tape.gather_rows(states, &order);
    let factors = tape.matmul(states, p("factors.w"));
    let f = drop.apply(tape, factors);
    let out = tape.matmul(f, p("readout.w"));
    (tape.add_bias(out, p("readout.b")), vec![states, factors])
}
