//! Pre-norm transformer encoder with learned positional embeddings.

use super::params::{fan_in_uniform, ParamStore};
use super::{Dropout, EncoderConfig};
use crate::error::Result;
use crate::numerics::{SeededRng, Tape, Tensor, Var};

pub(super) fn declare(cfg: &EncoderConfig, p: &mut ParamStore, rng: &SeededRng) -> Result<()> {
    let d = cfg.hidden;
    let linear = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
        let w = fan_in_uniform(&mut rng.named(&format!("{name}.w")), fan_in, fan_out);
        p.push(format!("{name}.w"), w)?;
        p.push(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(())
    };
    let norm = |p: &mut ParamStore, name: &str| -> Result<()> {
        p.push(format!("{name}.g"), Tensor::full(&[1, d], 1.0))?;
        p.push(format!("{name}.b"), Tensor::zeros(&[1, d]))?;
        Ok(())
    };
    linear(p, "embed", cfg.input_width(), d)?;
    let a = 1.0 / (d as f64).sqrt();
    let mut prng = rng.named("pos");
    let pos = Tensor::from_rows(
        cfg.max_t,
        d,
        (0..cfg.max_t * d).map(|_| prng.uniform_range(-a, a)).collect(),
    );
    p.push("pos", pos)?;
    for l in 0..cfg.layers {
        norm(p, &format!("blocks.{l}.ln1"))?;
        linear(p, &format!("blocks.{l}.attn.qkv"), d, 3 * d)?;
        linear(p, &format!("blocks.{l}.attn.out"), d, d)?;
        norm(p, &format!("blocks.{l}.ln2"))?;
        linear(p, &format!("blocks.{l}.ffn.1"), d, 4 * d)?;
        linear(p, &format!("blocks.{l}.ffn.2"), 4 * d, d)?;
    }
    norm(p, "final_ln")?;
    linear(p, "readout", d, cfg.readout_width())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    cfg: &EncoderConfig,
    store: &ParamStore,
    vars: &[Var],
    tape: &mut Tape,
    x: Var,
    trials: usize,
    t: usize,
    drop: &mut Dropout<'_>,
) -> (Var, Vec<Var>) {
    let p = |name: &str| vars[store.index_of(name).expect("declared parameter")];
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let h = tape.matmul(x, p("embed.w"));
    let h = tape.add_bias(h, p("embed.b"));
    let pos = tape.slice_rows(p("pos"), 0, t);
    let pos = if trials == 1 {
        pos
    } else {
        tape.concat_rows(&vec![pos; trials])
    };
    let mut h = tape.add(h, pos);
    let mut hidden = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let n = |s: &str| format!("blocks.{l}.{s}");
        let a = tape.layer_norm(h, p(&n("ln1.g")), p(&n("ln1.b")));
        let qkv = tape.matmul(a, p(&n("attn.qkv.w")));
        let qkv = tape.add_bias(qkv, p(&n("attn.qkv.b")));
        let mut per_trial = Vec::with_capacity(trials);
        for i in 0..trials {
            let qkv_i = if trials == 1 {
                qkv
            } else {
                tape.slice_rows(qkv, i * t, t)
            };
            let mut heads = Vec::with_capacity(cfg.heads);
            for k in 0..cfg.heads {
                let q = tape.slice_cols(qkv_i, k * dh, dh);
                let kk = tape.slice_cols(qkv_i, d + k * dh, dh);
                let v = tape.slice_cols(qkv_i, 2 * d + k * dh, dh);
                let s = tape.matmul_t(q, false, kk, true);
                let s = tape.scale(s, inv_sqrt);
                let w = tape.softmax_rows(s);
                heads.push(tape.matmul(w, v));
            }
            per_trial.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            });
        }
        let attn = if trials == 1 {
            per_trial[0]
        } else {
            tape.concat_rows(&per_trial)
        };
        let o = tape.matmul(attn, p(&n("attn.out.w")));
        let o = tape.add_bias(o, p(&n("attn.out.b")));
        let o = drop.apply(tape, o);
        h = tape.add(h, o);

        let a = tape.layer_norm(h, p(&n("ln2.g")), p(&n("ln2.b")));
        let f = tape.matmul(a, p(&n("ffn.1.w")));
        let f = tape.add_bias(f, p(&n("ffn.1.b")));
        let f = tape.gelu(f);
        let f = tape.matmul(f, p(&n("ffn.2.w")));
        let f = tape.add_bias(f, p(&n("ffn.2.b")));
        let f = drop.apply(tape, f);
        h = tape.add(h, f);
        hidden.push(h);
    }
    let z = tape.layer_norm(h, p("final_ln.g"), p("final_ln.b"));
    let out = tape.matmul(z, p("readout.w"));
    (tape.add_bias(out, p("readout.b")), hidden)
}
