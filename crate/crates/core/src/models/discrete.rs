//! Dense embedding of discrete behavior labels for the teacher's
//! concatenation pathway.

use crate::error::{BlendError, Result};
use crate::numerics::{SeededRng, Tape, Tensor, Var};

use super::params::ParamStore;

/// A learned table over a finite label vocabulary plus a learned per-bin
/// position code. Parameters are `table` (`vocab × dim`) and `pos`
/// (`max_t × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteBehaviorEmbedding {
    pub vocab: usize,
    pub dim: usize,
    pub max_t: usize,
    pub params: ParamStore,
}

impl DiscreteBehaviorEmbedding {
    pub fn new(vocab: usize, dim: usize, max_t: usize, rng: &SeededRng) -> Result<Self> {
        if vocab == 0 || dim == 0 || max_t == 0 {
            return Err(BlendError::InvalidArgument(
                "vocab, dim and max_t must be >= 1".into(),
            ));
        }
        let mut trng = rng.named("table");
        let table = Tensor::from_rows(vocab, dim, (0..vocab * dim).map(|_| trng.normal()).collect());
        for a in 0..vocab {
            for b in a + 1..vocab {
                if table.row(a) == table.row(b) {
                    return Err(BlendError::InvalidArgument(format!(
                        "labels {a} and {b} drew identical embeddings"
                    )));
                }
            }
        }
        let mut prng = rng.named("pos");
        let s = 1.0 / (dim as f64).sqrt();
        let pos = Tensor::from_rows(
            max_t,
            dim,
            (0..max_t * dim).map(|_| prng.uniform_range(-s, s)).collect(),
        );
        let mut params = ParamStore::new();
        params.push("table", table)?;
        params.push("pos", pos)?;
        Ok(DiscreteBehaviorEmbedding {
            vocab,
            dim,
            max_t,
            params,
        })
    }

    fn check(&self, labels: &[usize]) -> Result<()> {
        if labels.is_empty() || labels.len() > self.max_t {
            return Err(BlendError::InvalidArgument(format!(
                "label sequence length {} outside 1..={}",
                labels.len(),
                self.max_t
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.vocab) {
            return Err(BlendError::InvalidArgument(format!(
                "label {bad} is outside the vocabulary of size {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Per-bin labels of one trial to a `T × dim` tensor.
    pub fn embed(&self, labels: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.on_tape(&mut tape);
        let v = self.embed_tape(&mut tape, &vars, labels)?;
        Ok(tape.value(v).clone())
    }

    /// Trainable variant; `vars` come from `self.params.on_tape`.
    pub fn embed_tape(&self, tape: &mut Tape, vars: &[Var], labels: &[usize]) -> Result<Var> {
        self.check(labels)?;
        let rows = tape.gather_rows(vars[0], labels);
        let pos = tape.slice_rows(vars[1], 0, labels.len());
        Ok(tape.add(rows, pos))
    }
}
