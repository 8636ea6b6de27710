use rand::Rng;

use super::{ModelConfig, Result, TransformerError};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

/// Word, segment and position tables for program tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub word: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub max_positions: usize,
}

impl Embeddings {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab_size: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let word = store.add(
            format!("{prefix}.word"),
            Tensor::randn(&[vocab_size, d], cfg.embed_std, rng),
        )?;
        let segment = store.add(
            format!("{prefix}.segment"),
            Tensor::randn(&[cfg.n_segments, d], cfg.embed_std, rng),
        )?;
        let position = store.add(
            format!("{prefix}.position"),
            Tensor::randn(&[cfg.max_positions, d], cfg.embed_std, rng),
        )?;
        Ok(Self {
            word,
            segment,
            position,
            vocab_size,
            n_segments: cfg.n_segments,
            max_positions: cfg.max_positions,
        })
    }

    /// `E_word[w] + E_seg[s] + E_pos[p]` per token → `[n, d]`.
    pub fn embed_program_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        words: &[usize],
        segment_ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if words.len() != segment_ids.len() || words.len() != positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embed_program_tokens",
                lhs: vec![words.len()],
                rhs: vec![segment_ids.len(), positions.len()],
            }
            .into());
        }
        let check = |table: &'static str, ids: &[usize], size: usize| match ids.iter().find(|&&i| i >= size) {
            Some(&id) => Err(TransformerError::OutOfVocabulary { table, id, size }),
            None => Ok(()),
        };
        check("word", words, self.vocab_size)?;
        check("segment", segment_ids, self.n_segments)?;
        check("position", positions, self.max_positions)?;
        let (w, s, p) = (
            tape.param(self.word),
            tape.param(self.segment),
            tape.param(self.position),
        );
        let we = tape.gather(w, words)?;
        let se = tape.gather(s, segment_ids)?;
        let pe = tape.gather(p, positions)?;
        let sum = tape.add(we, se)?;
        Ok(tape.add(sum, pe)?)
    }
}

/// Fixed sinusoidal 2-D encoding: the first half of the width encodes the
/// row, the second half the column. Row-major `[h * w, d]`.
pub fn grid_position_encoding(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    let enc = |pos: usize, slot: &mut [f64]| {
        for i in 0..half / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
            slot[2 * i] = (pos as f64 * freq).sin();
            slot[2 * i + 1] = (pos as f64 * freq).cos();
        }
    };
    for r in 0..h {
        for c in 0..w {
            let cell = &mut out[(r * w + c) * d..(r * w + c + 1) * d];
            enc(r, &mut cell[..half]);
            enc(c, &mut cell[half..]);
        }
    }
    out
}

/// Linear projection of per-cell features plus the 2-D position encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEncoder {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub feat_dim: usize,
}

impl GridEncoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        feat_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let proj_w = store.add(
            format!("{prefix}.proj_w"),
            Tensor::randn(&[feat_dim, cfg.d_model], cfg.embed_std, rng),
        )?;
        let proj_b = store.add(format!("{prefix}.proj_b"), Tensor::zeros(&[cfg.d_model]))?;
        Ok(Self {
            proj_w,
            proj_b,
            feat_dim,
        })
    }

    /// `grid: [H, W, feat]` → visual tokens `[H * W, d]`, row-major.
    pub fn encode_grid_features<T: Scalar>(&self, tape: &mut Tape<'_, T>, grid: &Tensor<T>) -> Result<Var> {
        let shape = grid.shape();
        if shape.len() != 3 || shape[2] != self.feat_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode_grid_features",
                lhs: shape.to_vec(),
                rhs: vec![self.feat_dim],
            }
            .into());
        }
        let (h, w) = (shape[0], shape[1]);
        let cells = tape.constant(grid.clone().reshape(&[h * w, self.feat_dim])?);
        let pw = tape.param(self.proj_w);
        let x = tape.matmul(cells, pw)?;
        let pb = tape.param(self.proj_b);
        let x = tape.add_row(x, pb)?;
        let d = tape.shape(x)[1];
        let pe = Tensor::from_f64(&[h * w, d], &grid_position_encoding(h, w, d))?;
        let pe = tape.constant(pe);
        Ok(tape.add(x, pe)?)
    }
}
