use rand::Rng;

use super::{Dropout, ModelConfig, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Parameter handles of one post-norm encoder layer.
///
/// The key projection has no bias: it adds the same amount to every score
/// in a query row and cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Layer output plus the attention node, whose weights can be read back
/// with [`Tape::attention_probs`].
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub out: Var,
    pub attention: Var,
}

impl EncoderLayer {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, f, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        let normal = |store: &mut ParamStore<T>, name: &str, shape: &[usize], rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(shape, std, rng))
        };
        let wq = normal(store, "attn.wq", &[d, d], rng)?;
        let wk = normal(store, "attn.wk", &[d, d], rng)?;
        let wv = normal(store, "attn.wv", &[d, d], rng)?;
        let wo = normal(store, "attn.wo", &[d, d], rng)?;
        let w1 = normal(store, "ff.w1", &[d, f], rng)?;
        let w2 = normal(store, "ff.w2", &[f, d], rng)?;
        let zeros = |store: &mut ParamStore<T>, name: &str, n: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(&[n]))
        };
        let bq = zeros(store, "attn.bq", d)?;
        let bv = zeros(store, "attn.bv", d)?;
        let bo = zeros(store, "attn.bo", d)?;
        let b1 = zeros(store, "ff.b1", f)?;
        let b2 = zeros(store, "ff.b2", d)?;
        let ln1_bias = zeros(store, "ln1.bias", d)?;
        let ln2_bias = zeros(store, "ln2.bias", d)?;
        let ln1_gain = store.add(format!("{prefix}.ln1.gain"), Tensor::ones(&[d]))?;
        let ln2_gain = store.add(format!("{prefix}.ln2.gain"), Tensor::ones(&[d]))?;
        Ok(Self {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            ln1_gain,
            ln1_bias,
            w1,
            b1,
            w2,
            b2,
            ln2_gain,
            ln2_bias,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 15] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }

    /// `x ↦ LN(h + FF(h))` with `h = LN(x + MHA(x))`; shape preserved.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cfg: &ModelConfig,
        dropout: &mut Dropout<'_>,
    ) -> Result<LayerOutput> {
        let (attn_out, attention) = multi_head_attention(tape, x, self, cfg.n_heads)?;
        let attn_out = dropout.apply(tape, attn_out);
        let res1 = tape.add(x, attn_out)?;
        let (g1, b1) = (tape.param(self.ln1_gain), tape.param(self.ln1_bias));
        let h = tape.layer_norm(res1, g1, b1, cfg.layer_norm_eps)?;

        let w1 = tape.param(self.w1);
        let inner = tape.matmul(h, w1)?;
        let bias1 = tape.param(self.b1);
        let inner = tape.add_row(inner, bias1)?;
        let inner = tape.gelu(inner);
        let w2 = tape.param(self.w2);
        let ff = tape.matmul(inner, w2)?;
        let bias2 = tape.param(self.b2);
        let ff = tape.add_row(ff, bias2)?;
        let ff = dropout.apply(tape, ff);
        let res2 = tape.add(h, ff)?;
        let (g2, b2) = (tape.param(self.ln2_gain), tape.param(self.ln2_bias));
        let out = tape.layer_norm(res2, g2, b2, cfg.layer_norm_eps)?;
        Ok(LayerOutput { out, attention })
    }
}

/// Full bidirectional multi-head self-attention over `x: [T, d]`.
///
/// Returns the projected output and the attention node.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    layer: &EncoderLayer,
    heads: usize,
) -> Result<(Var, Var)> {
    let proj = |tape: &mut Tape<'_, T>, w: ParamId, b: Option<ParamId>| -> Result<Var> {
        let w = tape.param(w);
        let y = tape.matmul(x, w)?;
        Ok(match b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    };
    let q = proj(tape, layer.wq, Some(layer.bq))?;
    let k = proj(tape, layer.wk, None)?;
    let v = proj(tape, layer.wv, Some(layer.bv))?;
    let attention = tape.attention(q, k, v, heads)?;
    let wo = tape.param(layer.wo);
    let out = tape.matmul(attention, wo)?;
    let bo = tape.param(layer.bo);
    let out = tape.add_row(out, bo)?;
    Ok((out, attention))
}
