//! Transformer building blocks shared by every encoder, the flow coupling
//! networks, and the decoder.
//!
//! Blocks use the post-norm residual arrangement of the original
//! Transformer: `LN(x + sublayer(x))`. Cross-attention is never masked; the
//! optional self-attention mask is the only place causality enters.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Mask, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout_rate: f64,
}

impl AttentionConfig {
    /// Width used by every attention structure in the reference setup.
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            d_ffn: 1024,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1]", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-head attention distributions, `[n_heads, T_q, T_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Tensor,
}

impl AttentionWeights {
    pub fn n_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Head-averaged `[T_q, T_k]` matrix.
    pub fn mean_over_heads(&self) -> Tensor {
        let (h, q, k) = (self.n_heads(), self.queries(), self.keys());
        let mut out = vec![0.0; q * k];
        for head in 0..h {
            for (o, w) in out.iter_mut().zip(&self.weights.data()[head * q * k..(head + 1) * q * k]) {
                *o += w / h as f64;
            }
        }
        Tensor::new(vec![q, k], out).expect("shape")
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe(length: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs even width, got {d_model}")));
    }
    let mut data = vec![0.0; length * d_model];
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, d_model], data)
}

pub fn causal_mask(t: usize) -> Mask {
    Mask::causal(t)
}

/// `x + PE` at the sequence length actually processed.
pub fn add_positions(ctx: &Ctx, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x);
    let pe = ctx.constant(sinusoidal_pe(shape[0], shape[1])?);
    ctx.tape.add(x, pe)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    cfg: AttentionConfig,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            cfg: cfg.clone(),
            wq: Linear::new(store, &format!("{name}.q"), d, d, Init::XavierUniform, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, Init::XavierUniform, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, Init::XavierUniform, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, Init::XavierUniform, rng),
        })
    }

    pub fn forward(&self, ctx: &Ctx, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<(Var, AttentionWeights)> {
        let t = &ctx.tape;
        let (qs, ks) = (t.shape(q), t.shape(k));
        let d = self.cfg.d_model;
        if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d || t.shape(v) != ks {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (tq, tk) = (qs[0], ks[0]);
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = self.wq.forward(ctx, q)?;
        let kp = self.wk.forward(ctx, k)?;
        let vp = self.wv.forward(ctx, v)?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut weights = Vec::with_capacity(self.cfg.n_heads * tq * tk);
        for h in 0..self.cfg.n_heads {
            let qh = t.slice_cols(qp, h * dh, dh)?;
            let kh = t.slice_cols(kp, h * dh, dh)?;
            let vh = t.slice_cols(vp, h * dh, dh)?;
            let scores = t.scale(t.matmul(qh, t.transpose(kh)?)?, scale);
            let w = t.softmax_last(scores, mask)?;
            weights.extend_from_slice(t.value(w).data());
            heads.push(t.matmul(w, vh)?);
        }
        let cat = t.concat_cols(&heads)?;
        let out = self.wo.forward(ctx, cat)?;
        let weights = Tensor::new(vec![self.cfg.n_heads, tq, tk], weights)?;
        Ok((out, AttentionWeights { weights }))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), cfg.d_model, cfg.d_ffn, Init::XavierUniform, rng),
            down: Linear::new(store, &format!("{name}.down"), cfg.d_ffn, cfg.d_model, Init::XavierUniform, rng),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(self.up.forward(ctx, x)?);
        let h = ctx.dropout(h, self.dropout)?;
        self.down.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    dropout: f64,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            dropout: cfg.dropout_rate,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = &ctx.tape;
        let (a, _) = self.attn.forward(ctx, x, x, x, mask)?;
        let a = ctx.dropout(a, self.dropout)?;
        let x = self.norm1.forward(ctx, t.add(x, a)?)?;
        let f = self.ffn.forward(ctx, x)?;
        self.norm2.forward(ctx, t.add(x, f)?)
    }
}

/// Masked self-attention, then cross-attention over `memory`, then FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    dropout: f64,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.d_model),
            dropout: cfg.dropout_rate,
        })
    }

    /// Returns the block output and its cross-attention weights.
    pub fn forward(&self, ctx: &Ctx, x: Var, memory: Var, self_mask: Option<&Mask>) -> Result<(Var, AttentionWeights)> {
        let t = &ctx.tape;
        let (a, _) = self.self_attn.forward(ctx, x, x, x, self_mask)?;
        let a = ctx.dropout(a, self.dropout)?;
        let x = self.norm1.forward(ctx, t.add(x, a)?)?;
        let (c, weights) = self.cross_attn.forward(ctx, x, memory, memory, None)?;
        let c = ctx.dropout(c, self.dropout)?;
        let x = self.norm2.forward(ctx, t.add(x, c)?)?;
        let f = self.ffn.forward(ctx, x)?;
        Ok((self.norm3.forward(ctx, t.add(x, f)?)?, weights))
    }
}

/// Runs a stack of decoder blocks, collecting the cross-attention of each.
pub fn run_decoder_stack(
    ctx: &Ctx,
    blocks: &[DecoderBlock],
    mut x: Var,
    memory: Var,
    self_mask: Option<&Mask>,
) -> Result<(Var, Vec<AttentionWeights>)> {
    let mut all = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, w) = b.forward(ctx, x, memory, self_mask)?;
        x = y;
        all.push(w);
    }
    Ok((x, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AttentionConfig {
        AttentionConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn pe_examples() {
        let pe = sinusoidal_pe(3, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get2(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_pe(2, 3), Err(Error::Config(_))));
    }

    #[test]
    fn causal_mask_pattern() {
        let m = causal_mask(1);
        assert!(m.allowed(0, 0));
        let m = causal_mask(3);
        for i in 0..3 {
            let n = (0..3).filter(|&j| m.allowed(i, j)).count();
            assert_eq!(n, i + 1);
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, "m", &cfg(), &mut rng).unwrap();
        let ctx = Ctx::eval(&store);
        let q = ctx.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let kv = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let k = ctx.constant(kv.clone());
        let (out, w) = mha.forward(&ctx, q, k, k, None).unwrap();
        assert!(w.weights.data().iter().all(|&v| v == 1.0));
        // Every query returns o(v(k)).
        let vo = mha.wo.forward(&ctx, mha.wv.forward(&ctx, k).unwrap()).unwrap();
        let expect = ctx.tape.value(vo).clone();
        let got = ctx.tape.value(out).clone();
        for i in 0..3 {
            for j in 0..8 {
                assert!((got.get2(i, j) - expect.get2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_query_zero_sees_only_key_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "m", &cfg(), &mut rng).unwrap();
        let ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let (_, w) = mha.forward(&ctx, x, x, x, Some(&causal_mask(4))).unwrap();
        for h in 0..2 {
            assert_eq!(w.weights.data()[h * 16], 1.0);
            for i in 0..4 {
                let row = &w.weights.data()[h * 16 + i * 4..h * 16 + i * 4 + 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn permuting_keys_permutes_weight_columns() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "m", &cfg(), &mut rng).unwrap();
        let q = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let kp = Tensor::from_rows(&perm.iter().map(|&p| k.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let ctx = Ctx::eval(&store);
        let (o1, w1) = mha.forward(&ctx, ctx.constant(q.clone()), ctx.constant(k.clone()), ctx.constant(k), None).unwrap();
        let (o2, w2) = mha.forward(&ctx, ctx.constant(q.clone()), ctx.constant(kp.clone()), ctx.constant(kp), None).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                for (c, &p) in perm.iter().enumerate() {
                    let a = w2.weights.data()[h * 15 + i * 5 + c];
                    let b = w1.weights.data()[h * 15 + i * 5 + p];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(ctx.tape.value(o1).max_abs_diff(&ctx.tape.value(o2)) < 1e-12);
    }

    #[test]
    fn self_block_preserves_shape_and_causality() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = SelfAttentionBlock::new(&mut store, "b", &cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let mut xp = x.clone();
        for j in 0..8 {
            xp.data_mut()[4 * 8 + j] += 0.7;
        }
        let mask = causal_mask(6);
        let ctx = Ctx::eval(&store);
        let y1 = block.forward(&ctx, ctx.constant(x), Some(&mask)).unwrap();
        let y2 = block.forward(&ctx, ctx.constant(xp), Some(&mask)).unwrap();
        let (a, b) = (ctx.tape.value(y1).clone(), ctx.tape.value(y2).clone());
        assert_eq!(a.shape(), &[6, 8]);
        assert_eq!(a.data()[..32], b.data()[..32]);
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn zero_projections_reduce_to_normed_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = SelfAttentionBlock::new(&mut store, "b", &cfg(), &mut rng).unwrap();
        let names: Vec<String> = store.params().keys().filter(|n| n.ends_with(".weight")).cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let ctx = Ctx::eval(&store);
        let y = block.forward(&ctx, ctx.constant(x.clone()), None).unwrap();
        let g = ctx.constant(Tensor::ones(&[8]));
        let b = ctx.constant(Tensor::zeros(&[8]));
        let once = ctx.tape.layer_norm(ctx.constant(x), g, b).unwrap();
        let twice = ctx.tape.layer_norm(once, g, b).unwrap();
        assert!(ctx.tape.value(y).max_abs_diff(&ctx.tape.value(twice)) < 1e-12);
    }

    #[test]
    fn decoder_block_shapes_and_single_memory() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = DecoderBlock::new(&mut store, "d", &cfg(), &mut rng).unwrap();
        let ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let mem = ctx.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let (y, w) = block.forward(&ctx, x, mem, Some(&causal_mask(5))).unwrap();
        assert_eq!(ctx.tape.shape(y), vec![5, 8]);
        assert!(w.weights.data().iter().all(|&v| v == 1.0));
        let mem = ctx.constant(Tensor::randn(&[7, 8], 1.0, &mut rng));
        let (_, w) = block.forward(&ctx, x, mem, None).unwrap();
        assert_eq!(w.weights.shape(), &[2, 5, 7]);
    }

    #[test]
    fn decoder_block_causal_in_x_not_memory() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = DecoderBlock::new(&mut store, "d", &cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mem = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut xp = x.clone();
        xp.data_mut()[3 * 8] -= 1.3;
        let mask = causal_mask(5);
        let ctx = Ctx::eval(&store);
        let m = ctx.constant(mem.clone());
        let (y1, _) = block.forward(&ctx, ctx.constant(x.clone()), m, Some(&mask)).unwrap();
        let (y2, _) = block.forward(&ctx, ctx.constant(xp), m, Some(&mask)).unwrap();
        assert_eq!(ctx.tape.value(y1).data()[..24], ctx.tape.value(y2).data()[..24]);
        // Memory changes reach every position.
        let mut memp = mem;
        memp.data_mut()[0] += 1.0;
        let (y3, _) = block.forward(&ctx, ctx.constant(x), ctx.constant(memp), Some(&mask)).unwrap();
        assert_ne!(ctx.tape.value(y1).row(0), ctx.tape.value(y3).row(0));
    }
}
