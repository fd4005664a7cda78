//! Conditional Glow prior over frame-level latents.
//!
//! Each flow block is actnorm → invertible 1×1 convolution → affine
//! coupling. The coupling network is a stack of decoder blocks that reads
//! the first half of the latent features as queries and the linguistic
//! feature as keys/values, and emits a log-scale and shift for the second
//! half. Sampling runs the blocks forward from base noise; density
//! evaluation runs them inverse and applies the change-of-variables sum.

use crate::attention::{add_positions, causal_mask, run_decoder_stack, AttentionConfig, DecoderBlock};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::{linalg, Tape, Tensor, Var};
use rand::Rng;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A latent sequence `[N_r, d_z]` with its log-density when it was scored.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub z: Var,
    pub log_density: Option<Var>,
}

/// `log N(u; 0, I)` summed over every element.
pub fn std_normal_log_density(tape: &Tape, u: Var) -> Var {
    let n = tape.value(u).len() as f64;
    let sq = tape.sum(tape.square(u));
    tape.add_scalar(tape.scale(sq, -0.5), -0.5 * n * (2.0 * PI).ln())
}

/// Per-feature affine map. Forward: `y = scale ⊙ x + bias`, with
/// `logdet = N_r · Σ log|scale|`.
pub fn actnorm(tape: &Tape, x: Var, scale: Var, bias: Var, dir: Direction) -> Result<(Var, Var)> {
    if tape.value(scale).data().contains(&0.0) {
        return Err(Error::Numeric("actnorm scale has a zero element".into()));
    }
    let frames = tape.shape(x)[0] as f64;
    let log_abs = tape.scale(tape.log(tape.square(scale)), 0.5);
    let per_frame = tape.sum(log_abs);
    match dir {
        Direction::Forward => {
            let y = tape.add(tape.mul(x, scale)?, bias)?;
            Ok((y, tape.scale(per_frame, frames)))
        }
        Direction::Inverse => {
            let inv = tape.powf(scale, -1.0);
            let y = tape.mul(tape.sub(x, bias)?, inv)?;
            Ok((y, tape.scale(per_frame, -frames)))
        }
    }
}

/// Feature-mixing `y = x W` with `logdet = N_r · log|det W|`; the inverse uses `W⁻¹`.
pub fn invertible_1x1(tape: &Tape, x: Var, weight: Var, dir: Direction) -> Result<(Var, Var)> {
    let frames = tape.shape(x)[0] as f64;
    let lad = tape.log_abs_det(weight)?;
    match dir {
        Direction::Forward => Ok((tape.matmul(x, weight)?, tape.scale(lad, frames))),
        Direction::Inverse => {
            let inv = tape.inverse(weight)?;
            Ok((tape.matmul(x, inv)?, tape.scale(lad, -frames)))
        }
    }
}

/// Affine coupling whose transform attends over the linguistic feature.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    in_proj: Linear,
    blocks: Vec<DecoderBlock>,
    out_proj: Linear,
    half: usize,
    causal: bool,
}

impl AffineCoupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        n_blocks: usize,
        cfg: &AttentionConfig,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !d_z.is_multiple_of(2) {
            return Err(Error::Config(format!("affine coupling needs even d_z, got {d_z}")));
        }
        let half = d_z / 2;
        let blocks = (0..n_blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_proj: Linear::new(store, &format!("{name}.in"), half, cfg.d_model, Init::XavierUniform, rng),
            blocks,
            out_proj: Linear::new(store, &format!("{name}.out"), cfg.d_model, 2 * half, Init::Zeros, rng),
            half,
            causal,
        })
    }

    /// Log-scale and shift predicted from the pass-through half.
    fn scale_shift(&self, ctx: &Ctx, xa: Var, memory: Var) -> Result<(Var, Var)> {
        let t = &ctx.tape;
        let frames = t.shape(xa)[0];
        let h = add_positions(ctx, self.in_proj.forward(ctx, xa)?)?;
        let mask = self.causal.then(|| causal_mask(frames));
        let (h, _) = run_decoder_stack(ctx, &self.blocks, h, memory, mask.as_ref())?;
        let st = self.out_proj.forward(ctx, h)?;
        Ok((t.slice_cols(st, 0, self.half)?, t.slice_cols(st, self.half, self.half)?))
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, memory: Var, dir: Direction) -> Result<(Var, Var)> {
        let t = &ctx.tape;
        if t.shape(memory)[0] == 0 {
            return Err(Error::Input("coupling memory is empty".into()));
        }
        let xa = t.slice_cols(x, 0, self.half)?;
        let xb = t.slice_cols(x, self.half, self.half)?;
        let (log_s, shift) = self.scale_shift(ctx, xa, memory)?;
        let sum_log_s = t.sum(log_s);
        let (yb, logdet) = match dir {
            Direction::Forward => (t.add(t.mul(xb, t.exp(log_s))?, shift)?, sum_log_s),
            Direction::Inverse => {
                let yb = t.mul(t.sub(xb, shift)?, t.exp(t.neg(log_s)))?;
                (yb, t.neg(sum_log_s))
            }
        };
        Ok((t.concat_cols(&[xa, yb])?, logdet))
    }
}

/// Parameter names of one flow block.
#[derive(Clone, Debug)]
pub struct FlowBlock {
    pub actnorm_scale: String,
    pub actnorm_bias: String,
    pub perm_weight: String,
    pub coupling: AffineCoupling,
}

impl FlowBlock {
    pub fn forward(&self, ctx: &Ctx, x: Var, memory: Var, dir: Direction) -> Result<(Var, Var)> {
        let t = &ctx.tape;
        let scale = ctx.param(&self.actnorm_scale)?;
        let bias = ctx.param(&self.actnorm_bias)?;
        let w = ctx.param(&self.perm_weight)?;
        match dir {
            Direction::Forward => {
                let (x, l1) = actnorm(t, x, scale, bias, dir)?;
                let (x, l2) = invertible_1x1(t, x, w, dir)?;
                let (x, l3) = self.coupling.forward(ctx, x, memory, dir)?;
                Ok((x, t.add(t.add(l1, l2)?, l3)?))
            }
            Direction::Inverse => {
                let (x, l3) = self.coupling.forward(ctx, x, memory, dir)?;
                let (x, l2) = invertible_1x1(t, x, w, dir)?;
                let (x, l1) = actnorm(t, x, scale, bias, dir)?;
                Ok((x, t.add(t.add(l1, l2)?, l3)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlowPrior {
    pub blocks: Vec<FlowBlock>,
    pub d_z: usize,
}

impl GlowPrior {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        n_blocks: usize,
        coupling_blocks: usize,
        cfg: &AttentionConfig,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for k in 0..n_blocks {
            let base = format!("{name}.flow{k}");
            let actnorm_scale = format!("{base}.actnorm.scale");
            let actnorm_bias = format!("{base}.actnorm.bias");
            let perm_weight = format!("{base}.perm.weight");
            store.insert(actnorm_scale.clone(), Tensor::ones(&[d_z]));
            store.insert(actnorm_bias.clone(), Tensor::zeros(&[d_z]));
            store.insert(perm_weight.clone(), linalg::random_rotation(d_z, rng));
            let coupling = AffineCoupling::new(store, &format!("{base}.coupling"), d_z, coupling_blocks, cfg, causal, rng)?;
            blocks.push(FlowBlock {
                actnorm_scale,
                actnorm_bias,
                perm_weight,
                coupling,
            });
        }
        Ok(Self { blocks, d_z })
    }

    /// Base noise through every block forward, with the summed forward logdet.
    pub fn forward_with_logdet(&self, ctx: &Ctx, noise: Var, memory: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(noise);
        if shape.len() != 2 || shape[1] != self.d_z {
            return Err(Error::Shape {
                op: "glow_sample",
                lhs: shape,
                rhs: vec![self.d_z],
            });
        }
        let mut x = noise;
        let mut total = ctx.constant(Tensor::scalar(0.0));
        for b in &self.blocks {
            let (y, l) = b.forward(ctx, x, memory, Direction::Forward)?;
            x = y;
            total = ctx.tape.add(total, l)?;
        }
        Ok((x, total))
    }

    pub fn sample(&self, ctx: &Ctx, noise: Var, memory: Var) -> Result<LatentSample> {
        let (z, _) = self.forward_with_logdet(ctx, noise, memory)?;
        Ok(LatentSample { z, log_density: None })
    }

    /// Recovers base noise from `z`, returning it with the summed inverse logdet.
    pub fn inverse(&self, ctx: &Ctx, z: Var, memory: Var) -> Result<(Var, Var)> {
        let mut x = z;
        let mut total = ctx.constant(Tensor::scalar(0.0));
        for b in self.blocks.iter().rev() {
            let (y, l) = b.forward(ctx, x, memory, Direction::Inverse)?;
            x = y;
            total = ctx.tape.add(total, l)?;
        }
        Ok((x, total))
    }

    /// `log P(z | X)` by the change of variables through the inverse pass.
    pub fn log_density(&self, ctx: &Ctx, z: Var, memory: Var) -> Result<Var> {
        let (u, logdet) = self.inverse(ctx, z, memory)?;
        let base = std_normal_log_density(&ctx.tape, u);
        ctx.tape.add(base, logdet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err};
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

    fn prior(d_z: usize, k: usize, seed: u64) -> (ParamStore, GlowPrior) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GlowPrior::new(&mut store, "prior", d_z, k, 1, &cfg(), true, &mut rng).unwrap();
        (store, g)
    }

    #[test]
    fn actnorm_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let one = tape.constant(Tensor::ones(&[4]));
        let zero = tape.constant(Tensor::zeros(&[4]));
        let (y, ld) = actnorm(&tape, x, one, zero, Direction::Forward).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
        assert_eq!(tape.value(ld).item(), 0.0);

        let two = tape.constant(Tensor::full(&[4], 2.0));
        let (_, ld) = actnorm(&tape, x, two, zero, Direction::Forward).unwrap();
        assert!((tape.value(ld).item() - 12.0 * 2f64.ln()).abs() < 1e-12);

        let s = tape.constant(Tensor::new(vec![4], vec![0.5, -1.5, 3.0, 0.2]).unwrap());
        let b = tape.constant(Tensor::randn(&[4], 1.0, &mut rng));
        let (y, l1) = actnorm(&tape, x, s, b, Direction::Forward).unwrap();
        let (back, l2) = actnorm(&tape, y, s, b, Direction::Inverse).unwrap();
        assert!(tape.value(back).max_abs_diff(&tape.value(x)) < 1e-10);
        assert!((tape.value(l1).item() + tape.value(l2).item()).abs() < 1e-12);

        let zs = tape.constant(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        assert!(matches!(actnorm(&tape, x, zs, b, Direction::Forward), Err(Error::Numeric(_))));
    }

    #[test]
    fn invertible_1x1_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let (y, ld) = invertible_1x1(&tape, x, tape.constant(Tensor::eye(2)), Direction::Forward).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
        assert_eq!(tape.value(ld).item(), 0.0);
        let th = 0.7f64;
        let rot = Tensor::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]]).unwrap();
        let (_, ld) = invertible_1x1(&tape, x, tape.constant(rot), Direction::Forward).unwrap();
        assert!(tape.value(ld).item().abs() < 1e-12);
        let sing = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            invertible_1x1(&tape, x, tape.constant(sing), Direction::Forward),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn identity_init_samples_are_noise() {
        let (store, g) = prior(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = Ctx::eval(&store);
        // Rotations are not identity at init; replace them to get the identity flow.
        let mut store = store.clone();
        for b in &g.blocks {
            *store.get_mut(&b.perm_weight).unwrap() = Tensor::eye(4);
        }
        drop(ctx);
        let ctx = Ctx::eval(&store);
        let noise = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mem = ctx.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let s = g.sample(&ctx, ctx.constant(noise.clone()), mem).unwrap();
        assert!(ctx.tape.value(s.z).max_abs_diff(&noise) < 1e-15);
        let ld = g.log_density(&ctx, ctx.constant(noise.clone()), mem).unwrap();
        let expect: f64 = noise.data().iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * PI).ln()).sum();
        assert!((ctx.tape.value(ld).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_zero_noise_is_a_fixed_map() {
        let (mut store, g) = prior(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        store.perturb("prior", 0.1, &mut rng);
        let mem = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let run = |noise: &Tensor| {
            let ctx = Ctx::eval(&store);
            let m = ctx.constant(mem.clone());
            let s = g.sample(&ctx, ctx.constant(noise.clone()), m).unwrap();
            let z = ctx.tape.value(s.z).clone();
            z
        };
        let zeros = Tensor::zeros(&[5, 4]);
        assert_eq!(run(&zeros), run(&zeros));
        assert!(run(&zeros).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn log_density_grad_matches_finite_differences() {
        let (mut store, g) = prior(4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        store.perturb("prior", 0.2, &mut rng);
        let mem = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let z = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let ctx = Ctx::eval(&store);
        let zv = ctx.tape.leaf(z.clone());
        let ld = g.log_density(&ctx, zv, ctx.constant(mem.clone())).unwrap();
        let grad = ctx.tape.backward(ld).unwrap().get(zv).unwrap().clone();
        let fd = finite_diff_grad(
            |zz| {
                let c = Ctx::eval(&store);
                let l = g.log_density(&c, c.constant(zz.clone()), c.constant(mem.clone())).unwrap();
                let v = c.tape.value(l).item();
                v
            },
            &z,
            1e-4,
        );
        assert!(max_rel_err(&grad, &fd) < 1e-4);
    }

    #[test]
    fn odd_latent_width_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AffineCoupling::new(&mut store, "c", 5, 1, &cfg(), true, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
