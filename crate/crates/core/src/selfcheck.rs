//! Numerical oracle suite: flow invertibility and log-determinants,
//! end-to-end gradients, KL identities, causality and shape round trips.
//!
//! The layer functions under test are held in a [`Subject`] so that a
//! deliberately broken variant can be swapped in.

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::error::Result;
use crate::glow::{actnorm, invertible_1x1, AffineCoupling, Direction, GlowPrior};
use crate::model::{expand_spectrogram, posterior_log_density, reduce_spectrogram, ModelConfig, PosteriorParams, Vaenar};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{finite_diff_grad, linalg, rel_err, rel_err_floored, Mask, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ActnormFn = fn(&Tape, Var, Var, Var, Direction) -> Result<(Var, Var)>;
pub type Invertible1x1Fn = fn(&Tape, Var, Var, Direction) -> Result<(Var, Var)>;

#[derive(Clone, Copy)]
pub struct Subject {
    pub actnorm: ActnormFn,
    pub invertible_1x1: Invertible1x1Fn,
}

impl Default for Subject {
    fn default() -> Self {
        Self {
            actnorm,
            invertible_1x1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfcheckOptions {
    pub flow_instances: usize,
    pub kl_samples: usize,
    pub seed: u64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            flow_instances: 20,
            kl_samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const CHECKS: &[&str] = &[
    "flow_round_trip",
    "actnorm_logdet",
    "invertible_1x1_logdet",
    "coupling_logdet",
    "flow_block_logdet",
    "gradient_vs_finite_differences",
    "kl_standard_normal",
    "kl_shifted_mean",
    "causality_posterior",
    "causality_prior",
    "causality_decoder",
    "attention_rows_sum_to_one",
    "reduce_expand_round_trip",
];

pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const LOGDET_TOL: f64 = 1e-4;

pub fn run_all(subject: &Subject, opts: &SelfcheckOptions) -> Vec<CheckReport> {
    let n = opts.flow_instances;
    let s = opts.seed;
    vec![
        CheckReport::from_result("flow_round_trip", flow_round_trip(n, s).map(|r| r.verdict())),
        CheckReport::from_result("actnorm_logdet", layer_logdet(subject, Layer::Actnorm, n, s).map(|r| r.verdict())),
        CheckReport::from_result(
            "invertible_1x1_logdet",
            layer_logdet(subject, Layer::Invertible1x1, n, s).map(|r| r.verdict()),
        ),
        CheckReport::from_result("coupling_logdet", layer_logdet(subject, Layer::Coupling, n, s).map(|r| r.verdict())),
        CheckReport::from_result("flow_block_logdet", layer_logdet(subject, Layer::Block, n, s).map(|r| r.verdict())),
        CheckReport::from_result("gradient_vs_finite_differences", gradient_check(s).map(|r| r.verdict())),
        CheckReport::from_result("kl_standard_normal", kl_identity(false, opts.kl_samples, s).map(|r| r.verdict())),
        CheckReport::from_result("kl_shifted_mean", kl_identity(true, opts.kl_samples, s).map(|r| r.verdict())),
        CheckReport::from_result("causality_posterior", causality(Stage::Posterior, s)),
        CheckReport::from_result("causality_prior", causality(Stage::Prior, s)),
        CheckReport::from_result("causality_decoder", causality(Stage::Decoder, s)),
        CheckReport::from_result("attention_rows_sum_to_one", attention_rows(s)),
        CheckReport::from_result("reduce_expand_round_trip", reduce_expand(s)),
    ]
}

fn small_attention() -> AttentionConfig {
    AttentionConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        dropout_rate: 0.0,
    }
}

/// A two-block prior with every parameter perturbed away from its identity initialization.
fn random_prior(d_z: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore, GlowPrior)> {
    let mut store = ParamStore::new();
    let prior = GlowPrior::new(&mut store, "prior", d_z, 2, 1, &small_attention(), true, rng)?;
    store.perturb("prior", 0.1, rng);
    Ok((store, prior))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTripSummary {
    pub instances: usize,
    pub max_error: f64,
    pub max_logdet_sum: f64,
}

impl RoundTripSummary {
    pub fn passed(&self) -> bool {
        self.max_error < ROUND_TRIP_TOL && self.max_logdet_sum < ROUND_TRIP_TOL
    }

    fn verdict(&self) -> (bool, String) {
        (
            self.passed(),
            format!(
                "{} instances, max |inv(fwd(u)) - u| = {:.3e}, max |logdet_fwd + logdet_inv| = {:.3e}",
                self.instances, self.max_error, self.max_logdet_sum
            ),
        )
    }
}

/// Sample→density round trips. `d_z` alternates between 4 and 32.
pub fn flow_round_trip(instances: usize, seed: u64) -> Result<RoundTripSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10f);
    let mut max_error: f64 = 0.0;
    let mut max_logdet_sum: f64 = 0.0;
    for k in 0..instances {
        let d_z = if k % 2 == 0 { 4 } else { 32 };
        let (store, prior) = random_prior(d_z, &mut rng)?;
        let frames = rng.gen_range(1..=6);
        let chars = rng.gen_range(1..=5);
        let ctx = Ctx::eval(&store);
        let u = Tensor::randn(&[frames, d_z], 1.0, &mut rng);
        let memory = ctx.constant(Tensor::randn(&[chars, 8], 1.0, &mut rng));
        let (z, fwd) = prior.forward_with_logdet(&ctx, ctx.constant(u.clone()), memory)?;
        let (back, inv) = prior.inverse(&ctx, z, memory)?;
        max_error = max_error.max(ctx.tape.value(back).max_abs_diff(&u));
        max_logdet_sum = max_logdet_sum.max((ctx.tape.value(fwd).item() + ctx.tape.value(inv).item()).abs());
    }
    Ok(RoundTripSummary {
        instances,
        max_error,
        max_logdet_sum,
    })
}

/// `log|det J|` of `f` at `x` from a central-difference Jacobian.
pub fn brute_force_logdet(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, step: f64) -> Result<f64> {
    let n = x.len();
    let mut jac = Tensor::zeros(&[n, n]);
    for k in 0..n {
        let mut plus = x.clone();
        plus.data_mut()[k] += step;
        let mut minus = x.clone();
        minus.data_mut()[k] -= step;
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        for i in 0..n {
            jac.data_mut()[i * n + k] = (fp.data()[i] - fm.data()[i]) / (2.0 * step);
        }
    }
    linalg::log_abs_det(&jac)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Actnorm,
    Invertible1x1,
    Coupling,
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogdetSummary {
    pub instances: usize,
    pub max_rel_err: f64,
}

impl LogdetSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < LOGDET_TOL
    }

    fn verdict(&self) -> (bool, String) {
        (
            self.passed(),
            format!("{} instances, max rel. err vs brute-force Jacobian = {:.3e}", self.instances, self.max_rel_err),
        )
    }
}

/// Analytic forward logdet of one layer against the brute-force Jacobian,
/// on `[2, 4]` inputs.
pub fn layer_logdet(subject: &Subject, layer: Layer, instances: usize, seed: u64) -> Result<LogdetSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10d3 ^ layer as u64);
    let (frames, d_z) = (2, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (store, prior) = random_prior(d_z, &mut rng)?;
        let block = &prior.blocks[0];
        let memory = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let x = Tensor::randn(&[frames, d_z], 1.0, &mut rng);
        let eval = |x: &Tensor| -> Result<(Tensor, f64)> {
            let ctx = Ctx::eval(&store);
            let t = &ctx.tape;
            let xv = ctx.constant(x.clone());
            let mem = ctx.constant(memory.clone());
            let dir = Direction::Forward;
            let (y, l) = match layer {
                Layer::Actnorm => {
                    (subject.actnorm)(t, xv, ctx.param(&block.actnorm_scale)?, ctx.param(&block.actnorm_bias)?, dir)?
                }
                Layer::Invertible1x1 => (subject.invertible_1x1)(t, xv, ctx.param(&block.perm_weight)?, dir)?,
                Layer::Coupling => coupling_forward(&block.coupling, &ctx, xv, mem)?,
                Layer::Block => block.forward(&ctx, xv, mem, dir)?,
            };
            let out = (t.value(y).clone(), t.value(l).item());
            Ok(out)
        };
        let (_, analytic) = eval(&x)?;
        let brute = brute_force_logdet(|x| Ok(eval(x)?.0), &x, 1e-6)?;
        worst = worst.max(rel_err(analytic, brute));
    }
    Ok(LogdetSummary {
        instances,
        max_rel_err: worst,
    })
}

fn coupling_forward(c: &AffineCoupling, ctx: &Ctx, x: Var, memory: Var) -> Result<(Var, Var)> {
    c.forward(ctx, x, memory, Direction::Forward)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub scalars: usize,
    pub within_1e4: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckSummary {
    pub fn fraction_within_1e4(&self) -> f64 {
        self.within_1e4 as f64 / self.scalars.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.fraction_within_1e4() >= 0.99 && self.max_rel_err < 1e-3
    }

    fn verdict(&self) -> (bool, String) {
        (
            self.passed(),
            format!(
                "{} scalars, {:.2}% within 1e-4, max rel. err {:.3e} ({})",
                self.scalars,
                100.0 * self.fraction_within_1e4(),
                self.max_rel_err,
                self.worst_param
            ),
        )
    }
}

pub const GRAD_CHECK_TEXT: [usize; 2] = [1, 2];
pub const GRAD_CHECK_FRAMES: usize = 6;
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely. Central differences
/// of an O(1) loss resolve about 1e-11 at this step, and several parameters
/// (key biases, convolution biases ahead of batch norm) have gradients that
/// are exactly zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Every parameter of a width-8 model against central differences of the
/// training loss on a 2-character, 6-frame utterance.
///
/// The length predictor reads a detached copy of the text encoding, so for
/// text-encoder parameters the finite-difference objective omits the
/// length term.
pub fn gradient_check(seed: u64) -> Result<GradCheckSummary> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::new();
    let model = Vaenar::new(cfg.clone(), &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ad);
    store.perturb("prior", 0.1, &mut rng);
    let y = Tensor::randn(&[GRAD_CHECK_FRAMES, cfg.n_bins], 1.0, &mut rng);
    let r = 2;
    let noise = model.latent_noise(GRAD_CHECK_FRAMES, r, &mut rng);
    let (alpha, beta) = (0.5, 1.0);
    let ids = GRAD_CHECK_TEXT;

    let ctx = Ctx::train(&store, 0);
    let out = model.compute_loss(&ctx, &ids, &y, &noise, r, alpha, beta)?;
    let grads = ctx.param_grads(&ctx.tape.backward(out.loss)?);
    drop(ctx);

    let mut summary = GradCheckSummary {
        scalars: 0,
        within_1e4: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    let names: Vec<String> = store.params().keys().cloned().collect();
    for name in names {
        let base = store.get(&name).expect("listed").clone();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let text_param = name.starts_with("text.");
        let mut probe = store.clone();
        let fd = finite_diff_grad(
            |p| {
                *probe.get_mut(&name).expect("listed") = p.clone();
                let c = Ctx::train(&probe, 0);
                let b = model
                    .compute_loss(&c, &ids, &y, &noise, r, alpha, beta)
                    .expect("same shapes as the analytic pass")
                    .breakdown;
                if text_param {
                    b.total - beta * b.length_loss
                } else {
                    b.total
                }
            },
            &base,
            GRAD_CHECK_STEP,
        );
        for (&a, &f) in analytic.data().iter().zip(fd.data()) {
            let e = rel_err_floored(a, f, GRAD_CHECK_FLOOR);
            summary.scalars += 1;
            if e < 1e-4 {
                summary.within_1e4 += 1;
            }
            if e > summary.max_rel_err {
                summary.max_rel_err = e;
                summary.worst_param = name.clone();
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlSummary {
    pub samples: usize,
    pub mean: f64,
    pub std_err: f64,
    pub expected: f64,
}

impl KlSummary {
    pub fn passed(&self) -> bool {
        (self.mean - self.expected).abs() <= 3.0 * self.std_err + 1e-9
    }

    fn verdict(&self) -> (bool, String) {
        (
            self.passed(),
            format!(
                "{} samples, mean {:.5} ± {:.5} (std-err), expected {:.5}",
                self.samples, self.mean, self.std_err, self.expected
            ),
        )
    }
}

/// Monte-Carlo KL under an identity-initialized prior. With `shifted`
/// the posterior is `N(μ, I)` and the exact KL is `‖μ‖²/2`; otherwise it is
/// `N(0, I)` and the KL is zero.
pub fn kl_identity(shifted: bool, samples: usize, seed: u64) -> Result<KlSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c1 ^ shifted as u64);
    let (frames, d_z) = (2, 4);
    let mut store = ParamStore::new();
    let prior = GlowPrior::new(&mut store, "prior", d_z, 2, 1, &small_attention(), true, &mut rng)?;
    for b in &prior.blocks {
        *store.get_mut(&b.perm_weight).expect("registered") = Tensor::eye(d_z);
    }
    let memory = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let mu = if shifted {
        Tensor::randn(&[frames, d_z], 0.7, &mut rng)
    } else {
        Tensor::zeros(&[frames, d_z])
    };
    let expected = 0.5 * mu.data().iter().map(|m| m * m).sum::<f64>();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..samples {
        let ctx = Ctx::eval(&store);
        let p = PosteriorParams {
            mean: ctx.constant(mu.clone()),
            log_var: ctx.constant(Tensor::zeros(&[frames, d_z])),
        };
        let eps = Tensor::randn(&[frames, d_z], 1.0, &mut rng);
        let z = ctx.tape.add(p.mean, ctx.constant(eps))?;
        let log_q = posterior_log_density(&ctx, &p, z)?;
        let log_p = prior.log_density(&ctx, z, ctx.constant(memory.clone()))?;
        let est = ctx.tape.value(log_q).item() - ctx.tape.value(log_p).item();
        sum += est;
        sq += est * est;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(KlSummary {
        samples,
        mean,
        std_err: (var / n).sqrt(),
        expected,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Posterior,
    Prior,
    Decoder,
}

fn perturbed_tiny(causal: bool, seed: u64) -> Result<(ParamStore, Vaenar)> {
    let cfg = ModelConfig {
        causal_mask: causal,
        dropout: 0.0,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::new();
    let model = Vaenar::new(cfg, &mut store)?;
    store.perturb("prior", 0.1, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xca5));
    Ok((store, model))
}

/// Rows before `j` bit-identical and row `j` changed. Decoder frames are
/// compared before the PostNet, whose convolutions see both directions.
fn check_prefix(a: &Tensor, b: &Tensor, rows_unchanged: usize, changed_row: usize) -> (bool, String) {
    let w = a.shape()[1];
    let prefix_same = a.data()[..rows_unchanged * w] == b.data()[..rows_unchanged * w];
    let moved = a.row(changed_row) != b.row(changed_row);
    (
        prefix_same && moved,
        format!(
            "{} rows before the perturbation {}, perturbed row {}",
            rows_unchanged,
            if prefix_same { "bit-identical" } else { "CHANGED" },
            if moved { "changed" } else { "unchanged" }
        ),
    )
}

pub fn causality(stage: Stage, seed: u64) -> Result<(bool, String)> {
    let (store, model) = perturbed_tiny(true, seed)?;
    causality_of(&store, &model, stage, seed)
}

/// Perturbs one frame-level input position and compares the outputs of `stage`.
pub fn causality_of(store: &ParamStore, model: &Vaenar, stage: Stage, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de ^ stage as u64);
    let cfg = &model.cfg;
    let r = 2;
    let (frames, j) = (6, 3);
    let ids = [0, 2, 1];
    let ctx = Ctx::eval(store);
    let x = model.encode_text(&ctx, &ids)?;
    let bump = |t: &Tensor, row: usize| {
        let mut p = t.clone();
        let w = p.shape()[1];
        p.data_mut()[row * w..(row + 1) * w].iter_mut().for_each(|v| *v += 0.5);
        p
    };
    let pair = match stage {
        Stage::Posterior => {
            let y = Tensor::randn(&[frames, cfg.n_bins * r], 1.0, &mut rng);
            let a = model.posterior_encode(&ctx, &y, &x, r)?;
            let b = model.posterior_encode(&ctx, &bump(&y, j), &x, r)?;
            let cat = |p: PosteriorParams| -> Result<Tensor> {
                Ok(ctx.tape.value(ctx.tape.concat_cols(&[p.mean, p.log_var])?).clone())
            };
            (cat(a)?, cat(b)?, j)
        }
        Stage::Prior => {
            let u = Tensor::randn(&[frames, cfg.d_z], 1.0, &mut rng);
            let a = model.prior.sample(&ctx, ctx.constant(u.clone()), x.x)?;
            let b = model.prior.sample(&ctx, ctx.constant(bump(&u, j)), x.x)?;
            (ctx.tape.value(a.z).clone(), ctx.tape.value(b.z).clone(), j)
        }
        Stage::Decoder => {
            let z = Tensor::randn(&[frames, cfg.d_z], 1.0, &mut rng);
            let a = model.decode_spectrogram(&ctx, ctx.constant(z.clone()), &x, r, None)?;
            let b = model.decode_spectrogram(&ctx, ctx.constant(bump(&z, j)), &x, r, None)?;
            (ctx.tape.value(a.pre).clone(), ctx.tape.value(b.pre).clone(), j * r)
        }
    };
    Ok(check_prefix(&pair.0, &pair.1, pair.2, pair.2))
}

fn attention_rows(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77);
    let cfg = small_attention();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", &cfg, &mut rng)?;
    let mut worst: f64 = 0.0;
    let mut leaked = false;
    for (tq, tk, causal) in [(5, 5, true), (4, 7, false), (1, 1, true), (6, 2, false)] {
        let ctx = Ctx::eval(&store);
        let q = ctx.constant(Tensor::randn(&[tq, 8], 2.0, &mut rng));
        let kv = ctx.constant(Tensor::randn(&[tk, 8], 2.0, &mut rng));
        let mask = causal.then(|| Mask::causal(tq));
        let (_, w) = mha.forward(&ctx, q, kv, kv, mask.as_ref())?;
        for h in 0..w.n_heads() {
            for i in 0..tq {
                let row = &w.weights.data()[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                if causal {
                    leaked |= row[i + 1..].iter().any(|&v| v != 0.0);
                }
            }
        }
    }
    Ok((
        worst <= 1e-12 && !leaked,
        format!(
            "max |row sum - 1| = {worst:.3e}, masked weights {}",
            if leaked { "NONZERO" } else { "exactly zero" }
        ),
    ))
}

fn reduce_expand(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2ed);
    let mut ok = true;
    let mut cases = 0;
    for n in 1..=12 {
        let y = Tensor::randn(&[n, 3], 1.0, &mut rng);
        for r in 1..=5 {
            ok &= expand_spectrogram(&reduce_spectrogram(&y, r)?, r, n)? == y;
            cases += 1;
        }
    }
    Ok((ok, format!("{cases} (N, r) cases, expand(reduce(y)) {}", if ok { "exact" } else { "DIFFERS" })))
}
