//! Named parameter storage, the per-pass forward context, and the basic
//! layers (linear, conv, normalization, embedding, dropout) built on the tape.

use crate::error::{Error, Result};
use crate::tensor::{Grads, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Trainable parameters plus non-trainable buffers (batch-norm running stats),
/// both keyed by hierarchical dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Add Gaussian noise of `std` to every parameter whose name starts with `prefix`.
    pub fn perturb<R: Rng + ?Sized>(&mut self, prefix: &str, std: f64, rng: &mut R) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                for v in t.data_mut() {
                    *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
    }
}

/// Running-statistic observations produced by batch norm in training mode.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    pub entries: BTreeMap<String, (Tensor, Tensor)>,
}

/// One forward pass: owns the tape, binds store parameters to tape leaves on
/// first use, and carries the train/eval switch and dropout RNG.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: RefCell<BTreeMap<String, Var>>,
    train: bool,
    track_grads: bool,
    rng: RefCell<ChaCha8Rng>,
    stats: RefCell<BatchStats>,
}

impl<'a> Ctx<'a> {
    /// Training pass: dropout active, batch-norm uses per-sequence statistics.
    pub fn train(store: &'a ParamStore, seed: u64) -> Self {
        Self::build(store, true, true, seed)
    }

    /// Evaluation pass: dropout off, running statistics, parameters untracked.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(store, false, false, 0)
    }

    /// Evaluation semantics with parameters tracked for gradients.
    pub fn eval_tracked(store: &'a ParamStore) -> Self {
        Self::build(store, false, true, 0)
    }

    fn build(store: &'a ParamStore, train: bool, track_grads: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: RefCell::new(BTreeMap::new()),
            train,
            track_grads,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stats: RefCell::new(BatchStats::default()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.track_grads {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, data)?);
        self.tape.mul(x, mask)
    }

    pub fn record_stats(&self, name: &str, mean: Tensor, var: Tensor) {
        self.stats.borrow_mut().entries.insert(name.to_string(), (mean, var));
    }

    pub fn take_stats(&self) -> BatchStats {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    /// Gradients of every parameter that took part in this pass.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, &self.tape.shape(v))))
            .collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).copied()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    XavierUniform,
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::uniform(shape, bound, rng)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut R) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), init_tensor(&[in_dim, out_dim], in_dim, out_dim, init, rng));
        store.insert(bias.clone(), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = ctx.param(&self.bias)?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: String,
    bias: String,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(
            weight.clone(),
            init_tensor(&[kernel, in_ch, out_ch], kernel * in_ch, kernel * out_ch, Init::XavierUniform, rng),
        );
        store.insert(bias.clone(), Tensor::zeros(&[out_ch]));
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = ctx.param(&self.bias)?;
        let y = ctx.tape.conv1d(x, w)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(gamma.clone(), Tensor::ones(&[dim]));
        store.insert(beta.clone(), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma)?;
        let b = ctx.param(&self.beta)?;
        ctx.tape.layer_norm(x, g, b)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the time axis of a `[T, C]` sequence.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    name: String,
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let bn = Self {
            name: name.to_string(),
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
        };
        store.insert(bn.gamma.clone(), Tensor::ones(&[channels]));
        store.insert(bn.beta.clone(), Tensor::zeros(&[channels]));
        store.insert_buffer(bn.running_mean.clone(), Tensor::zeros(&[channels]));
        store.insert_buffer(bn.running_var.clone(), Tensor::ones(&[channels]));
        bn
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let t = &ctx.tape;
        let g = ctx.param(&self.gamma)?;
        let b = ctx.param(&self.beta)?;
        let xhat = if ctx.is_train() {
            let mean = t.mean_rows(x)?;
            let centered = t.sub(x, mean)?;
            let var = t.mean_rows(t.square(centered))?;
            ctx.record_stats(&self.name, t.value(mean).clone(), t.value(var).clone());
            let inv = t.powf(t.add_scalar(var, BN_EPS), -0.5);
            t.mul(centered, inv)?
        } else {
            let store = ctx.store();
            let missing = || Error::Config(format!("missing buffer for `{}`", self.name));
            let rm = store.buffer(&self.running_mean).ok_or_else(missing)?;
            let rv = store.buffer(&self.running_var).ok_or_else(missing)?;
            let mean = t.constant(rm.clone());
            let inv = t.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
            t.mul(t.sub(x, mean)?, inv)?
        };
        t.add(t.mul(xhat, g)?, b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Fold averaged per-pass statistics into the running buffers.
pub fn update_running_stats(store: &mut ParamStore, observed: &[BatchStats]) {
    if observed.is_empty() {
        return;
    }
    let names: Vec<String> = observed[0].entries.keys().cloned().collect();
    for name in names {
        let parts: Vec<&(Tensor, Tensor)> = observed.iter().filter_map(|s| s.entries.get(&name)).collect();
        let n = parts.len() as f64;
        let c = parts[0].0.len();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (m, v) in &parts {
            for i in 0..c {
                mean[i] += m.data()[i] / n;
                var[i] += v.data()[i] / n;
            }
        }
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            if let Some(buf) = store.buffer_mut(&format!("{name}.{suffix}")) {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = format!("{name}.table");
        store.insert(table.clone(), Tensor::randn(&[vocab, dim], (1.0 / dim as f64).sqrt(), rng));
        Self { table, vocab }
    }

    pub fn forward(&self, ctx: &Ctx, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Input(format!("symbol id {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = ctx.param(&self.table)?;
        ctx.tape.gather_rows(table, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_disabled_in_eval_and_scaled_in_train() {
        let store = ParamStore::new();
        let ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::ones(&[100]));
        assert_eq!(ctx.dropout(x, 0.5).unwrap(), x);

        let ctx = Ctx::train(&store, 1);
        let x = ctx.constant(Tensor::ones(&[1000]));
        let y = ctx.dropout(x, 0.25).unwrap();
        let vals = ctx.tape.value(y).clone();
        assert!(vals.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let kept = vals.data().iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn params_bind_once_per_pass() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 2, Init::XavierUniform, &mut rng);
        let ctx = Ctx::train(&store, 0);
        let x = ctx.constant(Tensor::ones(&[4, 3]));
        let a = lin.forward(&ctx, x).unwrap();
        let b = lin.forward(&ctx, x).unwrap();
        let loss = ctx.tape.sum(ctx.tape.add(a, b).unwrap());
        let g = ctx.param_grads(&ctx.tape.backward(loss).unwrap());
        // Two uses accumulate: d/dbias = 2 * rows.
        assert_eq!(g["l.bias"].data(), &[8.0, 8.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn batch_norm_train_normalizes_and_eval_uses_buffers() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]]).unwrap();
        let ctx = Ctx::train(&store, 0);
        let y = bn.forward(&ctx, ctx.constant(x.clone())).unwrap();
        let yv = ctx.tape.value(y).clone();
        assert!((yv.get2(0, 0) + yv.get2(1, 0)).abs() < 1e-12);
        let stats = ctx.take_stats();
        update_running_stats(&mut store, &[stats]);
        assert!((store.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);

        let ectx = Ctx::eval(&store);
        let y = bn.forward(&ectx, ectx.constant(x)).unwrap();
        assert!(ectx.tape.value(y).is_finite());
    }

    #[test]
    fn embedding_rejects_unknown_ids() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = Embedding::new(&mut store, "e", 4, 3, &mut rng);
        let ctx = Ctx::eval(&store);
        assert!(emb.forward(&ctx, &[0, 3]).is_ok());
        assert!(matches!(emb.forward(&ctx, &[4]), Err(Error::Input(_))));
    }
}
