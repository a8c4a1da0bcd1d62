//! Minimal layer toolkit on top of candle tensors: named parameter store with
//! seeded initialization, convolution / batch-norm / linear layers, and the
//! two optimizers used by the training loops.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { mean: f64, std: f64 },
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    Uniform { bound: f64 },
}

impl Init {
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f32> {
        match *self {
            Init::Const(v) => vec![v as f32; n],
            Init::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("finite std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
            Init::Kaiming { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
        }
    }
}

/// Named trainable parameters plus non-trainable buffers (batch-norm statistics).
/// Ordering is by name, so serialization and optimizer traversal are deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self { device: device.clone(), params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor> {
        let n = shape.iter().product();
        let t = Tensor::from_vec(init.sample(n, rng), shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.params.insert(name.to_owned(), var).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, init: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&init)?;
        if self.buffers.insert(name.to_owned(), var.clone()).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate buffer {name}")));
        }
        Ok(var)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Copies values into existing variables. Every name in the store must be
    /// present in `source` with an identical shape.
    pub fn load(&self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        let diffs = self.shape_diff(source, |_| true);
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!("incompatible weights: {}", diffs.join("; "))));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            var.set(&source[name].to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Loads only the entries whose name satisfies `filter`.
    pub fn load_subset(&self, source: &BTreeMap<String, Tensor>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let diffs = self.shape_diff(source, &filter);
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!("incompatible weights: {}", diffs.join("; "))));
        }
        let mut n = 0;
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            if filter(name) {
                var.set(&source[name].to_dtype(DType::F32)?.to_device(&self.device)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn shape_diff(&self, source: &BTreeMap<String, Tensor>, filter: impl Fn(&str) -> bool) -> Vec<String> {
        let mut diffs = Vec::new();
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            if !filter(name) {
                continue;
            }
            match source.get(name) {
                None => diffs.push(format!("{name}: missing, expected {:?}", var.dims())),
                Some(t) if t.dims() != var.dims() => {
                    diffs.push(format!("{name}: found {:?}, expected {:?}", t.dims(), var.dims()))
                }
                Some(_) => {}
            }
        }
        diffs
    }
}

mod batchnorm;
mod conv;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    /// Zeros when the layer was built without a trainable bias.
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        weight_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], weight_init, rng)?;
        let bias = if bias {
            store.param(&format!("{name}.bias"), &[out_channels], Init::Const(0.0), rng)?
        } else {
            Tensor::zeros(out_channels, DType::F32, store.device())?
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::InvalidInput(format!("conv expects {} channels, got {c}", self.in_channels())));
        }
        Ok(conv::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)?)
    }
}

/// Spatial batch normalization: batch statistics in train mode, running statistics in eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[channels], Init::Const(1.0), rng)?;
        let bias = store.param(&format!("{name}.bias"), &[channels], Init::Const(0.0), rng)?;
        let dev = store.device().clone();
        let running_mean = store.buffer(&format!("{name}.running_mean"), Tensor::zeros(channels, DType::F32, &dev)?)?;
        let running_var = store.buffer(&format!("{name}.running_var"), Tensor::ones(channels, DType::F32, &dev)?)?;
        Ok(Self { weight, bias, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        if train {
            let (mean, var) = batchnorm::batch_moments(x)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(batchnorm::batch_norm_train(x, &self.weight, &self.bias, self.eps)?);
        }
        let scale = self.weight.broadcast_div(&(self.running_var.as_detached_tensor() + self.eps)?.sqrt()?)?;
        let shift = (&self.bias - (self.running_mean.as_detached_tensor() * &scale)?)?;
        Ok(batchnorm::channel_affine(x, &scale, &shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[outputs, inputs], init, rng)?;
        let bias = store.param(&format!("{name}.bias"), &[outputs], Init::Const(0.0), rng)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

fn finite_grads(grads: &GradStore, params: &[(String, Var)]) -> Result<()> {
    for (name, var) in params {
        if let Some(g) = grads.get(var.as_tensor()) {
            let s = g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite gradient for {name}")));
            }
        }
    }
    Ok(())
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    params: Vec<(String, Var)>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let params = store.trainable().map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { params, lr, beta1, beta2, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        finite_grads(grads, &self.params)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_detached_tensor() - (update * self.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        optimizer_state(prefix, self.step, &[("m", &self.first), ("v", &self.second)], self.params[0].1.device())
    }

    pub fn load_state(&mut self, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = read_step(prefix, source)?;
        self.first = read_slots(prefix, "m", source);
        self.second = read_slots(prefix, "v", source);
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum: `v ← μv + g; p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    params: Vec<(String, Var)>,
    lr: f64,
    momentum: f64,
    step: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl MomentumSgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let params = store.trainable().map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { params, lr, momentum, step: 0, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        finite_grads(grads, &self.params)?;
        self.step += 1;
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let v = match self.velocity.get(name) {
                Some(v) => ((v * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_detached_tensor() - (&v * self.lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        optimizer_state(prefix, self.step, &[("velocity", &self.velocity)], self.params[0].1.device())
    }

    pub fn load_state(&mut self, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = read_step(prefix, source)?;
        self.velocity = read_slots(prefix, "velocity", source);
        Ok(())
    }
}

fn optimizer_state(
    prefix: &str,
    step: usize,
    slots: &[(&str, &BTreeMap<String, Tensor>)],
    device: &Device,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    out.insert(
        format!("{prefix}.step"),
        Tensor::new(&[step as f32], device).expect("scalar tensor"),
    );
    for (slot, map) in slots {
        for (name, t) in *map {
            out.insert(format!("{prefix}.{slot}.{name}"), t.clone());
        }
    }
    out
}

fn read_step(prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<usize> {
    let t = source
        .get(&format!("{prefix}.step"))
        .ok_or_else(|| Error::Checkpoint(format!("optimizer state {prefix} missing")))?;
    Ok(t.to_vec1::<f32>()?[0] as usize)
}

fn read_slots(prefix: &str, slot: &str, source: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let head = format!("{prefix}.{slot}.");
    source
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&head).map(|n| (n.to_owned(), v.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut store = ParamStore::new(&Device::Cpu);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            store.param("w", &[3, 4], Init::Kaiming { fan_in: 4 }, &mut rng).unwrap();
            store.tensors()["w"].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2, &mut rng).unwrap();
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let m = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        let rm = store.tensors()["bn.running_mean"].to_vec1::<f32>().unwrap();
        // channel 0 holds 0..4 and 8..12, mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-5);
    }

    #[test]
    fn load_reports_shape_mismatch() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.param("a", &[2, 2], Init::Const(0.0), &mut rng).unwrap();
        let mut src = BTreeMap::new();
        src.insert("a".to_string(), Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap());
        let err = store.load(&src).unwrap_err().to_string();
        assert!(err.contains("a: found [3, 2], expected [2, 2]"), "{err}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.param("w", &[1], Init::Const(3.0), &mut rng).unwrap();
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..300 {
            opt.backward_step(&w.sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        assert!(w.to_vec1::<f32>().unwrap()[0].abs() < 0.05);
    }

    #[test]
    fn momentum_sgd_matches_hand_recurrence() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.param("w", &[1], Init::Const(1.0), &mut rng).unwrap();
        let mut opt = MomentumSgd::new(&store, 0.1, 0.9);
        // loss = w^2 / 2, gradient w
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            opt.backward_step(&(w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap()).unwrap();
            v = 0.9 * v + p;
            p -= 0.1 * v;
        }
        assert!((w.to_vec1::<f32>().unwrap()[0] as f64 - p).abs() < 1e-6);
    }
}
