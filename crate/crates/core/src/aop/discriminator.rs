use candle_core::{Device, Tensor};
use rand::Rng;

use super::DiscriminatorSpec;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, BatchNorm2d, Conv2d, Init, ParamStore};

const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };

struct Layer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

/// Conditional patch discriminator over `(input, candidate)` channel concatenations.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    in_channels: usize,
    store: ParamStore,
    layers: Vec<Layer>,
}

fn layer_stride(spec: &DiscriminatorSpec, i: usize) -> usize {
    if i + 2 < spec.depth {
        2
    } else {
        1
    }
}

/// Output grid side for an input side, using `out = (in + 2·1 − 4) / stride + 1` per layer.
pub fn patch_grid_size(spec: &DiscriminatorSpec, side: usize) -> usize {
    (0..spec.depth).fold(side, |s, i| (s + 2).saturating_sub(4) / layer_stride(spec, i) + 1)
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, in_channels: usize, device: &Device, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(device);
        let mut layers = Vec::with_capacity(spec.depth);
        let mut c_in = in_channels;
        for i in 0..spec.depth {
            let last = i + 1 == spec.depth;
            let c_out = if last { 1 } else { (spec.base_channels << i.min(30)).min(spec.max_channels) };
            let conv = Conv2d::new(&mut store, &format!("layer{i}.conv"), c_in, c_out, 4, layer_stride(&spec, i), 1, true, WEIGHT_INIT, rng)?;
            let norm = if i == 0 || last { None } else { Some(BatchNorm2d::new(&mut store, &format!("layer{i}.bn"), c_out, rng)?) };
            layers.push(Layer { conv, norm });
            c_in = c_out;
        }
        Ok(Self { spec, in_channels, store, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Patch probabilities `(N, 1, h', w')` for a conditioning input and a candidate output.
    pub fn forward_t(&self, input: &Tensor, candidate: &Tensor, train: bool) -> Result<Tensor> {
        let x = Tensor::cat(&[input, candidate], 1)?;
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::InvalidInput(format!("discriminator expects {} channels, got {c}", self.in_channels)));
        }
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(&h)?;
            if let Some(bn) = &layer.norm {
                h = bn.forward_t(&h, train)?;
            }
            if i + 1 < n {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        sigmoid(&h)
    }
}
