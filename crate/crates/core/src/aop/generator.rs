use candle_core::{Device, Tensor};
use rand::Rng;

use super::{GeneratorSpec, OutputMode};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, BatchNorm2d, Conv2d, Init, ParamStore};

const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };

struct EncoderStage {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

struct DecoderStage {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

/// U-net generator. Each encoder stage halves the resolution with a 4×4
/// stride-2 convolution; each decoder stage doubles it with nearest-neighbour
/// upsampling followed by a 3×3 convolution, then concatenates the matching
/// encoder features.
pub struct Generator {
    spec: GeneratorSpec,
    output_mode: OutputMode,
    store: ParamStore,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, output_mode: OutputMode, device: &Device, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(device);
        let widths = spec.encoder_channels();
        let depth = spec.depth;

        let mut encoder = Vec::with_capacity(depth);
        let mut c_in = 3;
        for (i, &c) in widths.iter().enumerate() {
            let name = format!("enc{i}");
            let conv = Conv2d::new(&mut store, &format!("{name}.conv"), c_in, c, 4, 2, 1, true, WEIGHT_INIT, rng)?;
            // outermost and innermost stages are unnormalized
            let norm = if i == 0 || i == depth - 1 {
                None
            } else {
                Some(BatchNorm2d::new(&mut store, &format!("{name}.bn"), c, rng)?)
            };
            encoder.push(EncoderStage { conv, norm });
            c_in = c;
        }

        let mut decoder = Vec::with_capacity(depth);
        for j in 0..depth {
            let name = format!("dec{j}");
            let last = j == depth - 1;
            let c_out = if last { output_mode.channels() } else { widths[depth - 2 - j] };
            let conv = Conv2d::new(&mut store, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, true, WEIGHT_INIT, rng)?;
            let norm = if last { None } else { Some(BatchNorm2d::new(&mut store, &format!("{name}.bn"), c_out, rng)?) };
            decoder.push(DecoderStage { conv, norm });
            // next stage sees this output concatenated with the skip features
            c_in = if last { 0 } else { c_out * 2 };
        }
        Ok(Self { spec, output_mode, store, encoder, decoder })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Maps `(N, 3, H, W)` to `(N, k, H, W)` with values in `(0, 1)`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.spec.size_multiple();
        if c != 3 {
            return Err(Error::InvalidInput(format!("generator expects 3 channels, got {c}")));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidInput(format!("generator input {h}x{w} is not divisible by {m}")));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h_t = x.clone();
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                h_t = leaky_relu(&h_t, 0.2)?;
            }
            h_t = stage.conv.forward(&h_t)?;
            if let Some(bn) = &stage.norm {
                h_t = bn.forward_t(&h_t, train)?;
            }
            skips.push(h_t.clone());
        }
        let depth = self.decoder.len();
        for (j, stage) in self.decoder.iter().enumerate() {
            h_t = h_t.relu()?;
            let (_, _, hh, ww) = h_t.dims4()?;
            h_t = stage.conv.forward(&h_t.upsample_nearest2d(hh * 2, ww * 2)?)?;
            if let Some(bn) = &stage.norm {
                h_t = bn.forward_t(&h_t, train)?;
            }
            if j + 1 < depth {
                h_t = Tensor::cat(&[&h_t, &skips[depth - 2 - j]], 1)?;
            }
        }
        sigmoid(&h_t)
    }
}
