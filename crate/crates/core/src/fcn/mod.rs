//! Fully convolutional heat-map regressor with a hand-written backward pass.

mod checkpoint;
mod target;
mod train;

pub use checkpoint::{read_kfcn, write_kfcn, KFCN_MAGIC};
pub use target::{fcn_loss, gaussian_target, gaussian_targets};
pub use train::{fcn_train, loss_log_csv, parse_loss_log, write_loss_log, EpochLoss, FcnTrainConfig, FcnTrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DepthImage;
use crate::error::{Error, Result};
use crate::nn::{all_finite, relu_backward, relu_inplace, Conv2d, ConvGeom, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Layer stack of the heat-map network, input is a single depth channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnArch {
    pub layers: Vec<LayerSpec>,
}

impl FcnArch {
    /// Six 3x3 layers, channels 1-8-16-16-32-32-k, ReLU between layers and
    /// a linear output; heat maps come out at 1/4 resolution.
    pub fn desk_scale(k: usize) -> Self {
        Self::from_widths(&[8, 16, 16, 32, 32], k)
    }

    /// 3x3 layers with the given hidden widths followed by the K-channel
    /// output layer. The first two layers have stride 2.
    pub fn from_widths(hidden: &[usize], k: usize) -> Self {
        let widths = hidden.iter().copied().chain(std::iter::once(k));
        let last = hidden.len();
        let layers = widths
            .enumerate()
            .map(|(i, c)| LayerSpec {
                out_channels: c,
                kernel: 3,
                stride: if i < 2 { 2 } else { 1 },
                pad: 1,
                relu: i != last,
            })
            .collect();
        FcnArch { layers }
    }

    pub fn downsample(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::config(format!("layer {i} has a zero dimension")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnLayer<T> {
    pub conv: Conv2d<T>,
    pub relu: bool,
}

/// Network parameters; the last layer's channel count is the number of
/// body parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnParams<T = f32> {
    pub layers: Vec<FcnLayer<T>>,
}

impl<T: Real> FcnParams<T> {
    pub fn init(arch: &FcnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 1;
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let mut conv = Conv2d::he(&mut rng, in_c, l.out_channels, l.kernel, l.stride, l.pad);
                if !l.relu {
                    // Linear heads start near zero.
                    conv.weight.iter_mut().for_each(|w| *w *= T::lit(0.1));
                }
                in_c = l.out_channels;
                FcnLayer { conv, relu: l.relu }
            })
            .collect();
        Ok(FcnParams { layers })
    }

    pub fn zeros(arch: &FcnArch) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        p.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = T::zero()));
        Ok(p)
    }

    pub fn arch(&self) -> FcnArch {
        FcnArch {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    out_channels: l.conv.out_c,
                    kernel: l.conv.kh,
                    stride: l.conv.stride,
                    pad: l.conv.pad,
                    relu: l.relu,
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.out_c)
    }

    pub fn downsample(&self) -> usize {
        self.layers.iter().map(|l| l.conv.stride).product()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut in_c = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.conv.in_c != in_c {
                return Err(Error::contract(format!(
                    "layer {i} expects {} input channels, previous layer gives {in_c}",
                    l.conv.in_c
                )));
            }
            if !all_finite(&l.conv.weight) || !all_finite(&l.conv.bias) {
                return Err(Error::Numeric(format!("parameters of layer {i}")));
            }
            in_c = l.conv.out_c;
        }
        if self.layers.is_empty() {
            return Err(Error::contract("network has no layers"));
        }
        Ok(())
    }

    /// Weight and bias slices of every layer, in layer order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.conv.weight.as_slice(), l.conv.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.conv.weight.as_mut_slice(), l.conv.bias.as_mut_slice()])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        FcnParams {
            layers: self
                .layers
                .iter()
                .map(|l| FcnLayer {
                    conv: l.conv.zeros_like(),
                    relu: l.relu,
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FcnParams<U> {
        FcnParams {
            layers: self
                .layers
                .iter()
                .map(|l| FcnLayer {
                    conv: l.conv.cast(),
                    relu: l.relu,
                })
                .collect(),
        }
    }

    /// `self += a * other`, used to accumulate batch gradients.
    pub fn add_scaled(&mut self, other: &Self, a: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * *s;
            }
        }
    }

    /// Output map size for an input of `h x w`.
    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for l in &self.layers {
            let g = l.conv.geom(1, h, w)?;
            h = g.oh;
            w = g.ow;
        }
        Some((h, w))
    }

    /// Sign pattern of every ReLU pre-activation, used to detect when a
    /// finite-difference probe crosses a kink.
    pub fn relu_pattern(&self, img: &DepthImage) -> Result<Vec<bool>> {
        let cache = forward_cached(self, img)?;
        Ok(cache
            .layers
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.relu)
            .flat_map(|(c, _)| c.pre.iter().map(|v| *v > T::zero()).collect::<Vec<_>>())
            .collect())
    }
}

/// K confidence maps of identical shape; map pixel `(x, y)` corresponds to
/// image pixel `(x * stride, y * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapStack<T = f32> {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Real> HeatMapStack<T> {
    pub fn new(k: usize, width: usize, height: usize, stride: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != k * width * height {
            return Err(Error::contract("heat map data does not match its shape"));
        }
        if stride == 0 {
            return Err(Error::contract("heat map stride must be >= 1"));
        }
        Ok(HeatMapStack {
            k,
            width,
            height,
            stride,
            data,
        })
    }

    pub fn map(&self, k: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, x: usize, y: usize) -> T {
        self.map(k)[y * self.width + x]
    }
}

/// Zero-mean, unit-variance copy of the raster; constant images map to 0.
pub fn normalize_input<T: Real>(img: &DepthImage) -> Vec<T> {
    let d = img.depth();
    let n = d.len() as f64;
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![T::zero(); d.len()];
    }
    d.iter().map(|&v| T::lit((v as f64 - mean) / std)).collect()
}

pub(crate) struct LayerCache<T> {
    cols: Vec<T>,
    geom: ConvGeom,
    pre: Vec<T>,
    /// Output after the activation.
    out: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    maps: HeatMapStack<T>,
}

pub(crate) fn forward_cached<T: Real>(params: &FcnParams<T>, img: &DepthImage) -> Result<ForwardCache<T>> {
    let (mut h, mut w) = (img.height() as usize, img.width() as usize);
    let mut x = normalize_input::<T>(img);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        let g = l.conv.geom(1, h, w).ok_or_else(|| {
            Error::contract(format!("{w}x{h} input is smaller than the receptive field at layer {i}"))
        })?;
        let (pre, cols) = l.conv.forward(&x, g);
        let mut out = pre.clone();
        if l.relu {
            relu_inplace(&mut out);
        }
        if !all_finite(&out) {
            return Err(Error::Numeric(format!("activations of layer {i}")));
        }
        layers.push(LayerCache {
            cols,
            geom: g,
            pre,
            out: out.clone(),
        });
        x = out;
        h = g.oh;
        w = g.ow;
    }
    let maps = HeatMapStack::new(params.k(), w, h, params.downsample(), x)?;
    Ok(ForwardCache { layers, maps })
}

pub fn fcn_forward<T: Real>(img: &DepthImage, params: &FcnParams<T>) -> Result<HeatMapStack<T>> {
    params.validate()?;
    Ok(forward_cached(params, img)?.maps)
}

/// Loss for one image and its exact gradient with respect to every
/// parameter. `targets` holds the K target maps back to back.
pub fn fcn_backward<T: Real>(img: &DepthImage, params: &FcnParams<T>, targets: &[T]) -> Result<(f64, FcnParams<T>)> {
    let cache = forward_cached(params, img)?;
    let loss = fcn_loss(&cache.maps, targets)?;
    let mut grad = params.zeros_like();
    let two = T::lit(2.0);
    let mut dy: Vec<T> = cache.maps.data.iter().zip(targets).map(|(z, t)| two * (*z - *t)).collect();
    for (i, (layer, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        if layer.relu {
            relu_backward(&mut dy, &c.out);
        }
        let dx = layer.conv.backward(&dy, &c.cols, c.geom, &mut grad.layers[i].conv, i > 0);
        if let Some(dx) = dx {
            dy = dx;
        }
    }
    Ok((loss, grad))
}
