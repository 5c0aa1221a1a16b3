//! Network building blocks shared by the segmenter, the CAM classifier and
//! the feature backbones.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Module, VarBuilder, VarMap};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Re-initialises every variable from a seeded stream so that construction
/// is reproducible (the tensor backend's own CPU generator cannot be seeded).
///
/// Conv and linear weights get He-normal values, 1-D `weight`s (batch-norm
/// scales) and running variances get ones, everything else zeros.
pub(crate) fn reinit_varmap(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let values: Vec<f32> = if name.ends_with("running_var") || (name.ends_with("weight") && dims.len() == 1) {
            vec![1.0; n]
        } else if name.ends_with("weight") {
            let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        var.set(&Tensor::from_vec(values, dims, var.device())?)?;
    }
    Ok(())
}

/// Inverted dropout with a caller-owned generator.
pub(crate) fn dropout(x: &Tensor, drop_prob: f32, rng: &mut impl Rng) -> Result<Tensor> {
    if drop_prob <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - drop_prob;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
    Ok(x.mul(&mask)?)
}

/// RMSprop with the common `rho = 0.9`, `eps = 1e-7` defaults.
pub(crate) struct RmsProp {
    vars: Vec<Var>,
    square_avg: Vec<Tensor>,
    lr: f64,
    rho: f64,
    eps: f64,
}

impl RmsProp {
    pub(crate) fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let square_avg = vars
            .iter()
            .map(|v| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            square_avg,
            lr,
            rho: 0.9,
            eps: 1e-7,
        })
    }

    pub(crate) fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        for (var, avg) in self.vars.iter().zip(self.square_avg.iter_mut()) {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            *avg = ((&*avg * self.rho)? + (grad.sqr()? * (1.0 - self.rho))?)?;
            let step = (grad / (avg.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (step * self.lr)?)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding, as in the reference classification networks.
    Zero,
    /// Edge replication; keeps constant inputs constant through every layer.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TrunkLayer {
    /// Convolution followed by ReLU.
    Conv { out: usize, kernel: usize },
    /// 2x2 max pooling, stride 2, ceil mode.
    Pool,
}

/// Plain convolutional trunk description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub in_channels: usize,
    pub layers: Vec<TrunkLayer>,
    pub padding: Padding,
}

impl TrunkSpec {
    /// The thirteen convolutions of VGG-16 up to and including conv5_3.
    pub fn vgg16_conv5_3() -> Self {
        use TrunkLayer::{Conv, Pool};
        let c = |out| Conv { out, kernel: 3 };
        Self {
            in_channels: 3,
            layers: vec![
                c(64), c(64), Pool,
                c(128), c(128), Pool,
                c(256), c(256), c(256), Pool,
                c(512), c(512), c(512), Pool,
                c(512), c(512), c(512),
            ],
            padding: Padding::Zero,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                TrunkLayer::Conv { out, .. } => Some(*out),
                TrunkLayer::Pool => None,
            })
            .unwrap_or(self.in_channels)
    }

    /// Spatial size of the output for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> usize {
        self.layers.iter().fold(input, |side, l| match l {
            TrunkLayer::Pool => side.div_ceil(2),
            TrunkLayer::Conv { .. } => side,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels() == 0 || !self.layers.iter().any(|l| matches!(l, TrunkLayer::Conv { .. })) {
            return Err(Error::InvalidConfig("trunk needs at least one convolution".into()));
        }
        for layer in &self.layers {
            if let TrunkLayer::Conv { out, kernel } = layer {
                if *out == 0 || kernel % 2 == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "conv layers need positive width and odd kernel, got {out}x{kernel}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Convolutions named `features.{i}` with the slot numbering of the common
/// VGG checkpoints (each conv also occupies a ReLU slot, each pool one slot).
pub struct ConvTrunk {
    spec: TrunkSpec,
    convs: Vec<Conv2d>,
}

impl ConvTrunk {
    pub fn new(spec: TrunkSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut channels = spec.in_channels;
        let mut slot = 0usize;
        for layer in &spec.layers {
            match *layer {
                TrunkLayer::Conv { out, kernel } => {
                    let padding = match spec.padding {
                        Padding::Zero => kernel / 2,
                        Padding::Replicate => 0,
                    };
                    let cfg = Conv2dConfig {
                        padding,
                        ..Default::default()
                    };
                    convs.push(candle_nn::conv2d(
                        channels,
                        out,
                        kernel,
                        cfg,
                        vb.pp(format!("features.{slot}")),
                    )?);
                    channels = out;
                    slot += 2;
                }
                TrunkLayer::Pool => slot += 1,
            }
        }
        Ok(Self { spec, convs })
    }

    pub fn spec(&self) -> &TrunkSpec {
        &self.spec
    }

    /// `(B, C, H, W)` in, `(B, K, H', W')` out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let mut convs = self.convs.iter();
        for layer in &self.spec.layers {
            match *layer {
                TrunkLayer::Conv { kernel, .. } => {
                    let conv = convs.next().expect("one conv per conv layer");
                    if self.spec.padding == Padding::Replicate && kernel > 1 {
                        let p = kernel / 2;
                        x = x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?;
                    }
                    x = conv.forward(&x)?.relu()?;
                }
                TrunkLayer::Pool => {
                    // activations are post-ReLU, so zero padding reproduces ceil-mode pooling
                    let (_, _, h, w) = x.dims4()?;
                    if h % 2 == 1 {
                        x = x.pad_with_zeros(2, 0, 1)?;
                    }
                    if w % 2 == 1 {
                        x = x.pad_with_zeros(3, 0, 1)?;
                    }
                    x = x.max_pool2d(2)?;
                }
            }
        }
        Ok(x)
    }
}

pub(crate) fn new_varmap() -> (VarMap, Device) {
    (VarMap::new(), Device::Cpu)
}

pub(crate) fn var_builder<'a>(varmap: &'a VarMap, device: &'a Device) -> VarBuilder<'a> {
    VarBuilder::from_varmap(varmap, DType::F32, device)
}

/// Copies every variable so a training run can roll back to its best epoch.
pub(crate) fn snapshot(varmap: &VarMap) -> Result<Vec<(String, Tensor)>> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

pub(crate) fn restore(varmap: &VarMap, saved: &[(String, Tensor)]) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    for (name, tensor) in saved {
        if let Some(var) = data.get(name) {
            var.set(tensor)?;
        }
    }
    Ok(())
}

/// Loads weights saved by [`VarMap::save`], reporting missing or misshapen
/// tensors as an architecture mismatch.
pub(crate) fn load_weights(varmap: &mut VarMap, path: &std::path::Path) -> Result<()> {
    varmap.load(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("weights do not match the architecture: {e}"),
    })
}

/// Fingerprint of the current weights (FNV-1a over names, shapes and bits).
pub(crate) fn weights_checksum(varmap: &VarMap) -> Result<String> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for name in names {
        let t = data[name].as_tensor();
        eat(name.as_bytes());
        for d in t.dims() {
            eat(&(*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            eat(&v.to_le_bytes());
        }
    }
    Ok(format!("{hash:016x}"))
}

/// Spatial mean of `(B, K, H, W)` -> `(B, K)`.
pub(crate) fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_spec_shapes() {
        let spec = TrunkSpec::vgg16_conv5_3();
        assert_eq!(spec.out_channels(), 512);
        assert_eq!(spec.output_side(300), 19);
        assert_eq!(spec.output_side(224), 14);
    }

    #[test]
    fn reinit_is_reproducible() {
        let build = || {
            let (vm, dev) = new_varmap();
            let spec = TrunkSpec {
                in_channels: 3,
                layers: vec![TrunkLayer::Conv { out: 4, kernel: 3 }],
                padding: Padding::Zero,
            };
            let _trunk = ConvTrunk::new(spec, var_builder(&vm, &dev)).unwrap();
            reinit_varmap(&vm, 11).unwrap();
            weights_checksum(&vm).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn replicate_trunk_keeps_constant_input_constant() {
        let (vm, dev) = new_varmap();
        let spec = TrunkSpec {
            in_channels: 3,
            layers: vec![
                TrunkLayer::Conv { out: 4, kernel: 3 },
                TrunkLayer::Pool,
                TrunkLayer::Conv { out: 5, kernel: 3 },
            ],
            padding: Padding::Replicate,
        };
        let trunk = ConvTrunk::new(spec, var_builder(&vm, &dev)).unwrap();
        reinit_varmap(&vm, 3).unwrap();
        let x = Tensor::full(0.3f32, (1, 3, 9, 9), &dev).unwrap();
        let y = trunk.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 5, 5, 5]);
        let v = y.flatten_from(2).unwrap().to_vec3::<f32>().unwrap();
        for channel in &v[0] {
            assert!(channel.iter().all(|c| (c - channel[0]).abs() < 1e-6));
        }
    }

    #[test]
    fn rmsprop_reduces_quadratic() {
        let (vm, dev) = new_varmap();
        let vb = var_builder(&vm, &dev);
        let w = vb
            .get_with_hints(2, "w", candle_nn::Init::Const(3.0))
            .unwrap();
        let mut opt = RmsProp::new(vm.all_vars(), 0.05).unwrap();
        let first = w.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        for _ in 0..20 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let last = w.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(last < first * 0.5);
    }
}
