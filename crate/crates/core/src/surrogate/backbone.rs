//! Residual networks `W_θ₂`: a stack of same-padded convolutions or a small
//! Fourier-layer network, both ending in a zero-initialized 1×1 projection.

use std::sync::Arc;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndtensor::{Padding, SpectralPlan, Tensor, Var};
use crate::noise::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Conv,
    Spectral,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden channels.
    pub width: usize,
    /// Hidden convolution or Fourier layers.
    pub layers: usize,
    /// Convolution kernel extent (conv backbone).
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Retained Fourier modes per axis (spectral backbone).
    #[serde(default = "default_modes")]
    pub modes: usize,
}

fn default_kernel() -> usize {
    5
}

fn default_modes() -> usize {
    12
}

impl BackboneConfig {
    pub fn conv() -> Self {
        Self {
            kind: BackboneKind::Conv,
            width: 32,
            layers: 3,
            kernel: 5,
            modes: default_modes(),
        }
    }

    pub fn spectral() -> Self {
        Self {
            kind: BackboneKind::Spectral,
            width: 16,
            layers: 2,
            kernel: default_kernel(),
            modes: 12,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: BackboneKind::None,
            width: 0,
            layers: 0,
            kernel: default_kernel(),
            modes: default_modes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackboneKind::None => Ok(()),
            _ if self.width == 0 || self.layers == 0 => Err(invalid("backbone width and layers must be positive")),
            BackboneKind::Conv if self.kernel % 2 == 0 => Err(invalid("conv kernel must be odd")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zero,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::new(name, shape, Init::Zero)
    }

    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        match self.init {
            Init::Zero => Tensor::zeros(&self.shape),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&self.shape, |_| d.sample(rng))
            }
            Init::Uniform(scale) => {
                let d = Uniform::new(0.0, scale).expect("positive scale");
                Tensor::from_fn(&self.shape, |_| d.sample(rng))
            }
        }
    }
}

fn kernel(c_out: usize, c_in: usize, k: usize, dim: usize) -> Vec<usize> {
    let mut s = vec![c_out, c_in];
    s.extend(std::iter::repeat(k).take(dim));
    s
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

/// The backbone's trainable tensors for `c_in` input and `c_out` output channels.
pub(crate) fn layout(cfg: &BackboneConfig, c_in: usize, c_out: usize, dim: usize, plan: Option<&SpectralPlan>) -> Vec<ParamSpec> {
    let mut out = vec![];
    let w = cfg.width;
    match cfg.kind {
        BackboneKind::None => {}
        BackboneKind::Conv => {
            let taps = cfg.kernel.pow(dim as u32);
            let mut c = c_in;
            for i in 0..cfg.layers {
                out.push(ParamSpec::new(format!("conv{i}.w"), kernel(w, c, cfg.kernel, dim), he(c * taps)));
                out.push(ParamSpec::new(format!("conv{i}.b"), vec![w], Init::Zero));
                c = w;
            }
            out.push(ParamSpec::new("out.w", kernel(c_out, w, 1, dim), Init::Zero));
            out.push(ParamSpec::new("out.b", vec![c_out], Init::Zero));
        }
        BackboneKind::Spectral => {
            let plan = plan.expect("spectral backbone has a plan");
            out.push(ParamSpec::new("lift.w", kernel(w, c_in, 1, dim), he(c_in)));
            out.push(ParamSpec::new("lift.b", vec![w], Init::Zero));
            let scale = 1.0 / (w * w) as f64;
            for i in 0..cfg.layers {
                out.push(ParamSpec::new(format!("fourier{i}.wr"), plan.weight_shape(w, w), Init::Uniform(scale)));
                out.push(ParamSpec::new(format!("fourier{i}.wi"), plan.weight_shape(w, w), Init::Uniform(scale)));
                out.push(ParamSpec::new(format!("fourier{i}.skip"), kernel(w, w, 1, dim), he(w)));
                out.push(ParamSpec::new(format!("fourier{i}.b"), vec![w], Init::Zero));
            }
            out.push(ParamSpec::new("proj.w", kernel(2 * w, w, 1, dim), he(w)));
            out.push(ParamSpec::new("proj.b", vec![2 * w], Init::Zero));
            out.push(ParamSpec::new("out.w", kernel(c_out, 2 * w, 1, dim), Init::Zero));
            out.push(ParamSpec::new("out.b", vec![c_out], Init::Zero));
        }
    }
    out
}

pub(crate) fn plan(cfg: &BackboneConfig, spatial: &[usize]) -> Result<Option<Arc<SpectralPlan>>> {
    match cfg.kind {
        BackboneKind::Spectral => Ok(Some(Arc::new(SpectralPlan::new(spatial, cfg.modes)?))),
        _ => Ok(None),
    }
}

/// `x`: `[B, c_in, spatial]` → `[B, c_out, spatial]`. `params` follow [`layout`].
pub(crate) fn forward<'t>(
    cfg: &BackboneConfig,
    plan: Option<&Arc<SpectralPlan>>,
    padding: Padding,
    params: &[Var<'t>],
    x: Var<'t>,
) -> Result<Var<'t>> {
    let conv = |x: Var<'t>, w: Var<'t>, b: Var<'t>| x.conv(w, padding)?.add_channel_bias(b);
    match cfg.kind {
        BackboneKind::None => Err(invalid("backbone kind none has no forward pass")),
        BackboneKind::Conv => {
            let mut h = x;
            for i in 0..cfg.layers {
                h = conv(h, params[2 * i], params[2 * i + 1])?.gelu()?;
            }
            let o = 2 * cfg.layers;
            conv(h, params[o], params[o + 1])
        }
        BackboneKind::Spectral => {
            let plan = plan.expect("spectral backbone has a plan");
            let mut h = conv(x, params[0], params[1])?;
            for i in 0..cfg.layers {
                let p = &params[2 + 4 * i..6 + 4 * i];
                let spectral = h.spectral_multiply(p[0], p[1], plan)?;
                let local = h.conv(p[2], padding)?;
                h = spectral.add(local)?.add_channel_bias(p[3])?.gelu()?;
            }
            let o = 2 + 4 * cfg.layers;
            let h = conv(h, params[o], params[o + 1])?.gelu()?;
            conv(h, params[o + 2], params[o + 3])
        }
    }
}
