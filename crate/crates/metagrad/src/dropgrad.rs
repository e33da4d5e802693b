//! Gradient dropout for inner-loop adaptation: multiply each adaptation
//! gradient elementwise by random noise n with E[n] = 1, either binary
//! (zero with probability p, survivors rescaled by 1/(1-p)) or gaussian
//! (mean 1, variance p/(1-p), moment-matched to the binary form). Applied
//! during meta-training only; selectable per layer label.

use std::collections::BTreeSet;

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Off,
    Binary,
    Gaussian,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Off => "off",
            NoiseMode::Binary => "binary",
            NoiseMode::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NoiseMode::Off),
            "binary" => Ok(NoiseMode::Binary),
            "gaussian" => Ok(NoiseMode::Gaussian),
            other => Err(Error::InvalidConfig(format!(
                "unknown noise mode {other:?} (expected off, binary, or gaussian)"
            ))),
        }
    }
}

/// How gradient noise is sampled and where it is applied. An empty
/// `layer_selector` means every layer; `resample_per_step` controls whether
/// a multi-step inner loop draws fresh noise at each step (default) or
/// shares one mask across steps.
#[derive(Clone, Debug)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub p: f64,
    pub layer_selector: BTreeSet<String>,
    pub resample_per_step: bool,
}

impl NoiseConfig {
    pub fn new(mode: NoiseMode, p: f64) -> Result<Self> {
        let cfg = NoiseConfig {
            mode,
            p,
            layer_selector: BTreeSet::new(),
            resample_per_step: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn off() -> Self {
        NoiseConfig {
            mode: NoiseMode::Off,
            p: 0.0,
            layer_selector: BTreeSet::new(),
            resample_per_step: true,
        }
    }

    /// p = 1 would make the 1/(1-p) rescaling singular, so the legal range
    /// is [0, 1).
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidRate(self.p));
        }
        Ok(())
    }

    /// Whether gradients of the given layer label receive noise.
    pub fn selects(&self, layer: &str) -> bool {
        self.layer_selector.is_empty() || self.layer_selector.contains(layer)
    }
}

fn draw_one(mode: NoiseMode, p: f64, rng: &mut RngStream) -> f64 {
    match mode {
        NoiseMode::Off => unreachable!("noise draw with mode off"),
        NoiseMode::Binary => {
            if rng.bernoulli(p) {
                0.0
            } else {
                1.0 / (1.0 - p)
            }
        }
        NoiseMode::Gaussian => {
            let sd = (p / (1.0 - p)).sqrt();
            rng.normal(1.0, sd)
        }
    }
}

/// Sample a noise tensor of the given shape, every element independent.
pub fn sample_noise(config: &NoiseConfig, shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    if config.mode == NoiseMode::Off {
        return Err(Error::InvalidConfig(
            "noise sampling requested with mode off".to_string(),
        ));
    }
    config.validate()?;
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| draw_one(config.mode, config.p, rng)).collect();
    Tensor::new(shape.to_vec(), values)
}

/// One noise tensor per parameter, in `params` order: `Some` for selected
/// layers, `None` for pass-through entries. Mode off draws nothing and
/// returns all `None`. The draw order — parameters in set order, elements
/// row-major — is the contract every noise consumer follows, so the
/// value-level and graph-traced application paths see identical draws.
pub fn draw_masks(
    params: &ParamSet,
    config: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<Vec<Option<Tensor>>> {
    if config.mode == NoiseMode::Off {
        return Ok(vec![None; params.len()]);
    }
    config.validate()?;
    params
        .iter()
        .map(|param| {
            if config.selects(&param.layer) {
                sample_noise(config, param.tensor.shape(), rng).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Multiply selected gradients elementwise by fresh noise; unselected
/// entries pass through bit-identical. Mode off returns the input unchanged
/// and draws nothing from `rng`, so toggling noise on or off cannot shift
/// any other random stream.
pub fn apply_dropgrad(
    grads: &GradMap,
    params: &ParamSet,
    config: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<GradMap> {
    grads.check_keys(params)?;
    if config.mode == NoiseMode::Off {
        return Ok(grads.clone());
    }
    let masks = draw_masks(params, config, rng)?;
    let mut entries = Vec::with_capacity(grads.len());
    for (param, mask) in params.iter().zip(masks) {
        let g = grads.get(&param.name).expect("checked keys");
        let out = match mask {
            Some(noise) => g.zip(&noise, |gv, nv| gv * nv)?,
            None => g.clone(),
        };
        entries.push((param.name.clone(), out));
    }
    Ok(GradMap::from_pairs(entries))
}

/// Monte Carlo estimate of (mean, sample variance) of the noise law.
pub fn noise_moments(
    config: &NoiseConfig,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if config.mode == NoiseMode::Off {
        return Err(Error::InvalidConfig(
            "noise moments requested with mode off".to_string(),
        ));
    }
    config.validate()?;
    assert!(n_samples >= 1);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let v = draw_one(config.mode, config.p, rng);
        sum += v;
        sumsq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        (sumsq - n * mean * mean) / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var))
}
