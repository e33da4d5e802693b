//! Run configuration: a flat `key = value` file with `#` comments. Every key
//! has a default, so an empty file is a valid configuration; unknown and
//! duplicate keys are rejected with the offending line number.
//!
//! Keys and defaults:
//!
//! | key                  | default    | meaning                                           |
//! |----------------------|------------|---------------------------------------------------|
//! | seed                 | 0          | root RNG seed (CLI --seed overrides)              |
//! | out_dir              | runs/out   | output directory (CLI --out overrides)            |
//! | algorithm            | maml2      | maml2, maml1, or metasgd                          |
//! | alpha0               | 0.01       | inner learning rate (> 0)                         |
//! | eta                  | 0.001      | outer learning rate (> 0)                         |
//! | n_inner              | 5          | inner gradient steps per episode                  |
//! | meta_batch           | 4          | tasks per outer step                              |
//! | outer_optimizer      | adam       | adam or sgd                                       |
//! | adam_beta1           | 0.9        | Adam first-moment decay                           |
//! | adam_beta2           | 0.999      | Adam second-moment decay                          |
//! | adam_eps             | 1e-8       | Adam denominator floor                            |
//! | activation_dropout   | 0.0        | inverted dropout on hidden activations, [0, 1)    |
//! | epochs               | 400        | outer epochs (0 = evaluate the initialization)    |
//! | episodes_per_epoch   | 10         | outer steps per epoch                             |
//! | early_stop_patience  | 50         | epochs without validation improvement before stop |
//! | noise_mode           | gaussian   | off, binary, or gaussian gradient noise           |
//! | p                    | 0.1        | gradient-dropout rate, [0, 1)                     |
//! | layers               | all        | "all" or '+'-joined layer labels, e.g. L0+OUT     |
//! | resample_per_step    | true       | fresh noise each inner step vs one shared mask    |
//! | hidden               | 40,40      | hidden layer widths (may be empty)                |
//! | activation           | relu       | tanh or relu                                      |
//! | family               | sinusoid   | sinusoid or clusters                              |
//! | k_shot               | 5          | support points (per class for clusters)           |
//! | n_query              | 10         | query points (per class for clusters)             |
//! | n_pool               | 24         | size of the frozen training task pool             |
//! | n_val_tasks          | 20         | frozen validation episodes                        |
//! | eval_episodes        | 100        | test episodes for sweep/ablation cells            |
//! | amp_lo, amp_hi       | 0.1, 5.0   | sinusoid amplitude range                          |
//! | phase_lo, phase_hi   | 0, pi      | sinusoid phase range                              |
//! | input_lo, input_hi   | -5.0, 5.0  | sinusoid input range                              |
//! | shift_amp_lo, _hi    | 5.0, 10.0  | out-of-domain amplitude range                     |
//! | n_way                | 5          | cluster classes                                   |
//! | d_in                 | 16         | cluster input dimension                           |
//! | mean_lo, mean_hi     | -2.0, 2.0  | cluster mean region                               |
//! | cluster_sd           | 0.1        | cluster spread                                    |
//! | shift_mean_lo, _hi   | 4.0, 8.0   | out-of-domain mean region                         |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::dropgrad::{NoiseConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::metalearn::{Algorithm, MetaConfig, OuterOptimizer};
use crate::model::{Activation, MlpSpec};
use crate::tasks::TaskFamily;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub meta: MetaConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub family: TaskFamily,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_pool: usize,
    pub n_val_tasks: usize,
    pub eval_episodes: usize,
}

/// The (mode, p) pair as reported: a rate of zero is indistinguishable from
/// no noise by construction, so both collapse to ("off", 0) in run ids and
/// metrics rows.
pub fn canonical_noise(noise: &NoiseConfig) -> (&'static str, f64) {
    if noise.mode == NoiseMode::Off || noise.p == 0.0 {
        ("off", 0.0)
    } else {
        (noise.mode.as_str(), noise.p)
    }
}

impl RunConfig {
    /// The built-in defaults (equivalent to parsing an empty file).
    pub fn defaults() -> RunConfig {
        Builder::default()
            .build("<built-in>")
            .expect("default configuration is valid")
    }

    pub fn model_spec(&self) -> Result<MlpSpec> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.family.d_in());
        dims.extend_from_slice(&self.hidden);
        dims.push(self.family.d_out());
        MlpSpec::new(dims, self.activation, self.family.head())
    }

    pub fn run_id(&self) -> String {
        let (mode, p) = canonical_noise(&self.meta.noise);
        format!(
            "{}-{}-p{}-s{}",
            self.meta.algorithm.as_str(),
            mode,
            p,
            self.seed
        )
    }

    /// The layer selection as a config-file string: "all", or the selected
    /// labels joined with '+' (sorted, since selection is a set).
    pub fn selector_string(&self) -> String {
        let sel = &self.meta.noise.layer_selector;
        if sel.is_empty() {
            "all".to_string()
        } else {
            sel.iter().cloned().collect::<Vec<_>>().join("+")
        }
    }

    /// Replace the noise mode and rate, keeping layer selection and
    /// resampling policy (the sweep lever).
    pub fn set_noise(&mut self, mode: NoiseMode, p: f64) -> Result<()> {
        let mut nc = if mode == NoiseMode::Off {
            NoiseConfig::off()
        } else {
            NoiseConfig::new(mode, p)?
        };
        nc.layer_selector = self.meta.noise.layer_selector.clone();
        nc.resample_per_step = self.meta.noise.resample_per_step;
        self.meta.noise = nc;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("alpha0", m.alpha0)?;
        positive("eta", m.eta)?;
        if !(0.0..1.0).contains(&m.activation_dropout) {
            return Err(Error::InvalidConfig(format!(
                "activation_dropout must be in [0, 1), got {}",
                m.activation_dropout
            )));
        }
        if let OuterOptimizer::Adam { beta1, beta2, eps } = m.outer_optimizer {
            for (name, b) in [("adam_beta1", beta1), ("adam_beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} must be in [0, 1), got {b}"
                    )));
                }
            }
            positive("adam_eps", eps)?;
        }
        let counts = [
            ("n_inner", m.n_inner),
            ("meta_batch", m.meta_batch),
            ("episodes_per_epoch", m.episodes_per_epoch),
            ("early_stop_patience", m.early_stop_patience),
            ("k_shot", self.k_shot),
            ("n_query", self.n_query),
            ("n_pool", self.n_pool),
            ("n_val_tasks", self.n_val_tasks),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        m.noise.validate()?;
        self.family.validate()?;
        let spec = self.model_spec()?;
        let labels: BTreeSet<String> = spec.layer_labels().into_iter().collect();
        for label in &m.noise.layer_selector {
            if !labels.contains(label) {
                return Err(Error::UnknownLayer(label.clone()));
            }
        }
        Ok(())
    }
}

/// Raw key values before assembly; `build` turns them into a validated
/// RunConfig.
struct Builder {
    seed: u64,
    out_dir: String,
    algorithm: Algorithm,
    alpha0: f64,
    eta: f64,
    n_inner: usize,
    meta_batch: usize,
    optimizer: String,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    activation_dropout: f64,
    epochs: usize,
    episodes_per_epoch: usize,
    early_stop_patience: usize,
    noise_mode: NoiseMode,
    p: f64,
    layers: String,
    resample_per_step: bool,
    hidden: Vec<usize>,
    activation: Activation,
    family: String,
    k_shot: usize,
    n_query: usize,
    n_pool: usize,
    n_val_tasks: usize,
    eval_episodes: usize,
    amp: (f64, f64),
    phase: (f64, f64),
    input: (f64, f64),
    shift_amp: (f64, f64),
    n_way: usize,
    d_in: usize,
    mean: (f64, f64),
    cluster_sd: f64,
    shift_mean: (f64, f64),
}

impl Default for Builder {
    fn default() -> Self {
        Builder {
            seed: 0,
            out_dir: "runs/out".to_string(),
            algorithm: Algorithm::Maml2,
            alpha0: 0.01,
            eta: 0.001,
            n_inner: 5,
            meta_batch: 4,
            optimizer: "adam".to_string(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            activation_dropout: 0.0,
            epochs: 400,
            episodes_per_epoch: 10,
            early_stop_patience: 50,
            noise_mode: NoiseMode::Gaussian,
            p: 0.1,
            layers: "all".to_string(),
            resample_per_step: true,
            hidden: vec![40, 40],
            activation: Activation::Relu,
            family: "sinusoid".to_string(),
            k_shot: 5,
            n_query: 10,
            n_pool: 24,
            n_val_tasks: 20,
            eval_episodes: 100,
            amp: (0.1, 5.0),
            phase: (0.0, std::f64::consts::PI),
            input: (-5.0, 5.0),
            shift_amp: (5.0, 10.0),
            n_way: 5,
            d_in: 16,
            mean: (-2.0, 2.0),
            cluster_sd: 0.1,
            shift_mean: (4.0, 8.0),
        }
    }
}

fn config_err(path: &str, line: usize, msg: String) -> Error {
    Error::Config {
        path: path.to_string(),
        line,
        msg,
    }
}

impl Builder {
    fn set(&mut self, key: &str, val: &str, path: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(path: &str, line: usize, key: &str, val: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            val.parse::<T>().map_err(|e| {
                config_err(path, line, format!("key {key}: cannot parse {val:?}: {e}"))
            })
        }

        match key {
            "seed" => self.seed = num(path, line, key, val)?,
            "out_dir" => self.out_dir = val.to_string(),
            "algorithm" => {
                self.algorithm = Algorithm::parse(val)
                    .map_err(|e| config_err(path, line, e.to_string()))?
            }
            "alpha0" => self.alpha0 = num(path, line, key, val)?,
            "eta" => self.eta = num(path, line, key, val)?,
            "n_inner" => self.n_inner = num(path, line, key, val)?,
            "meta_batch" => self.meta_batch = num(path, line, key, val)?,
            "outer_optimizer" => match val {
                "adam" | "sgd" => self.optimizer = val.to_string(),
                other => {
                    return Err(config_err(
                        path,
                        line,
                        format!("outer_optimizer must be adam or sgd, got {other:?}"),
                    ))
                }
            },
            "adam_beta1" => self.adam_beta1 = num(path, line, key, val)?,
            "adam_beta2" => self.adam_beta2 = num(path, line, key, val)?,
            "adam_eps" => self.adam_eps = num(path, line, key, val)?,
            "activation_dropout" => self.activation_dropout = num(path, line, key, val)?,
            "epochs" => self.epochs = num(path, line, key, val)?,
            "episodes_per_epoch" => self.episodes_per_epoch = num(path, line, key, val)?,
            "early_stop_patience" => self.early_stop_patience = num(path, line, key, val)?,
            "noise_mode" => {
                self.noise_mode = NoiseMode::parse(val)
                    .map_err(|e| config_err(path, line, e.to_string()))?
            }
            "p" => self.p = num(path, line, key, val)?,
            "layers" => self.layers = val.to_string(),
            "resample_per_step" => self.resample_per_step = num(path, line, key, val)?,
            "hidden" => {
                self.hidden = val
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num::<usize>(path, line, key, s))
                    .collect::<Result<_>>()?
            }
            "activation" => {
                self.activation = match val {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => {
                        return Err(config_err(
                            path,
                            line,
                            format!("activation must be tanh or relu, got {other:?}"),
                        ))
                    }
                }
            }
            "family" => match val {
                "sinusoid" | "clusters" => self.family = val.to_string(),
                other => {
                    return Err(config_err(
                        path,
                        line,
                        format!("family must be sinusoid or clusters, got {other:?}"),
                    ))
                }
            },
            "k_shot" => self.k_shot = num(path, line, key, val)?,
            "n_query" => self.n_query = num(path, line, key, val)?,
            "n_pool" => self.n_pool = num(path, line, key, val)?,
            "n_val_tasks" => self.n_val_tasks = num(path, line, key, val)?,
            "eval_episodes" => self.eval_episodes = num(path, line, key, val)?,
            "amp_lo" => self.amp.0 = num(path, line, key, val)?,
            "amp_hi" => self.amp.1 = num(path, line, key, val)?,
            "phase_lo" => self.phase.0 = num(path, line, key, val)?,
            "phase_hi" => self.phase.1 = num(path, line, key, val)?,
            "input_lo" => self.input.0 = num(path, line, key, val)?,
            "input_hi" => self.input.1 = num(path, line, key, val)?,
            "shift_amp_lo" => self.shift_amp.0 = num(path, line, key, val)?,
            "shift_amp_hi" => self.shift_amp.1 = num(path, line, key, val)?,
            "n_way" => self.n_way = num(path, line, key, val)?,
            "d_in" => self.d_in = num(path, line, key, val)?,
            "mean_lo" => self.mean.0 = num(path, line, key, val)?,
            "mean_hi" => self.mean.1 = num(path, line, key, val)?,
            "cluster_sd" => self.cluster_sd = num(path, line, key, val)?,
            "shift_mean_lo" => self.shift_mean.0 = num(path, line, key, val)?,
            "shift_mean_hi" => self.shift_mean.1 = num(path, line, key, val)?,
            other => {
                return Err(config_err(path, line, format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    fn build(self, path: &str) -> Result<RunConfig> {
        let mut noise = if self.noise_mode == NoiseMode::Off {
            NoiseConfig::off()
        } else {
            NoiseConfig::new(self.noise_mode, self.p)?
        };
        noise.resample_per_step = self.resample_per_step;
        if self.layers != "all" {
            let mut selector = BTreeSet::new();
            for label in self.layers.split('+').map(str::trim) {
                if label.is_empty() {
                    return Err(config_err(
                        path,
                        0,
                        format!("layers: empty label in {:?}", self.layers),
                    ));
                }
                selector.insert(label.to_string());
            }
            noise.layer_selector = selector;
        }

        let family = match self.family.as_str() {
            "sinusoid" => TaskFamily::Sinusoid {
                amp_range: self.amp,
                phase_range: self.phase,
                input_range: self.input,
                shift_amp_range: Some(self.shift_amp),
            },
            _ => TaskFamily::Clusters {
                n_way: self.n_way,
                d_in: self.d_in,
                mean_region: self.mean,
                cluster_sd: self.cluster_sd,
                shift_mean_region: Some(self.shift_mean),
            },
        };

        let outer_optimizer = if self.optimizer == "sgd" {
            OuterOptimizer::Sgd
        } else {
            OuterOptimizer::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            }
        };

        let config = RunConfig {
            seed: self.seed,
            out_dir: PathBuf::from(self.out_dir),
            meta: MetaConfig {
                algorithm: self.algorithm,
                alpha0: self.alpha0,
                eta: self.eta,
                n_inner: self.n_inner,
                meta_batch: self.meta_batch,
                outer_optimizer,
                noise,
                activation_dropout: self.activation_dropout,
                epochs: self.epochs,
                episodes_per_epoch: self.episodes_per_epoch,
                early_stop_patience: self.early_stop_patience,
            },
            hidden: self.hidden,
            activation: self.activation,
            family,
            k_shot: self.k_shot,
            n_query: self.n_query,
            n_pool: self.n_pool,
            n_val_tasks: self.n_val_tasks,
            eval_episodes: self.eval_episodes,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parse configuration text. `path` labels error messages only.
pub fn parse_config_str(text: &str, path: &str) -> Result<RunConfig> {
    let mut builder = Builder::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(config_err(
                path,
                line_no,
                format!("expected `key = value`, got {line:?}"),
            ));
        };
        let (key, val) = (key.trim(), val.trim());
        if key.is_empty() {
            return Err(config_err(path, line_no, "empty key".to_string()));
        }
        if !seen.insert(key.to_string()) {
            return Err(config_err(path, line_no, format!("duplicate key {key:?}")));
        }
        builder.set(key, val, path, line_no)?;
    }
    builder.build(path)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}
