//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers and `#` comments. Every key has a default; unknown keys, repeated
//! keys and unparsable values are errors that name the key.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use shipnet_core::chipgen::ChipSpec;
use shipnet_core::loss::FocalDiceParams;
use shipnet_core::metrics::DEFAULT_THRESHOLD;
use shipnet_core::optim::{CyclicSchedule, SgdConfig};
use shipnet_core::unet::UNetConfig;
use shipnet_dataserver::DEFAULT_MEM_CAP;
use shipnet_train::psv::PsvConfig;
use shipnet_train::sn::SnConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sn,
    Psv,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sn" => Ok(Mode::Sn),
            "psv" => Ok(Mode::Psv),
            _ => Err(format!("expected sn or psv, got '{s}'")),
        }
    }
}

/// Optimizer keys shared by the `[sn]` and `[psv]` sections.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerKeys {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub cyclic: bool,
    pub base_lr: f32,
    pub max_lr: f32,
    /// Half-cycle length in iterations; 0 means two epochs' worth of batches.
    pub step_size: u64,
}

impl OptimizerKeys {
    fn to_sgd(&self, batches_per_epoch: u64) -> SgdConfig {
        let step_size = if self.step_size == 0 {
            2 * batches_per_epoch.max(1)
        } else {
            self.step_size
        };
        SgdConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            cyclic: self.cyclic.then_some(CyclicSchedule {
                base_lr: self.base_lr,
                max_lr: self.max_lr,
                step_size,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataKeys {
    pub train_count: u64,
    pub val_count: u64,
    pub target_count: u64,
    pub spec: ChipSpec,
    /// Seed of the shifted-distribution target chips.
    pub target_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnKeys {
    pub shards: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: OptimizerKeys,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsvKeys {
    pub workers: usize,
    pub accumulation: u32,
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: OptimizerKeys,
    pub poll_ms: u64,
    pub timeout_s: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerKeys {
    pub bind: String,
    pub mem_cap: u64,
    pub max_clients: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub mode: Mode,
    /// Drives model initialization, data order and augmentation.
    pub seed: u64,
    pub data: DataKeys,
    pub model: UNetConfig,
    pub loss: FocalDiceParams,
    pub augment: bool,
    pub threshold: f32,
    pub sn: SnKeys,
    pub psv: PsvKeys,
    pub server: ServerKeys,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "desk".into(),
            mode: Mode::Sn,
            seed: 7,
            data: DataKeys {
                train_count: 512,
                val_count: 64,
                target_count: 79,
                spec: ChipSpec::default(),
                target_seed: 2,
            },
            model: UNetConfig::desk(),
            loss: FocalDiceParams::default(),
            augment: true,
            threshold: DEFAULT_THRESHOLD,
            sn: SnKeys {
                shards: 4,
                batch_size: 16,
                epochs: 30,
                optimizer: OptimizerKeys {
                    lr: 1e-3,
                    momentum: 0.9,
                    weight_decay: 1e-5,
                    cyclic: true,
                    base_lr: 1e-3,
                    max_lr: 3e-3,
                    step_size: 0,
                },
            },
            psv: PsvKeys {
                workers: 4,
                accumulation: 4,
                batch_size: 16,
                epochs: 30,
                optimizer: OptimizerKeys {
                    lr: 1e-3,
                    momentum: 0.0,
                    weight_decay: 1e-5,
                    cyclic: false,
                    base_lr: 1e-3,
                    max_lr: 3e-3,
                    step_size: 0,
                },
                poll_ms: 10,
                timeout_s: 600,
            },
            server: ServerKeys {
                bind: "127.0.0.1:0".into(),
                mem_cap: DEFAULT_MEM_CAP,
                max_clients: 10_000,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CliError::Config(format!("bad value '{value}' for key '{key}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_fraction(key: &str, value: &str) -> Result<Option<f64>, CliError> {
    match value {
        "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn fmt_fraction(f: Option<f64>) -> String {
    f.map_or_else(|| "none".into(), |v| v.to_string())
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Applies every assignment in `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {}: unterminated section header", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if !seen.insert(key.clone()) {
                return Err(CliError::Config(format!("key '{key}' set twice")));
            }
            cfg.set(&key, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key (`section.name`, or `name` at top level).
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let d = &mut self.data;
        let s = &mut d.spec;
        match key {
            "run_id" => self.run_id = v.to_string(),
            "mode" => self.mode = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,

            "data.train_count" => d.train_count = parse(key, v)?,
            "data.val_count" => d.val_count = parse(key, v)?,
            "data.target_count" => d.target_count = parse(key, v)?,
            "data.target_seed" => d.target_seed = parse(key, v)?,
            "data.seed" => s.seed = parse(key, v)?,
            "data.height" => s.height = parse(key, v)?,
            "data.width" => s.width = parse(key, v)?,
            "data.ship_count_min" => s.ship_count.0 = parse(key, v)?,
            "data.ship_count_max" => s.ship_count.1 = parse(key, v)?,
            "data.ship_length_min" => s.ship_length.0 = parse(key, v)?,
            "data.ship_length_max" => s.ship_length.1 = parse(key, v)?,
            "data.ship_width_min" => s.ship_width.0 = parse(key, v)?,
            "data.ship_width_max" => s.ship_width.1 = parse(key, v)?,
            "data.ship_fraction" => s.ship_fraction = parse_fraction(key, v)?,
            "data.ship_aspect_min" => s.ship_aspect.0 = parse(key, v)?,
            "data.ship_aspect_max" => s.ship_aspect.1 = parse(key, v)?,
            "data.cloud_prob" => s.cloud_prob = parse(key, v)?,
            "data.land_prob" => s.land_prob = parse(key, v)?,
            "data.glint_prob" => s.glint_prob = parse(key, v)?,
            "data.noise" => s.noise = parse(key, v)?,

            "model.channels" => self.model.encoder_channels = parse_list(key, v)?,
            "model.bottleneck" => self.model.bottleneck_enabled = parse(key, v)?,
            "model.in_channels" => self.model.in_channels = parse(key, v)?,
            "model.classes" => self.model.num_classes = parse(key, v)?,

            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.smooth" => self.loss.smooth = parse(key, v)?,

            "train.augment" => self.augment = parse(key, v)?,
            "train.threshold" => self.threshold = parse(key, v)?,

            "sn.shards" => self.sn.shards = parse(key, v)?,
            "sn.batch_size" => self.sn.batch_size = parse(key, v)?,
            "sn.epochs" => self.sn.epochs = parse(key, v)?,

            "psv.workers" => self.psv.workers = parse(key, v)?,
            "psv.accumulation" => self.psv.accumulation = parse(key, v)?,
            "psv.batch_size" => self.psv.batch_size = parse(key, v)?,
            "psv.epochs" => self.psv.epochs = parse(key, v)?,
            "psv.poll_ms" => self.psv.poll_ms = parse(key, v)?,
            "psv.timeout_s" => self.psv.timeout_s = parse(key, v)?,

            "server.bind" => self.server.bind = v.to_string(),
            "server.mem_cap" => self.server.mem_cap = parse(key, v)?,
            "server.max_clients" => self.server.max_clients = parse(key, v)?,

            _ => {
                let opt = match key.split_once('.') {
                    Some(("sn", name)) => Some((&mut self.sn.optimizer, name)),
                    Some(("psv", name)) => Some((&mut self.psv.optimizer, name)),
                    _ => None,
                };
                match opt {
                    Some((o, "lr")) => o.lr = parse(key, v)?,
                    Some((o, "momentum")) => o.momentum = parse(key, v)?,
                    Some((o, "weight_decay")) => o.weight_decay = parse(key, v)?,
                    Some((o, "cyclic")) => o.cyclic = parse(key, v)?,
                    Some((o, "base_lr")) => o.base_lr = parse(key, v)?,
                    Some((o, "max_lr")) => o.max_lr = parse(key, v)?,
                    Some((o, "step_size")) => o.step_size = parse(key, v)?,
                    _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.spec.validate()?;
        self.model.validate()?;
        let f = self.model.downsample_factor();
        if self.data.spec.height % f != 0 || self.data.spec.width % f != 0 {
            return Err(CliError::Config(format!(
                "chip {}x{} is not divisible by the model's downsample factor {f}",
                self.data.spec.height, self.data.spec.width
            )));
        }
        if self.data.spec.height * self.data.spec.width == 0 || self.model.in_channels != 3 {
            return Err(CliError::Config("model.in_channels must be 3 for RGB chips".into()));
        }
        self.sn_config().validate()?;
        self.psv_config().validate()?;
        Ok(())
    }

    fn batches_per_epoch(&self, batch: usize) -> u64 {
        (self.data.train_count as usize).div_ceil(batch.max(1)) as u64
    }

    pub fn sn_config(&self) -> SnConfig {
        SnConfig {
            shard_count: self.sn.shards,
            batch_size: self.sn.batch_size,
            epochs: self.sn.epochs,
            optimizer: self.sn.optimizer.to_sgd(self.batches_per_epoch(self.sn.batch_size)),
            loss: self.loss,
            seed: self.seed,
            augment: self.augment,
            threshold: self.threshold,
        }
    }

    pub fn psv_config(&self) -> PsvConfig {
        // Each primary step consumes K batches.
        let steps = self
            .batches_per_epoch(self.psv.batch_size)
            .div_ceil(self.psv.accumulation.max(1) as u64);
        PsvConfig {
            workers: self.psv.workers,
            accumulation: self.psv.accumulation,
            batch_size: self.psv.batch_size,
            epochs: self.psv.epochs,
            optimizer: self.psv.optimizer.to_sgd(steps),
            loss: self.loss,
            seed: self.seed,
            augment: self.augment,
            threshold: self.threshold,
            poll: Duration::from_millis(self.psv.poll_ms),
            timeout: Duration::from_secs(self.psv.timeout_s),
        }
    }

    /// Renders every key, so the file reproduces this config exactly.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let s = &self.data.spec;
        let _ = writeln!(o, "run_id = {}", self.run_id);
        let _ = writeln!(o, "mode = {}", if self.mode == Mode::Sn { "sn" } else { "psv" });
        let _ = writeln!(o, "seed = {}", self.seed);
        let _ = writeln!(o, "\n[data]");
        for (k, v) in [
            ("train_count", self.data.train_count.to_string()),
            ("val_count", self.data.val_count.to_string()),
            ("target_count", self.data.target_count.to_string()),
            ("target_seed", self.data.target_seed.to_string()),
            ("seed", s.seed.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("ship_count_min", s.ship_count.0.to_string()),
            ("ship_count_max", s.ship_count.1.to_string()),
            ("ship_length_min", s.ship_length.0.to_string()),
            ("ship_length_max", s.ship_length.1.to_string()),
            ("ship_width_min", s.ship_width.0.to_string()),
            ("ship_width_max", s.ship_width.1.to_string()),
            ("ship_fraction", fmt_fraction(s.ship_fraction)),
            ("ship_aspect_min", s.ship_aspect.0.to_string()),
            ("ship_aspect_max", s.ship_aspect.1.to_string()),
            ("cloud_prob", s.cloud_prob.to_string()),
            ("land_prob", s.land_prob.to_string()),
            ("glint_prob", s.glint_prob.to_string()),
            ("noise", s.noise.to_string()),
        ] {
            let _ = writeln!(o, "{k} = {v}");
        }
        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "channels = {}", fmt_list(&self.model.encoder_channels));
        let _ = writeln!(o, "bottleneck = {}", self.model.bottleneck_enabled);
        let _ = writeln!(o, "in_channels = {}", self.model.in_channels);
        let _ = writeln!(o, "classes = {}", self.model.num_classes);
        let _ = writeln!(o, "\n[loss]");
        let _ = writeln!(o, "alpha = {}", self.loss.alpha);
        let _ = writeln!(o, "beta = {}", self.loss.beta);
        let _ = writeln!(o, "smooth = {}", self.loss.smooth);
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "augment = {}", self.augment);
        let _ = writeln!(o, "threshold = {}", self.threshold);
        let _ = writeln!(o, "\n[sn]");
        let _ = writeln!(o, "shards = {}", self.sn.shards);
        let _ = writeln!(o, "batch_size = {}", self.sn.batch_size);
        let _ = writeln!(o, "epochs = {}", self.sn.epochs);
        write_optimizer(&mut o, &self.sn.optimizer);
        let _ = writeln!(o, "\n[psv]");
        let _ = writeln!(o, "workers = {}", self.psv.workers);
        let _ = writeln!(o, "accumulation = {}", self.psv.accumulation);
        let _ = writeln!(o, "batch_size = {}", self.psv.batch_size);
        let _ = writeln!(o, "epochs = {}", self.psv.epochs);
        let _ = writeln!(o, "poll_ms = {}", self.psv.poll_ms);
        let _ = writeln!(o, "timeout_s = {}", self.psv.timeout_s);
        write_optimizer(&mut o, &self.psv.optimizer);
        let _ = writeln!(o, "\n[server]");
        let _ = writeln!(o, "bind = {}", self.server.bind);
        let _ = writeln!(o, "mem_cap = {}", self.server.mem_cap);
        let _ = writeln!(o, "max_clients = {}", self.server.max_clients);
        o
    }
}

fn write_optimizer(o: &mut String, k: &OptimizerKeys) {
    let _ = writeln!(o, "lr = {}", k.lr);
    let _ = writeln!(o, "momentum = {}", k.momentum);
    let _ = writeln!(o, "weight_decay = {}", k.weight_decay);
    let _ = writeln!(o, "cyclic = {}", k.cyclic);
    let _ = writeln!(o, "base_lr = {}", k.base_lr);
    let _ = writeln!(o, "max_lr = {}", k.max_lr);
    let _ = writeln!(o, "step_size = {}", k.step_size);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_comments() {
        let cfg = RunConfig::parse("mode = psv  # trailing\n[psv]\nworkers = 2\n[data]\nship_fraction = 1e-3\n").unwrap();
        assert_eq!(cfg.mode, Mode::Psv);
        assert_eq!(cfg.psv.workers, 2);
        assert_eq!(cfg.data.spec.ship_fraction, Some(1e-3));
    }

    #[test]
    fn unknown_and_repeated_keys_are_named() {
        let err = RunConfig::parse("[sn]\nlearning_rate = 1\n").unwrap_err().to_string();
        assert!(err.contains("sn.learning_rate"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(err.contains("'seed'"), "{err}");
        let err = RunConfig::parse("[psv]\nworkers = many\n").unwrap_err().to_string();
        assert!(err.contains("psv.workers"), "{err}");
    }

    #[test]
    fn ini_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("psv.lr", "0.002").unwrap();
        cfg.set("model.channels", "4,8").unwrap();
        cfg.set("data.ship_fraction", "0.001").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_ini()).unwrap(), cfg);
    }

    #[test]
    fn automatic_step_size_is_two_epochs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sn_config().optimizer.cyclic.unwrap().step_size, 2 * 32);
    }
}
