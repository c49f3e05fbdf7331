//! Experiment configuration and its flat `key = value` file format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::client::SgdConfig;
use crate::dualnet::{Alpha, Channels};
use crate::error::{Error, Result};
use crate::server::{ServerConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Offsets and the double-channel model.
    Distrans,
    /// Plain model averaging: `alpha = 0`, offsets stay at zero, no offset
    /// aggregation.
    Fedavg,
    /// Offsets with only the first input channel.
    SingleChannel,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Distrans => "distrans",
            Mode::Fedavg => "fedavg",
            Mode::SingleChannel => "single_channel",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "distrans" => Ok(Mode::Distrans),
            "fedavg" => Ok(Mode::Fedavg),
            "single_channel" | "single" => Ok(Mode::SingleChannel),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (distrans|fedavg|single_channel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Share of each class kept for training; the rest is test data.
    pub train_fraction: f64,
    /// Frozen partition of the training split, instead of drawing one.
    pub partition: Option<PathBuf>,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lr_model: f64,
    pub lr_offset: f64,
    pub strategy: Strategy,
    pub mode: Mode,
    pub dh_threshold: f64,
    pub aggregator_lr: f64,
    pub aggregator_steps: usize,
    pub warm_start: bool,
    pub hidden: Vec<usize>,
    pub dense_width: usize,
    pub seed: u64,
    /// `1` runs clients sequentially, `0` uses every core.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub log_steps: bool,
    /// Augment each client's test set with as many other-class samples,
    /// which must be rejected.
    pub negative_eval: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_classes: 8,
            per_class: 100,
            dim: 16,
            spread: 1.0,
            train_fraction: 0.5,
            partition: None,
            num_clients: 8,
            classes_per_client: 1,
            rounds: 50,
            epochs: 1,
            batch_size: 16,
            alpha: 0.3,
            lr_model: 5e-3,
            lr_offset: 1e-3,
            strategy: Strategy::Auto,
            mode: Mode::Distrans,
            dh_threshold: 0.5,
            aggregator_lr: 1e-2,
            aggregator_steps: 200,
            warm_start: true,
            hidden: vec![64, 32],
            dense_width: 32,
            seed: 1,
            workers: 0,
            output_dir: None,
            log_steps: false,
            negative_eval: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "num_classes",
    "per_class",
    "dim",
    "spread",
    "train_fraction",
    "partition",
    "num_clients",
    "classes_per_client",
    "rounds",
    "epochs",
    "batch_size",
    "alpha",
    "lr_model",
    "lr_offset",
    "strategy",
    "mode",
    "dh_threshold",
    "aggregator_lr",
    "aggregator_steps",
    "warm_start",
    "hidden",
    "dense_width",
    "seed",
    "workers",
    "output_dir",
    "log_steps",
    "negative_eval",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "num_classes" => self.num_classes = parse(key, v)?,
            "per_class" => self.per_class = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "spread" => self.spread = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "partition" => self.partition = (!v.is_empty()).then(|| PathBuf::from(v)),
            "num_clients" => self.num_clients = parse(key, v)?,
            "classes_per_client" => self.classes_per_client = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lr_model" => self.lr_model = parse(key, v)?,
            "lr_offset" => self.lr_offset = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "dh_threshold" => self.dh_threshold = parse(key, v)?,
            "aggregator_lr" => self.aggregator_lr = parse(key, v)?,
            "aggregator_steps" => self.aggregator_steps = parse(key, v)?,
            "warm_start" => self.warm_start = parse_bool(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|h| parse(key, h.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "dense_width" => self.dense_width = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "log_steps" => self.log_steps = parse_bool(key, v)?,
            "negative_eval" => self.negative_eval = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_str_config(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_str(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str_config(&text)
    }

    /// Serialises every key, so `from_str_config(to_config_string())` is
    /// the identity.
    pub fn to_config_string(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        let values = [
            self.num_classes.to_string(),
            self.per_class.to_string(),
            self.dim.to_string(),
            self.spread.to_string(),
            self.train_fraction.to_string(),
            path(&self.partition),
            self.num_clients.to_string(),
            self.classes_per_client.to_string(),
            self.rounds.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.alpha.to_string(),
            self.lr_model.to_string(),
            self.lr_offset.to_string(),
            self.strategy.to_string(),
            self.mode.to_string(),
            self.dh_threshold.to_string(),
            self.aggregator_lr.to_string(),
            self.aggregator_steps.to_string(),
            self.warm_start.to_string(),
            hidden.join(","),
            self.dense_width.to_string(),
            self.seed.to_string(),
            self.workers.to_string(),
            path(&self.output_dir),
            self.log_steps.to_string(),
            self.negative_eval.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Alpha and strategy after the mode's overrides.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Fedavg => 0.0,
            _ => self.alpha,
        }
    }

    pub fn effective_strategy(&self) -> Strategy {
        match self.mode {
            Mode::Fedavg => Strategy::None,
            _ => self.strategy,
        }
    }

    pub fn channels(&self) -> Channels {
        match self.mode {
            Mode::SingleChannel => Channels::Single,
            _ => Channels::Dual,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_model: self.lr_model,
            lr_offset: self.lr_offset,
            batch_size: self.batch_size,
        }
    }

    pub fn server(&self) -> ServerConfig {
        ServerConfig {
            strategy: self.effective_strategy(),
            dh_threshold: self.dh_threshold,
            aggregator_lr: self.aggregator_lr,
            aggregator_steps: self.aggregator_steps,
            warm_start: self.warm_start,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.per_class < 2 {
            return fail("per_class must be at least 2 so every class can be split".into());
        }
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if self.dense_width == 0 || self.hidden.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return fail(format!(
                "spread must be finite and >= 0, got {}",
                self.spread
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.partition.is_none()
            && (self.classes_per_client == 0
                || self.classes_per_client > self.num_classes
                || self.num_clients * self.classes_per_client < self.num_classes)
        {
            return fail(format!(
                "{} clients with {} classes each cannot cover {} classes",
                self.num_clients, self.classes_per_client, self.num_classes
            ));
        }
        if !(self.lr_model >= 0.0
            && self.lr_model.is_finite()
            && self.lr_offset >= 0.0
            && self.lr_offset.is_finite())
        {
            return fail("learning rates must be finite and >= 0".into());
        }
        Alpha::new(self.alpha)?;
        self.sgd().validate()?;
        self.server().validate()?;
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_values() {
        let cfg = ExperimentConfig::from_str_config(
            "# experiment\nrounds = 3\n\nmode = fedavg  # baseline\nhidden = 8, 4\nstrategy=average\nwarm_start = false\n",
        )
        .unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.mode, Mode::Fedavg);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.strategy, Strategy::Average);
        assert!(!cfg.warm_start);
        assert_eq!(cfg.effective_alpha(), 0.0);
        assert_eq!(cfg.effective_strategy(), Strategy::None);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in [
            "rounds 3",
            "colour = red",
            "rounds = three",
            "alpha = 1.5",
            "rounds = 0",
            "mode = central",
        ] {
            let err = ExperimentConfig::from_str_config(text).and_then(|c| c.validate());
            assert!(err.unwrap_err().is_config(), "{text}");
        }
    }

    #[test]
    fn infeasible_coverage_fails_validation() {
        let cfg = ExperimentConfig {
            num_clients: 2,
            classes_per_client: 1,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(
            (d.alpha, d.lr_model, d.lr_offset, d.epochs),
            (0.3, 5e-3, 1e-3, 1)
        );
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = ExperimentConfig {
            partition: Some("p.json".into()),
            output_dir: Some("out".into()),
            hidden: vec![],
            mode: Mode::SingleChannel,
            spread: 0.75,
            ..ExperimentConfig::default()
        };
        assert_eq!(
            ExperimentConfig::from_str_config(&cfg.to_config_string()).unwrap(),
            cfg
        );
        assert_eq!(cfg.to_config_string().lines().count(), KEYS.len());
    }
}
