//! One-axis ablations over a base configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use super::config::{ExperimentConfig, Mode};
use super::runner::run_experiment_with;
use crate::error::{Error, Result};
use crate::exec::{Executor, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Epochs,
    Strategy,
    /// `single` or `double`.
    Channels,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Epochs => "epochs",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Channels => "channels",
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Alpha => cfg.set("alpha", value)?,
            SweepAxis::Epochs => cfg.set("epochs", value)?,
            SweepAxis::Strategy => cfg.set("strategy", value)?,
            SweepAxis::Channels => {
                cfg.mode = match value.trim() {
                    "single" => Mode::SingleChannel,
                    "double" | "dual" => Mode::Distrans,
                    other => {
                        return Err(Error::Config(format!(
                            "channels must be single or double, got {other:?}"
                        )))
                    }
                }
            }
        }
        cfg.output_dir = None;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "alpha" => Ok(SweepAxis::Alpha),
            "epochs" => Ok(SweepAxis::Epochs),
            "strategy" => Ok(SweepAxis::Strategy),
            "channels" => Ok(SweepAxis::Channels),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (alpha|epochs|strategy|channels)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},final_accuracy\n", self.axis.as_str());
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6}", r.value, r.final_accuracy);
        }
        s
    }

    pub fn accuracy(&self, value: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.value == value)
            .map(|r| r.final_accuracy)
    }
}

pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepTable> {
    let exec = Executor::new(Parallelism::from_workers(base.workers))?;
    ablation_sweep_with(&exec, base, axis, values)
}

/// Runs one experiment per value, spreading the runs over `exec`; every
/// run itself is sequential and shares the base seed.
pub fn ablation_sweep_with(
    exec: &Executor,
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let seq = Executor::sequential();
    let accs = exec.map(&configs, |_, cfg| {
        run_experiment_with(cfg, &seq).map(|o| o.final_accuracy())
    });
    let rows = values
        .iter()
        .zip(accs)
        .map(|(v, a)| {
            Ok(SweepRow {
                value: v.trim().to_string(),
                final_accuracy: a?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { axis, rows })
}
