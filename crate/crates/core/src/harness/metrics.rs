//! Per-round records and their CSV renderings.

use std::fmt::Write as _;

use crate::server::{ServerRoundLog, Strategy};

pub const METRICS_HEADER: &str = "round,client,train_loss,test_acc,dh,strategy,bytes_up,bytes_down";
pub const SERVER_HEADER: &str =
    "round,dh,strategy_resolved,aggregator_loss_initial,aggregator_loss_final";
pub const STEPS_HEADER: &str = "round,client,batch,loss";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub dh: f64,
    pub strategy: Strategy,
    pub bytes_up: Vec<usize>,
    pub bytes_down: Vec<usize>,
    pub server: ServerRoundLog,
}

impl RoundRecord {
    /// Unweighted mean of the clients' accuracies.
    pub fn mean_test_acc(&self) -> f64 {
        self.test_acc.iter().sum::<f64>() / self.test_acc.len() as f64
    }

    pub fn mean_train_loss(&self) -> f64 {
        self.train_loss.iter().sum::<f64>() / self.train_loss.len() as f64
    }
}

/// One row per client and round, then a `client = -1` row with the means of
/// loss and accuracy and the summed byte counts.
pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        for i in 0..r.test_acc.len() {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{},{}",
                r.round,
                i,
                r.train_loss[i],
                r.test_acc[i],
                r.dh,
                r.strategy,
                r.bytes_up[i],
                r.bytes_down[i]
            );
        }
        let _ = writeln!(
            s,
            "{},-1,{:.6},{:.6},{:.6},{},{},{}",
            r.round,
            r.mean_train_loss(),
            r.mean_test_acc(),
            r.dh,
            r.strategy,
            r.bytes_up.iter().sum::<usize>(),
            r.bytes_down.iter().sum::<usize>()
        );
    }
    s
}

pub fn server_csv(records: &[RoundRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = format!("{SERVER_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{}",
            r.server.round,
            r.server.dh,
            r.server.strategy,
            opt(r.server.aggregator_loss_initial),
            opt(r.server.aggregator_loss_final)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub round: usize,
    pub client: usize,
    pub batch: usize,
    pub loss: f64,
}

pub fn steps_csv(rows: &[StepRow]) -> String {
    let mut s = format!("{STEPS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6}", r.round, r.client, r.batch, r.loss);
    }
    s
}
