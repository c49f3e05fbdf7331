//! Two one-dimensional motivating problems for input offsets `x + p x + q`:
//! aligning the loss landscapes of two cosine-fitting clients by searching
//! `q`, and federated linear regression where each client also learns `q`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::exec::Executor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClientSpec {
    /// One value for the cosine problem, two for linear regression.
    pub w_true: Vec<f64>,
    pub noise_std: f64,
    pub n: usize,
    pub seed: u64,
}

impl ToyClientSpec {
    pub fn new(w_true: Vec<f64>, noise_std: f64, n: usize, seed: u64) -> Self {
        ToyClientSpec {
            w_true,
            noise_std,
            n,
            seed,
        }
    }

    fn validate(&self, dims: usize) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!(
                "toy client needs n >= 2, got {}",
                self.n
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if self.w_true.len() != dims {
            return Err(Error::Config(format!(
                "w_true has {} components, this problem needs {dims}",
                self.w_true.len()
            )));
        }
        Ok(())
    }

    /// `x ~ N(0, 1)`, `y = cos(w x) + noise`.
    pub fn cosine_data(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate(1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let w = self.w_true[0];
        let mut xs = Vec::with_capacity(self.n);
        let mut ys = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push((w * x).cos() + self.noise_std * e);
        }
        Ok((xs, ys))
    }

    /// `x ~ N(0, I_2)`, `y = w . x + noise`.
    pub fn linear_data(&self) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        self.validate(2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let w = [self.w_true[0], self.w_true[1]];
        let mut xs = Vec::with_capacity(self.n);
        let mut ys = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let x = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let e: f64 = rng.sample(StandardNormal);
            ys.push(w[0] * x[0] + w[1] * x[1] + self.noise_std * e);
            xs.push(x);
        }
        Ok((xs, ys))
    }
}

/// Offset `p x + q` added to the input. `p` is shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearOffsetSpec {
    pub p: f64,
    pub q: f64,
}

impl LinearOffsetSpec {
    pub fn apply(&self, x: f64) -> f64 {
        x + self.p * x + self.q
    }
}

pub const DEFAULT_P: f64 = 0.1;

/// `[lo, hi]` in steps of `step`, computed by index to avoid drift.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

pub fn default_w_grid() -> Vec<f64> {
    grid(-5.0, 5.0, 0.05)
}

pub fn default_q_grid() -> Vec<f64> {
    grid(-3.0, 3.0, 0.05)
}

fn curve_on(xs: &[f64], ys: &[f64], offset: Option<LinearOffsetSpec>, w_grid: &[f64]) -> Vec<f64> {
    let xt: Vec<f64> = match offset {
        Some(o) => xs.iter().map(|&x| o.apply(x)).collect(),
        None => xs.to_vec(),
    };
    w_grid
        .iter()
        .map(|&w| {
            xt.iter()
                .zip(ys)
                .map(|(&x, &y)| ((w * x).cos() - y).powi(2))
                .sum::<f64>()
                / xt.len() as f64
        })
        .collect()
}

/// Mean squared error of `cos(w x~)` against the client's targets for every
/// `w` in the grid.
pub fn cosine_loss_curve(
    spec: &ToyClientSpec,
    offset: Option<LinearOffsetSpec>,
    w_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if w_grid.is_empty() {
        return Err(Error::Config("w_grid is empty".into()));
    }
    let (xs, ys) = spec.cosine_data()?;
    Ok(w_grid
        .iter()
        .copied()
        .zip(curve_on(&xs, &ys, offset, w_grid))
        .collect())
}

/// Sum of squared pointwise differences between two loss curves.
pub fn curve_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSearch {
    pub q1: f64,
    pub q2: f64,
    pub discrepancy: f64,
    /// Discrepancy with both offsets at `q = 0`.
    pub baseline: f64,
}

pub fn brute_force_q(
    spec1: &ToyClientSpec,
    spec2: &ToyClientSpec,
    p: f64,
    q_grid: &[f64],
    w_grid: &[f64],
) -> Result<QSearch> {
    brute_force_q_with(&Executor::sequential(), spec1, spec2, p, q_grid, w_grid)
}

/// Exhaustive search over `(q1, q2)` pairs. Ties go to the pair with the
/// smallest `|q1| + |q2|`, then to grid order.
pub fn brute_force_q_with(
    exec: &Executor,
    spec1: &ToyClientSpec,
    spec2: &ToyClientSpec,
    p: f64,
    q_grid: &[f64],
    w_grid: &[f64],
) -> Result<QSearch> {
    if q_grid.is_empty() || w_grid.is_empty() {
        return Err(Error::Config("q_grid and w_grid must be nonempty".into()));
    }
    let (x1, y1) = spec1.cosine_data()?;
    let (x2, y2) = spec2.cosine_data()?;
    let curves = |xs: &[f64], ys: &[f64]| {
        exec.map(q_grid, |_, &q| {
            curve_on(xs, ys, Some(LinearOffsetSpec { p, q }), w_grid)
        })
    };
    let c1 = curves(&x1, &y1);
    let c2 = curves(&x2, &y2);

    let rows = exec.map(&c1, |i, a| {
        let mut best = (f64::INFINITY, f64::INFINITY, i, 0usize);
        for (j, b) in c2.iter().enumerate() {
            let cand = (
                curve_discrepancy(a, b),
                q_grid[i].abs() + q_grid[j].abs(),
                i,
                j,
            );
            if better(cand, best) {
                best = cand;
            }
        }
        best
    });
    let (discrepancy, _, i, j) =
        rows.into_iter()
            .fold((f64::INFINITY, f64::INFINITY, 0, 0), |acc, r| {
                if better(r, acc) {
                    r
                } else {
                    acc
                }
            });

    let zero = LinearOffsetSpec { p, q: 0.0 };
    let baseline = curve_discrepancy(
        &curve_on(&x1, &y1, Some(zero), w_grid),
        &curve_on(&x2, &y2, Some(zero), w_grid),
    );
    Ok(QSearch {
        q1: q_grid[i],
        q2: q_grid[j],
        discrepancy,
        baseline,
    })
}

fn better(a: (f64, f64, usize, usize), b: (f64, f64, usize, usize)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then((a.2, a.3).cmp(&(b.2, b.3)))
        .is_lt()
}

/// Rows `w,loss_client1,loss_client2`.
pub fn curves_csv(w_grid: &[f64], loss1: &[f64], loss2: &[f64]) -> String {
    let mut s = String::from("w,loss_client1,loss_client2\n");
    for ((w, a), b) in w_grid.iter().zip(loss1).zip(loss2) {
        let _ = writeln!(s, "{w:.6},{a:.6},{b:.6}");
    }
    s
}

/// Rows `round,loss`.
pub fn trajectory_csv(losses: &[f64]) -> String {
    let mut s = String::from("round,loss\n");
    for (r, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{r},{l:.6}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedLinearConfig {
    pub with_offsets: bool,
    pub rounds: usize,
    /// Learning rate for `w`.
    pub lr: f64,
    /// Learning rate for each client's `q`; 0 freezes the intercepts.
    pub lr_q: f64,
    pub p: f64,
    pub seed: u64,
}

impl FedLinearConfig {
    pub fn new(with_offsets: bool, rounds: usize, lr: f64, seed: u64) -> Self {
        FedLinearConfig {
            with_offsets,
            rounds,
            lr,
            lr_q: lr,
            p: DEFAULT_P,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedLinearRun {
    /// Training loss of the aggregated `w` after each round, averaged over
    /// both clients on their offset inputs.
    pub losses: Vec<f64>,
    pub w: [f64; 2],
    pub q: [[f64; 2]; 2],
}

const LINEAR_DIVERGENCE: f64 = 1e9;

pub fn federated_linear_regression(
    specs: &[ToyClientSpec; 2],
    with_offsets: bool,
    rounds: usize,
    lr: f64,
    seed: u64,
) -> Result<FedLinearRun> {
    federated_linear_regression_with(specs, &FedLinearConfig::new(with_offsets, rounds, lr, seed))
}

/// Each round both clients start from the averaged `w` and make one
/// shuffled pass of single-sample SGD. With offsets, every sample first
/// updates the client's `q` and then `w` on the re-offset input, mirroring
/// the offset-then-model order of the main protocol.
pub fn federated_linear_regression_with(
    specs: &[ToyClientSpec; 2],
    cfg: &FedLinearConfig,
) -> Result<FedLinearRun> {
    if cfg.rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let data = [specs[0].linear_data()?, specs[1].linear_data()?];
    let mut rngs = [0u64, 1].map(|k| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x70 + k)));
    let p = if cfg.with_offsets { cfg.p } else { 0.0 };
    let tilde = |x: &[f64; 2], q: &[f64; 2]| [x[0] + p * x[0] + q[0], x[1] + p * x[1] + q[1]];
    let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];

    let mut w = [0.0; 2];
    let mut q = [[0.0; 2]; 2];
    let mut losses = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut local = [w; 2];
        for k in 0..2 {
            let (xs, ys) = &data[k];
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut rngs[k]);
            let wk = &mut local[k];
            for &i in &order {
                if cfg.with_offsets {
                    let res = dot(wk, &tilde(&xs[i], &q[k])) - ys[i];
                    for d in 0..2 {
                        q[k][d] -= cfg.lr_q * 2.0 * res * wk[d];
                    }
                }
                let xt = tilde(&xs[i], &q[k]);
                let res = dot(wk, &xt) - ys[i];
                for d in 0..2 {
                    wk[d] -= cfg.lr * 2.0 * res * xt[d];
                }
            }
        }
        w = [
            (local[0][0] + local[1][0]) / 2.0,
            (local[0][1] + local[1][1]) / 2.0,
        ];

        let loss = (0..2)
            .map(|k| {
                let (xs, ys) = &data[k];
                xs.iter()
                    .zip(ys)
                    .map(|(x, y)| (dot(&w, &tilde(x, &q[k])) - y).powi(2))
                    .sum::<f64>()
                    / xs.len() as f64
            })
            .sum::<f64>()
            / 2.0;
        if !(loss <= LINEAR_DIVERGENCE) {
            return Err(Error::Divergence {
                what: "federated linear regression",
                loss,
                limit: LINEAR_DIVERGENCE,
            });
        }
        losses.push(loss);
    }
    Ok(FedLinearRun { losses, w, q })
}
