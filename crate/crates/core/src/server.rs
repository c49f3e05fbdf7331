//! Server side of a round: model averaging and heterogeneity-gated offset
//! aggregation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::ClassEmbedding;
use crate::derive_seed;
use crate::dualnet::{ModelParams, Offset};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{sgd_step_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Pick `Nn` or `None` from the measured heterogeneity.
    Auto,
    None,
    Average,
    Nn,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Auto => "auto",
            Strategy::None => "none",
            Strategy::Average => "average",
            Strategy::Nn => "nn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Strategy::Auto),
            "none" | "no" => Ok(Strategy::None),
            "average" | "avg" => Ok(Strategy::Average),
            "nn" => Ok(Strategy::Nn),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (auto|none|average|nn)"
            ))),
        }
    }
}

/// Offsets are aggregated with the regressor only when heterogeneity is
/// strictly below `threshold`.
pub fn select_strategy(dh: f64, threshold: f64, requested: Strategy) -> Strategy {
    match requested {
        Strategy::Auto if dh < threshold => Strategy::Nn,
        Strategy::Auto => Strategy::None,
        other => other,
    }
}

/// Running mean, so that averaging identical values is exact.
fn mean_into(acc: &mut [f64], x: &[f64], count: usize) {
    let k = count as f64;
    for (a, v) in acc.iter_mut().zip(x) {
        *a += (v - *a) / k;
    }
}

pub fn aggregate_models(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("aggregate_models on an empty list".into()))?;
    let arch = first.architecture();
    let mut out = first.clone();
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.architecture() != arch {
            return Err(Error::dim(
                "aggregate_models",
                format!("client {i} has a different architecture"),
            ));
        }
        for (acc, t) in out.tensors_mut().into_iter().zip(m.tensors()) {
            mean_into(acc.data_mut(), t.data(), i + 1);
        }
    }
    Ok(out)
}

pub fn aggregate_offsets_average(offsets: &[Offset]) -> Result<Offset> {
    let first = offsets
        .first()
        .ok_or_else(|| Error::Contract("aggregate_offsets_average on an empty list".into()))?;
    let mut acc = first.tensor().clone();
    for (i, o) in offsets.iter().enumerate().skip(1) {
        if o.shape() != acc.shape() {
            return Err(Error::dim(
                "aggregate_offsets_average",
                format!(
                    "offset {i} has shape {:?}, expected {:?}",
                    o.shape(),
                    acc.shape()
                ),
            ));
        }
        mean_into(acc.data_mut(), o.tensor().data(), i + 1);
    }
    Offset::new(acc)
}

pub const AGGREGATOR_HIDDEN: usize = 64;
const AGGREGATOR_DIVERGENCE: f64 = 1e6;

/// Regressor `(e, t) -> t + head(relu(hidden([t, e])))`. The head starts at
/// zero, so a fresh net returns its input offset unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetAggregatorNet {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl OffsetAggregatorNet {
    pub fn new(offset_dim: usize, num_classes: usize, seed: u64) -> Self {
        let inp = offset_dim + num_classes;
        let limit = (6.0 / inp as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..inp * AGGREGATOR_HIDDEN)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        OffsetAggregatorNet {
            hidden_weight: Tensor::new(vec![inp, AGGREGATOR_HIDDEN], w).expect("shape matches"),
            hidden_bias: Tensor::zeros(&[AGGREGATOR_HIDDEN]),
            head_weight: Tensor::zeros(&[AGGREGATOR_HIDDEN, offset_dim]),
            head_bias: Tensor::zeros(&[offset_dim]),
        }
    }

    pub fn offset_dim(&self) -> usize {
        self.head_bias.len()
    }

    pub fn num_classes(&self) -> usize {
        self.hidden_weight.shape()[0] - self.offset_dim()
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [
            &self.hidden_weight,
            &self.hidden_bias,
            &self.head_weight,
            &self.head_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]
    }

    fn stack_inputs(
        &self,
        embeddings: &[&ClassEmbedding],
        offsets: &[&Offset],
    ) -> Result<(Tensor, Tensor)> {
        if embeddings.len() != offsets.len() {
            return Err(Error::dim(
                "offset aggregator",
                format!(
                    "{} embeddings for {} offsets",
                    embeddings.len(),
                    offsets.len()
                ),
            ));
        }
        let d = self.offset_dim();
        let n = self.num_classes();
        let mut x = Vec::with_capacity(offsets.len() * (d + n));
        let mut t = Vec::with_capacity(offsets.len() * d);
        for (i, (e, o)) in embeddings.iter().zip(offsets).enumerate() {
            if o.len() != d || e.0.len() != n {
                return Err(Error::dim(
                    "offset aggregator",
                    format!(
                        "pair {i}: offset of {} values and embedding of {}, expected {d} and {n}",
                        o.len(),
                        e.0.len()
                    ),
                ));
            }
            x.extend_from_slice(o.tensor().data());
            x.extend_from_slice(&e.0);
            t.extend_from_slice(o.tensor().data());
        }
        Ok((
            Tensor::matrix(offsets.len(), d + n, x)?,
            Tensor::matrix(offsets.len(), d, t)?,
        ))
    }

    /// Records the network on `tape` and returns the output rows and the
    /// parameter handles.
    fn forward_vars(
        &self,
        tape: &mut Tape,
        x: Tensor,
        t: Tensor,
    ) -> Result<(crate::tape::Var, [crate::tape::Var; 4])> {
        let vars = self.tensors().map(|p| tape.leaf(p.clone()));
        let x = tape.constant(x);
        let t = tape.constant(t);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row_bias(h, vars[1])?;
        let h = tape.relu(h);
        let r = tape.matmul(h, vars[2])?;
        let r = tape.add_row_bias(r, vars[3])?;
        let out = tape.add(t, r)?;
        Ok((out, vars))
    }

    pub fn apply(&self, embedding: &ClassEmbedding, offset: &Offset) -> Result<Offset> {
        let (x, t) = self.stack_inputs(&[embedding], &[offset])?;
        let mut tape = Tape::new();
        let (out, _) = self.forward_vars(&mut tape, x, t)?;
        Offset::new(tape.value(out).clone().reshape(offset.shape().to_vec())?)
    }

    /// Sum over pairs of the L2 distance between the net's output and the target.
    pub fn loss(&self, pairs: &[AggregatorPair]) -> Result<f64> {
        Ok(self.loss_and_grads(pairs)?.0)
    }

    fn loss_and_grads(&self, pairs: &[AggregatorPair]) -> Result<(f64, Vec<Tensor>)> {
        let embeddings: Vec<&ClassEmbedding> = pairs.iter().map(|p| &p.embedding).collect();
        let current: Vec<&Offset> = pairs.iter().map(|p| &p.current).collect();
        let (x, t) = self.stack_inputs(&embeddings, &current)?;
        let d = self.offset_dim();
        let mut target = Vec::with_capacity(pairs.len() * d);
        for (i, p) in pairs.iter().enumerate() {
            if p.target.len() != d {
                return Err(Error::dim(
                    "train_aggregator",
                    format!("pair {i}: target has {} values", p.target.len()),
                ));
            }
            target.extend_from_slice(p.target.tensor().data());
        }
        let mut tape = Tape::new();
        let (out, vars) = self.forward_vars(&mut tape, x, t)?;
        let target = tape.constant(Tensor::matrix(pairs.len(), d, target)?);
        let diff = tape.sub(out, target)?;
        let loss = tape.sum_row_norms(diff)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| grads.take(v).expect("parameter is a leaf"))
            .collect();
        Ok((value, grads))
    }
}

/// One regression example: the client's embedding and current offset as
/// input, the offset the server produced for it last round as target.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorPair {
    pub embedding: ClassEmbedding,
    pub current: Offset,
    pub target: Offset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorFit {
    pub net: OffsetAggregatorNet,
    pub loss_initial: f64,
    pub loss_final: f64,
}

/// Full-batch gradient descent on the summed L2 regression loss.
pub fn train_aggregator(
    net: &OffsetAggregatorNet,
    pairs: &[AggregatorPair],
    lr: f64,
    steps: usize,
) -> Result<AggregatorFit> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "train_aggregator needs at least one pair".into(),
        ));
    }
    if steps == 0 {
        return Err(Error::Config("aggregator steps must be at least 1".into()));
    }
    let mut net = net.clone();
    let diverged = |loss: f64| Error::Divergence {
        what: "offset aggregator",
        loss,
        limit: AGGREGATOR_DIVERGENCE,
    };
    let mut loss_initial = None;
    for _ in 0..steps {
        let (loss, grads) = net.loss_and_grads(pairs)?;
        if !(loss <= AGGREGATOR_DIVERGENCE) {
            return Err(diverged(loss));
        }
        loss_initial.get_or_insert(loss);
        for (p, g) in net.tensors_mut().into_iter().zip(&grads) {
            sgd_step_in_place(p, g, lr)?;
        }
    }
    let loss_final = net.loss(pairs)?;
    if !(loss_final <= AGGREGATOR_DIVERGENCE) {
        return Err(diverged(loss_final));
    }
    Ok(AggregatorFit {
        net,
        loss_initial: loss_initial.expect("steps >= 1"),
        loss_final,
    })
}

/// Seeded regression pairs: client `i` holds class `i % num_classes` only,
/// its current offset is standard normal and its target is that offset
/// moved by a client-specific shift of scale `shift`.
pub fn synthetic_pairs(
    num_pairs: usize,
    offset_dim: usize,
    num_classes: usize,
    shift: f64,
    seed: u64,
) -> Vec<AggregatorPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| {
        Tensor::vector(
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    };
    (0..num_pairs)
        .map(|i| {
            let mut e = vec![0.0; num_classes];
            e[i % num_classes] = 1.0;
            let current = normal(offset_dim);
            let target = current
                .add(&normal(offset_dim).scale(shift))
                .expect("same shape");
            AggregatorPair {
                embedding: ClassEmbedding(e),
                current: Offset::new(current).expect("finite"),
                target: Offset::new(target).expect("finite"),
            }
        })
        .collect()
}

pub fn aggregate_offsets_nn(
    net: &OffsetAggregatorNet,
    embeddings: &[ClassEmbedding],
    offsets: &[Offset],
) -> Result<Vec<Offset>> {
    if embeddings.len() != offsets.len() {
        return Err(Error::dim(
            "aggregate_offsets_nn",
            format!(
                "{} embeddings for {} offsets",
                embeddings.len(),
                offsets.len()
            ),
        ));
    }
    embeddings
        .iter()
        .zip(offsets)
        .map(|(e, t)| net.apply(e, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub strategy: Strategy,
    pub dh_threshold: f64,
    pub aggregator_lr: f64,
    pub aggregator_steps: usize,
    /// Keep training one network across rounds instead of starting fresh.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            strategy: Strategy::Auto,
            dh_threshold: 0.5,
            aggregator_lr: 1e-2,
            aggregator_steps: 200,
            warm_start: true,
            seed: 0,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dh_threshold) {
            return Err(Error::Config(format!(
                "dh_threshold must lie in [0, 1], got {}",
                self.dh_threshold
            )));
        }
        if !(self.aggregator_lr >= 0.0 && self.aggregator_lr.is_finite()) {
            return Err(Error::Config(format!(
                "aggregator_lr must be finite and >= 0, got {}",
                self.aggregator_lr
            )));
        }
        if self.aggregator_steps == 0 {
            return Err(Error::Config("aggregator_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// What the server did in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerRoundLog {
    pub round: usize,
    pub dh: f64,
    pub strategy: Strategy,
    pub aggregator_loss_initial: Option<f64>,
    pub aggregator_loss_final: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_model: ModelParams,
    /// Offset to dispatch to each client next round.
    pub offsets: Vec<Offset>,
    pub embeddings: Vec<ClassEmbedding>,
    pub aggregator: Option<OffsetAggregatorNet>,
    previous_aggregated: Option<Vec<Offset>>,
    dh: f64,
    strategy: Strategy,
    cfg: ServerConfig,
}

impl ServerState {
    /// Offsets start at zero. The strategy is resolved once, since the
    /// partition and therefore the heterogeneity are fixed for a run.
    pub fn new(
        global_model: ModelParams,
        embeddings: Vec<ClassEmbedding>,
        dh: f64,
        cfg: ServerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if embeddings.is_empty() {
            return Err(Error::Config("server needs at least one client".into()));
        }
        let d = global_model.input_dim();
        let n = global_model.num_classes();
        if let Some(bad) = embeddings.iter().find(|e| e.0.len() != n) {
            return Err(Error::dim(
                "ServerState",
                format!("embedding of length {} for {n} classes", bad.0.len()),
            ));
        }
        let strategy = select_strategy(dh, cfg.dh_threshold, cfg.strategy);
        let aggregator = (strategy == Strategy::Nn)
            .then(|| OffsetAggregatorNet::new(d, n, derive_seed(cfg.seed, 0xa66)));
        Ok(ServerState {
            offsets: vec![Offset::zeros(&[d]); embeddings.len()],
            global_model,
            embeddings,
            aggregator,
            previous_aggregated: None,
            dh,
            strategy,
            cfg,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dh(&self) -> f64 {
        self.dh
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Folds one round of client results, given in client order, into the
    /// global model and next round's offsets.
    pub fn aggregate_round(
        &mut self,
        round: usize,
        models: &[ModelParams],
        offsets: Vec<Offset>,
    ) -> Result<ServerRoundLog> {
        let c = self.num_clients();
        if models.len() != c || offsets.len() != c {
            return Err(Error::Contract(format!(
                "expected {c} client results, got {} models and {} offsets",
                models.len(),
                offsets.len()
            )));
        }
        self.global_model = aggregate_models(models)?;
        let mut log = ServerRoundLog {
            round,
            dh: self.dh,
            strategy: self.strategy,
            aggregator_loss_initial: None,
            aggregator_loss_final: None,
        };
        self.offsets = match self.strategy {
            Strategy::None | Strategy::Auto => offsets,
            Strategy::Average => vec![aggregate_offsets_average(&offsets)?; c],
            Strategy::Nn => {
                let mut net = match (&self.aggregator, self.cfg.warm_start) {
                    (Some(net), true) => net.clone(),
                    _ => OffsetAggregatorNet::new(
                        self.global_model.input_dim(),
                        self.global_model.num_classes(),
                        derive_seed(self.cfg.seed, 0xa66 ^ ((round as u64) << 16)),
                    ),
                };
                if let Some(previous) = &self.previous_aggregated {
                    let pairs: Vec<AggregatorPair> = self
                        .embeddings
                        .iter()
                        .zip(&offsets)
                        .zip(previous)
                        .map(|((e, t), prev)| AggregatorPair {
                            embedding: e.clone(),
                            current: t.clone(),
                            target: prev.clone(),
                        })
                        .collect();
                    let fit = train_aggregator(
                        &net,
                        &pairs,
                        self.cfg.aggregator_lr,
                        self.cfg.aggregator_steps,
                    )?;
                    log.aggregator_loss_initial = Some(fit.loss_initial);
                    log.aggregator_loss_final = Some(fit.loss_final);
                    net = fit.net;
                }
                let out = aggregate_offsets_nn(&net, &self.embeddings, &offsets)?;
                self.aggregator = Some(net);
                self.previous_aggregated = Some(out.clone());
                out
            }
        };
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualnet::Architecture;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    fn tiny_arch() -> Architecture {
        let mut a = Architecture::new(3, 2);
        a.hidden = vec![4];
        a.dense_width = 3;
        a
    }

    #[test]
    fn strategy_selection() {
        assert_eq!(select_strategy(1.0, 0.5, Strategy::Auto), Strategy::None);
        assert_eq!(select_strategy(0.0, 0.5, Strategy::Auto), Strategy::Nn);
        assert_eq!(select_strategy(0.5, 0.5, Strategy::Auto), Strategy::None);
        assert_eq!(select_strategy(0.49, 0.5, Strategy::Auto), Strategy::Nn);
        for s in [Strategy::None, Strategy::Average, Strategy::Nn] {
            assert_eq!(select_strategy(0.0, 0.5, s), s);
            assert_eq!(select_strategy(1.0, 0.5, s), s);
        }
        assert_eq!("average".parse::<Strategy>().unwrap(), Strategy::Average);
        assert!("mean".parse::<Strategy>().unwrap_err().is_config());
    }

    #[test]
    fn model_mean_of_scalars() {
        let mut a = Architecture::new(1, 1);
        a.hidden = vec![];
        a.dense_width = 1;
        let mut m1 = ModelParams::zeros(&a);
        let mut m3 = ModelParams::zeros(&a);
        m1.dense.weight.data_mut()[0] = 1.0;
        m3.dense.weight.data_mut()[0] = 3.0;
        assert_eq!(
            aggregate_models(&[m1, m3]).unwrap().dense.weight.data()[0],
            2.0
        );
    }

    #[test]
    fn model_mean_matches_oracle() {
        let arch = tiny_arch();
        let ms: Vec<ModelParams> = (0..3)
            .map(|s| ModelParams::init(&arch, s).unwrap())
            .collect();
        let avg = aggregate_models(&ms).unwrap();
        for (k, t) in avg.tensors().iter().enumerate() {
            for (j, &v) in t.data().iter().enumerate() {
                let oracle = (ms[0].tensors()[k].data()[j]
                    + ms[1].tensors()[k].data()[j]
                    + ms[2].tensors()[k].data()[j])
                    / 3.0;
                assert!((v - oracle).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn model_mean_rejects_mixed_shapes() {
        let a = ModelParams::init(&tiny_arch(), 0).unwrap();
        let b = ModelParams::init(&Architecture::new(3, 2), 0).unwrap();
        assert!(matches!(
            aggregate_models(&[a, b]),
            Err(Error::Dimension { .. })
        ));
        assert!(aggregate_models(&[]).is_err());
    }

    #[test]
    fn offset_average_examples() {
        let o = |v: Vec<f64>| Offset::new(Tensor::vector(v)).unwrap();
        assert_eq!(
            aggregate_offsets_average(&[o(vec![0.0, 2.0]), o(vec![2.0, 0.0])]).unwrap(),
            o(vec![1.0, 1.0])
        );
        assert_eq!(
            aggregate_offsets_average(&[o(vec![0.1, -7.0])]).unwrap(),
            o(vec![0.1, -7.0])
        );
        assert!(aggregate_offsets_average(&[o(vec![0.0]), o(vec![1.0, 2.0])]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let os: Vec<Offset> = (0..5)
            .map(|_| Offset::new(random_tensor(&[6], &mut rng)).unwrap())
            .collect();
        let avg = aggregate_offsets_average(&os).unwrap();
        for j in 0..6 {
            let oracle: f64 = os.iter().map(|o| o.tensor().data()[j]).sum::<f64>() / 5.0;
            assert!((avg.tensor().data()[j] - oracle).abs() <= 1e-12);
        }
    }

    fn embedding(v: &[f64]) -> ClassEmbedding {
        ClassEmbedding(v.to_vec())
    }

    #[test]
    fn fresh_aggregator_is_identity() {
        let net = OffsetAggregatorNet::new(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let offsets: Vec<Offset> = (0..4)
            .map(|_| Offset::new(random_tensor(&[5], &mut rng)).unwrap())
            .collect();
        let embs = vec![
            embedding(&[1.0, 0.0, 0.0]),
            embedding(&[0.0, 1.0, 0.5]),
            embedding(&[0.0, 0.0, 0.5]),
            embedding(&[0.0; 3]),
        ];
        assert_eq!(
            aggregate_offsets_nn(&net, &embs, &offsets).unwrap(),
            offsets
        );
        assert!(aggregate_offsets_nn(&net, &embs[..3], &offsets).is_err());
    }

    #[test]
    fn equal_inputs_give_equal_outputs() {
        let mut net = OffsetAggregatorNet::new(2, 2, 3);
        net.head_weight = Tensor::filled(&[AGGREGATOR_HIDDEN, 2], 0.01);
        let e = embedding(&[0.3, 0.7]);
        let t = Offset::new(Tensor::vector(vec![0.5, -0.5])).unwrap();
        let out = aggregate_offsets_nn(&net, &[e.clone(), e], &[t.clone(), t]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zero_lr_leaves_aggregator_unchanged() {
        let net = OffsetAggregatorNet::new(2, 2, 3);
        let pairs = vec![AggregatorPair {
            embedding: embedding(&[1.0, 0.0]),
            current: Offset::new(Tensor::vector(vec![0.0, 0.0])).unwrap(),
            target: Offset::new(Tensor::vector(vec![1.0, 1.0])).unwrap(),
        }];
        let fit = train_aggregator(&net, &pairs, 0.0, 10).unwrap();
        assert_eq!(fit.net, net);
        assert_eq!(fit.loss_initial, fit.loss_final);
        assert!((fit.loss_initial - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matching_target_has_zero_loss_and_gradient() {
        let net = OffsetAggregatorNet::new(3, 2, 3);
        let t = Offset::new(Tensor::vector(vec![0.2, -1.0, 4.0])).unwrap();
        let pairs = vec![AggregatorPair {
            embedding: embedding(&[0.5, 0.5]),
            current: t.clone(),
            target: t,
        }];
        let (loss, grads) = net.loss_and_grads(&pairs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let fit = train_aggregator(&net, &pairs, 1e-2, 5).unwrap();
        assert_eq!(fit.net, net);
    }

    #[test]
    fn aggregator_gradient_matches_finite_differences() {
        let mut net = OffsetAggregatorNet::new(3, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        net.head_weight = random_tensor(&[AGGREGATOR_HIDDEN, 3], &mut rng).scale(0.1);
        net.hidden_bias = random_tensor(&[AGGREGATOR_HIDDEN], &mut rng).scale(0.1);
        let pairs: Vec<AggregatorPair> = (0..3)
            .map(|i| AggregatorPair {
                embedding: embedding(&[i as f64 / 3.0, 1.0 - i as f64 / 3.0]),
                current: Offset::new(random_tensor(&[3], &mut rng)).unwrap(),
                target: Offset::new(random_tensor(&[3], &mut rng)).unwrap(),
            })
            .collect();
        let (_, grads) = net.loss_and_grads(&pairs).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            for j in (0..grads[k].len()).step_by(7) {
                let mut plus = net.clone();
                plus.tensors_mut()[k].data_mut()[j] += h;
                let mut minus = net.clone();
                minus.tensors_mut()[k].data_mut()[j] -= h;
                let fd = (plus.loss(&pairs).unwrap() - minus.loss(&pairs).unwrap()) / (2.0 * h);
                let g = grads[k].data()[j];
                assert!(
                    (fd - g).abs() <= 1e-6 * (1.0 + g.abs()),
                    "tensor {k}[{j}]: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn four_pair_fixture_halves_the_loss() {
        let pairs = synthetic_pairs(4, 8, 4, 1.0, 42);
        let net = OffsetAggregatorNet::new(8, 4, 7);
        let fit = train_aggregator(&net, &pairs, 1e-2, 200).unwrap();
        assert!(fit.loss_final < 0.5 * fit.loss_initial);
        let e: Vec<ClassEmbedding> = pairs.iter().map(|p| p.embedding.clone()).collect();
        let t: Vec<Offset> = pairs.iter().map(|p| p.current.clone()).collect();
        let outs = aggregate_offsets_nn(&fit.net, &e, &t).unwrap();
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let net = OffsetAggregatorNet::new(1, 1, 0);
        let pairs = vec![AggregatorPair {
            embedding: embedding(&[1.0]),
            current: Offset::new(Tensor::vector(vec![0.0])).unwrap(),
            target: Offset::new(Tensor::vector(vec![2e6])).unwrap(),
        }];
        assert!(matches!(
            train_aggregator(&net, &pairs, 1e-2, 3),
            Err(Error::Divergence { .. })
        ));
    }

    fn server(strategy: Strategy, dh: f64) -> ServerState {
        let arch = tiny_arch();
        let embs = vec![embedding(&[1.0, 0.5]), embedding(&[0.0, 0.5])];
        let cfg = ServerConfig {
            strategy,
            aggregator_steps: 20,
            ..ServerConfig::default()
        };
        ServerState::new(ModelParams::init(&arch, 0).unwrap(), embs, dh, cfg).unwrap()
    }

    #[test]
    fn none_strategy_round_trips_offsets() {
        let mut s = server(Strategy::Auto, 1.0);
        assert_eq!(s.strategy(), Strategy::None);
        assert!(s.aggregator.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let offsets: Vec<Offset> = (0..2)
            .map(|_| Offset::new(random_tensor(&[3], &mut rng)).unwrap())
            .collect();
        let models = vec![ModelParams::init(&tiny_arch(), 1).unwrap(); 2];
        let log = s.aggregate_round(0, &models, offsets.clone()).unwrap();
        assert_eq!(s.offsets, offsets);
        assert_eq!(s.global_model, models[0]);
        assert_eq!(log.aggregator_loss_final, None);
    }

    #[test]
    fn average_strategy_broadcasts_the_mean() {
        let mut s = server(Strategy::Average, 1.0);
        let o = |v: Vec<f64>| Offset::new(Tensor::vector(v)).unwrap();
        let models = vec![ModelParams::init(&tiny_arch(), 1).unwrap(); 2];
        s.aggregate_round(
            0,
            &models,
            vec![o(vec![0.0, 2.0, 4.0]), o(vec![2.0, 0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(s.offsets, vec![o(vec![1.0, 1.0, 2.0]); 2]);
    }

    #[test]
    fn nn_strategy_trains_from_round_one() {
        let mut s = server(Strategy::Auto, 0.0);
        assert_eq!(s.strategy(), Strategy::Nn);
        let models = vec![ModelParams::init(&tiny_arch(), 1).unwrap(); 2];
        let o = |v: Vec<f64>| Offset::new(Tensor::vector(v)).unwrap();
        let first = vec![o(vec![0.1, 0.2, 0.3]), o(vec![-0.1, 0.0, 0.4])];
        let log0 = s.aggregate_round(0, &models, first.clone()).unwrap();
        assert_eq!(log0.aggregator_loss_initial, None);
        assert_eq!(s.offsets, first);

        let second = vec![o(vec![0.5, 0.2, 0.3]), o(vec![-0.1, 0.9, 0.4])];
        let log1 = s.aggregate_round(1, &models, second.clone()).unwrap();
        let (a, b) = (
            log1.aggregator_loss_initial.unwrap(),
            log1.aggregator_loss_final.unwrap(),
        );
        assert!(b < a);
        assert_ne!(s.offsets, second);
        assert_ne!(s.offsets[0], s.offsets[1]);
    }

    #[test]
    fn wrong_result_count_is_rejected() {
        let mut s = server(Strategy::None, 1.0);
        let models = vec![ModelParams::init(&tiny_arch(), 1).unwrap()];
        assert!(s
            .aggregate_round(0, &models, vec![Offset::zeros(&[3])])
            .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn model_mean_is_permutation_invariant(seed in any::<u64>(), k in 1usize..5) {
            let arch = tiny_arch();
            let ms: Vec<ModelParams> = (0..k as u64).map(|i| ModelParams::init(&arch, seed ^ i).unwrap()).collect();
            let mut rev = ms.clone();
            rev.reverse();
            let (a, b) = (aggregate_models(&ms).unwrap(), aggregate_models(&rev).unwrap());
            for (x, y) in a.tensors().iter().zip(b.tensors()) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }
            let copies = vec![ms[0].clone(); k];
            prop_assert_eq!(aggregate_models(&copies).unwrap(), ms[0].clone());
        }

        #[test]
        fn offset_mean_is_permutation_invariant_and_idempotent(
            rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..6),
        ) {
            let os: Vec<Offset> = rows.iter().map(|r| Offset::new(Tensor::vector(r.clone())).unwrap()).collect();
            let mut rev = os.clone();
            rev.reverse();
            let (a, b) = (aggregate_offsets_average(&os).unwrap(), aggregate_offsets_average(&rev).unwrap());
            for (u, v) in a.tensor().data().iter().zip(b.tensor().data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
            let same = vec![os[0].clone(); os.len()];
            prop_assert_eq!(aggregate_offsets_average(&same).unwrap(), os[0].clone());
        }

        #[test]
        fn auto_selection_is_pure(dh in 0.0f64..=1.0, th in 0.0f64..=1.0) {
            let a = select_strategy(dh, th, Strategy::Auto);
            prop_assert_eq!(a, select_strategy(dh, th, Strategy::Auto));
            prop_assert_eq!(a == Strategy::Nn, dh < th);
        }
    }
}
