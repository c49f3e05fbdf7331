//! Double-input-channel classifier.
//!
//! Each input `x` is mixed with the client's offset `t` into two channels,
//! `(1 - a) x + a t` and `(1 + a) x - a t`. Both channels run through the
//! same MLP backbone (one set of weights, two applications), their
//! features are concatenated, and a linear dense layer followed by a
//! linear logits layer produce class scores.
//!
//! The single-channel variant used for ablations feeds only the first
//! channel and shrinks the dense layer's input accordingly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mixing coefficient in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Alpha(f64);

impl Alpha {
    pub const DEFAULT: Alpha = Alpha(0.3);
    pub const ZERO: Alpha = Alpha(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {value}"
            )));
        }
        Ok(Alpha(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::DEFAULT
    }
}

/// Per-client offset with the shape of a single (flattened) input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Offset(Tensor);

impl Offset {
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Domain("offset contains non-finite values".into()));
        }
        Ok(Offset(t))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Offset(Tensor::zeros(shape))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Dual,
    Single,
}

/// Layer sizes of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub dense_width: usize,
    pub num_classes: usize,
    pub channels: Channels,
}

impl Architecture {
    /// Default backbone `input -> 64 -> 32` with a 32-wide dense layer.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 32],
            dense_width: 32,
            num_classes,
            channels: Channels::Dual,
        }
    }

    pub fn with_channels(mut self, channels: Channels) -> Self {
        self.channels = channels;
        self
    }

    pub fn feature_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn dense_input(&self) -> usize {
        match self.channels {
            Channels::Dual => 2 * self.feature_width(),
            Channels::Single => self.feature_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dense_width == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer; `weight` is `[in x out]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[inp, out]),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn uniform(inp: usize, out: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..inp * out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Linear {
            weight: Tensor::new(vec![inp, out], data).expect("shape matches"),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Linear>,
    pub dense: Linear,
    pub logits: Linear,
    pub channels: Channels,
}

/// Tape handles for every parameter tensor, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let mut backbone = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            backbone.push(Linear::zeros(prev, h));
            prev = h;
        }
        ModelParams {
            backbone,
            dense: Linear::zeros(arch.dense_input(), arch.dense_width),
            logits: Linear::zeros(arch.dense_width, arch.num_classes),
            channels: arch.channels,
        }
    }

    /// He-uniform weights for the ReLU backbone, Glorot-uniform for the two
    /// linear heads, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            let limit = (6.0 / prev as f64).sqrt();
            backbone.push(Linear::uniform(prev, h, limit, &mut rng));
            prev = h;
        }
        let glorot = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        let di = arch.dense_input();
        let dense = Linear::uniform(di, arch.dense_width, glorot(di, arch.dense_width), &mut rng);
        let logits = Linear::uniform(
            arch.dense_width,
            arch.num_classes,
            glorot(arch.dense_width, arch.num_classes),
            &mut rng,
        );
        Ok(ModelParams {
            backbone,
            dense,
            logits,
            channels: arch.channels,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.backbone.iter().map(Linear::out_dim).collect(),
            dense_width: self.dense.out_dim(),
            num_classes: self.num_classes(),
            channels: self.channels,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.first().map_or_else(
            || match self.channels {
                Channels::Dual => self.dense.in_dim() / 2,
                Channels::Single => self.dense.in_dim(),
            },
            Linear::in_dim,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.logits.out_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for l in &self.backbone {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.dense.weight,
            &self.dense.bias,
            &self.logits.weight,
            &self.logits.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out.push(&mut self.logits.weight);
        out.push(&mut self.logits.bias);
        out
    }

    /// Stable layer names, aligned with [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        names.extend(
            ["dense.weight", "dense.bias", "logits.weight", "logits.bias"].map(String::from),
        );
        names
    }

    /// Rebuilds a model of architecture `arch` from tensors in
    /// [`ModelParams::tensors`] order.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = ModelParams::zeros(arch);
        let slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::dim(
                "ModelParams::from_tensors",
                format!("expected {} tensors, got {}", slots.len(), tensors.len()),
            ));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim(
                    "ModelParams::from_tensors",
                    format!("{:?} vs {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every parameter as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors()
                .into_iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
        }
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        tape.add_row_bias(h, b)
    }

    fn backbone_vars(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.backbone.len() {
            let z = Self::linear(tape, h, pv.vars[2 * i], pv.vars[2 * i + 1])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Records the forward pass for a batch of channel inputs `[B x d]`.
    /// `ch2` is ignored by single-channel models.
    pub fn forward_vars(&self, tape: &mut Tape, pv: &ParamVars, ch1: Var, ch2: Var) -> Result<Var> {
        let d = self.input_dim();
        let width = tape.value(ch1).shape().last().copied().unwrap_or(0);
        if width != d {
            return Err(Error::dim(
                "forward",
                format!("channel width {width}, backbone expects {d}"),
            ));
        }
        let nb = 2 * self.backbone.len();
        let feats = match self.channels {
            Channels::Dual => {
                let f1 = self.backbone_vars(tape, pv, ch1)?;
                let f2 = self.backbone_vars(tape, pv, ch2)?;
                tape.concat_cols(f1, f2)?
            }
            Channels::Single => self.backbone_vars(tape, pv, ch1)?,
        };
        let dense = Self::linear(tape, feats, pv.vars[nb], pv.vars[nb + 1])?;
        Self::linear(tape, dense, pv.vars[nb + 2], pv.vars[nb + 3])
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.clone().reshape(vec![1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::dim(
            "as_batch",
            format!("expected rank 1 or 2, got {:?}", x.shape()),
        )),
    }
}

/// Mixes a sample (or batch of samples) with an offset into the two channels.
pub fn combine(x: &Tensor, t: &Offset, alpha: Alpha) -> Result<(Tensor, Tensor)> {
    let a = alpha.value();
    let d = t.len();
    let width = x.shape().last().copied().unwrap_or(0);
    if !x.len().is_multiple_of(d.max(1)) || width != d {
        return Err(Error::dim(
            "combine",
            format!("input {:?} vs offset {:?}", x.shape(), t.shape()),
        ));
    }
    let mut ch1 = x.clone();
    let mut ch2 = x.clone();
    let td = t.tensor().data();
    for (i, (c1, c2)) in ch1
        .data_mut()
        .iter_mut()
        .zip(ch2.data_mut().iter_mut())
        .enumerate()
    {
        let xv = *c1;
        let tv = td[i % d];
        *c1 = (1.0 - a) * xv + a * tv;
        *c2 = (1.0 + a) * xv - a * tv;
    }
    Ok((ch1, ch2))
}

/// Records the channel mix for a constant input batch `x` `[B x d]` and an
/// offset variable `t` `[d]`.
pub fn combine_vars(tape: &mut Tape, x: Var, t: Var, alpha: Alpha) -> Result<(Var, Var)> {
    let a = alpha.value();
    let rows = tape.value(x).shape()[0];
    let tb = tape.broadcast_rows(t, rows)?;
    let xs1 = tape.scale(x, 1.0 - a);
    let ts1 = tape.scale(tb, a);
    let ch1 = tape.add(xs1, ts1)?;
    let xs2 = tape.scale(x, 1.0 + a);
    let ch2 = tape.sub(xs2, ts1)?;
    Ok((ch1, ch2))
}

/// Logits for already-mixed channels; rows of the result follow the input rows.
pub fn forward(params: &ModelParams, ch1: &Tensor, ch2: &Tensor) -> Result<Tensor> {
    let (c1, c2) = (as_batch(ch1)?, as_batch(ch2)?);
    if c1.shape() != c2.shape() {
        return Err(Error::dim(
            "forward",
            format!("{:?} vs {:?}", c1.shape(), c2.shape()),
        ));
    }
    let mut tape = Tape::new();
    let pv = ParamVars {
        vars: params
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect(),
    };
    let v1 = tape.constant(c1);
    let v2 = tape.constant(c2);
    let out = params.forward_vars(&mut tape, &pv, v1, v2)?;
    let logits = tape.value(out).clone();
    if ch1.rank() == 1 {
        return logits.reshape(vec![params.num_classes()]);
    }
    Ok(logits)
}

/// Loss of a batch together with its gradients.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    /// Aligned with [`ModelParams::tensors`].
    pub param_grads: Vec<Tensor>,
    pub offset_grad: Tensor,
}

/// Mean cross-entropy of `params` on `inputs` `[B x d]` mixed with `t`,
/// differentiated with respect to both the parameters and the offset.
pub fn loss_batch(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    t: &Offset,
    alpha: Alpha,
) -> Result<BatchLoss> {
    if labels.is_empty() {
        return Err(Error::Contract("loss_batch on an empty batch".into()));
    }
    let inputs = as_batch(inputs)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let tv = tape.leaf(t.tensor().clone());
    let x = tape.constant(inputs);
    let (ch1, ch2) = combine_vars(&mut tape, x, tv, alpha)?;
    let logits = params.forward_vars(&mut tape, &pv, ch1, ch2)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let param_grads = pv
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect();
    let offset_grad = grads.take(tv).expect("leaf gradient");
    Ok(BatchLoss {
        loss: value,
        param_grads,
        offset_grad,
    })
}

/// Mean cross-entropy without gradients.
pub fn loss_value(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    t: &Offset,
    alpha: Alpha,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("loss_value on an empty batch".into()));
    }
    let (ch1, ch2) = combine(&as_batch(inputs)?, t, alpha)?;
    let logits = forward(params, &ch1, &ch2)?;
    let mut tape = Tape::new();
    let z = tape.constant(logits);
    let l = tape.softmax_cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}

/// Predicted classes for every row of `inputs`; ties go to the lowest index.
pub fn predict_batch(
    params: &ModelParams,
    inputs: &Tensor,
    t: &Offset,
    alpha: Alpha,
) -> Result<Vec<usize>> {
    let (ch1, ch2) = combine(&as_batch(inputs)?, t, alpha)?;
    let logits = forward(params, &ch1, &ch2)?;
    let k = params.num_classes();
    Ok(logits.data().chunks(k).map(Tensor::argmax).collect())
}

pub fn predict(params: &ModelParams, x: &Tensor, t: &Offset, alpha: Alpha) -> Result<usize> {
    Ok(predict_batch(params, x, t, alpha)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch(channels: Channels) -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![4],
            dense_width: 3,
            num_classes: 3,
            channels,
        }
    }

    #[test]
    fn combine_examples() {
        let x = Tensor::vector(vec![1.0]);
        let t = Offset::new(Tensor::vector(vec![0.5])).unwrap();
        let (c1, c2) = combine(&x, &t, Alpha::new(0.3).unwrap()).unwrap();
        assert!((c1.item() - 0.85).abs() < 1e-15);
        assert!((c2.item() - 1.15).abs() < 1e-15);

        let x = Tensor::vector(vec![1.5, -2.0, 7.0]);
        let t = Offset::new(Tensor::vector(vec![9.0, 3.0, -1.0])).unwrap();
        let (c1, c2) = combine(&x, &t, Alpha::ZERO).unwrap();
        assert_eq!(c1, x);
        assert_eq!(c2, x);
    }

    #[test]
    fn combine_rejects_shape_mismatch() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let t = Offset::zeros(&[3]);
        assert!(combine(&x, &t, Alpha::DEFAULT).is_err());
    }

    #[test]
    fn alpha_range() {
        assert!(Alpha::new(-0.1).is_err());
        assert!(Alpha::new(1.01).is_err());
        assert!(Alpha::new(1.0).is_ok());
    }

    #[test]
    fn zero_model_gives_zero_logits_and_class_zero() {
        let m = ModelParams::zeros(&tiny_arch(Channels::Dual));
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let t = Offset::zeros(&[3]);
        let (c1, c2) = combine(&x, &t, Alpha::DEFAULT).unwrap();
        assert!(forward(&m, &c1, &c2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(predict(&m, &x, &t, Alpha::DEFAULT).unwrap(), 0);

        let batch = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let loss = loss_value(&m, &batch, &[1, 2], &t, Alpha::DEFAULT).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_uniform_loss_is_ln2() {
        let mut arch = tiny_arch(Channels::Dual);
        arch.num_classes = 2;
        let m = ModelParams::zeros(&arch);
        let batch = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let bl = loss_batch(&m, &batch, &[1], &Offset::zeros(&[3]), Alpha::DEFAULT).unwrap();
        assert!((bl.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn swapping_channels_and_head_blocks_preserves_logits() {
        let m = ModelParams::init(&tiny_arch(Channels::Dual), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c1 = Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let c2 = Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());

        let mut swapped = m.clone();
        let f = m.architecture().feature_width();
        let w = m.dense.weight.data();
        let cols = m.dense.out_dim();
        let mut data = w.to_vec();
        for r in 0..f {
            data[r * cols..(r + 1) * cols].copy_from_slice(&w[(r + f) * cols..(r + f + 1) * cols]);
            data[(r + f) * cols..(r + f + 1) * cols].copy_from_slice(&w[r * cols..(r + 1) * cols]);
        }
        swapped.dense.weight = Tensor::new(m.dense.weight.shape().to_vec(), data).unwrap();

        let a = forward(&m, &c1, &c2).unwrap();
        let b = forward(&swapped, &c2, &c1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_unrolled_forward() {
        // 1-D input, backbone 1 -> 2, dense 4 -> 2, logits 2 -> 2.
        let arch = Architecture {
            input_dim: 1,
            hidden: vec![2],
            dense_width: 2,
            num_classes: 2,
            channels: Channels::Dual,
        };
        let m = ModelParams::from_tensors(
            &arch,
            vec![
                Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(),
                Tensor::vector(vec![0.5, 0.25]),
                Tensor::matrix(4, 2, vec![1.0, 0.0, 0.5, -1.0, 2.0, 1.0, 0.0, 3.0]).unwrap(),
                Tensor::vector(vec![0.1, -0.2]),
                Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
                Tensor::vector(vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let (x, t, a) = (0.8, -0.4, 0.3);
        let c1 = (1.0 - a) * x + a * t;
        let c2 = (1.0 + a) * x - a * t;
        let relu = |v: f64| v.max(0.0);
        let h1 = [relu(c1 * 1.0 + 0.5), relu(c1 * -2.0 + 0.25)];
        let h2 = [relu(c2 * 1.0 + 0.5), relu(c2 * -2.0 + 0.25)];
        let f = [h1[0], h1[1], h2[0], h2[1]];
        let dw = [[1.0, 0.0], [0.5, -1.0], [2.0, 1.0], [0.0, 3.0]];
        let d0 = f.iter().zip(&dw).map(|(v, w)| v * w[0]).sum::<f64>() + 0.1;
        let d1 = f.iter().zip(&dw).map(|(v, w)| v * w[1]).sum::<f64>() - 0.2;
        let z0 = d0 - d1;
        let z1 = d0 * 2.0 + d1 * 0.5 + 1.0;

        let off = Offset::new(Tensor::vector(vec![t])).unwrap();
        let (ch1, ch2) = combine(&Tensor::vector(vec![x]), &off, Alpha::new(a).unwrap()).unwrap();
        let logits = forward(&m, &ch1, &ch2).unwrap();
        assert!((logits.data()[0] - z0).abs() < 1e-12);
        assert!((logits.data()[1] - z1).abs() < 1e-12);
    }

    #[test]
    fn offset_gradient_vanishes_at_alpha_zero() {
        let m = ModelParams::init(&tiny_arch(Channels::Dual), 2).unwrap();
        let batch = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let t = Offset::new(Tensor::vector(vec![0.4, 0.1, -0.9])).unwrap();
        let bl = loss_batch(&m, &batch, &[0, 2], &t, Alpha::ZERO).unwrap();
        assert!(bl.offset_grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn offset_gradient_matches_finite_differences() {
        for channels in [Channels::Dual, Channels::Single] {
            let m = ModelParams::init(&tiny_arch(channels), 8).unwrap();
            let batch = Tensor::from_rows(&[
                vec![1.0, -2.0, 0.5],
                vec![0.1, 0.2, 0.3],
                vec![-0.7, 0.0, 1.1],
            ])
            .unwrap();
            let labels = [0, 2, 1];
            let t0 = Tensor::vector(vec![0.4, 0.1, -0.9]);
            let a = Alpha::new(0.3).unwrap();
            let bl = loss_batch(&m, &batch, &labels, &Offset::new(t0.clone()).unwrap(), a).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let mut p = t0.clone();
                p.data_mut()[i] += h;
                let mut q = t0.clone();
                q.data_mut()[i] -= h;
                let lp = loss_value(&m, &batch, &labels, &Offset::new(p).unwrap(), a).unwrap();
                let lq = loss_value(&m, &batch, &labels, &Offset::new(q).unwrap(), a).unwrap();
                let num = (lp - lq) / (2.0 * h);
                let ana = bl.offset_grad.data()[i];
                assert!(
                    (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-4,
                    "{num} vs {ana}"
                );
            }
        }
    }

    #[test]
    fn predict_argmax_and_shift_invariance() {
        assert_eq!(Tensor::argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(Tensor::argmax(&[0.5, 0.5]), 0);
        let m = ModelParams::init(&tiny_arch(Channels::Dual), 9).unwrap();
        let mut shifted = m.clone();
        for b in shifted.logits.bias.data_mut() {
            *b += 17.25;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Offset::new(Tensor::vector(vec![0.2, -0.3, 0.1])).unwrap();
        for _ in 0..20 {
            let x = Tensor::vector((0..3).map(|_| rng.random_range(-2.0..2.0)).collect());
            assert_eq!(
                predict(&m, &x, &t, Alpha::DEFAULT).unwrap(),
                predict(&shifted, &x, &t, Alpha::DEFAULT).unwrap()
            );
        }
    }

    #[test]
    fn predict_equals_lowest_per_class_loss() {
        let m = ModelParams::init(&tiny_arch(Channels::Dual), 21).unwrap();
        let t = Offset::new(Tensor::vector(vec![0.5, -0.5, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let x = Tensor::vector((0..3).map(|_| rng.random_range(-2.0..2.0)).collect());
            let batch = x.clone().reshape(vec![1, 3]).unwrap();
            let losses: Vec<f64> = (0..3)
                .map(|c| loss_value(&m, &batch, &[c], &t, Alpha::DEFAULT).unwrap())
                .collect();
            let mut best = 0;
            for c in 1..3 {
                if losses[c] < losses[best] {
                    best = c;
                }
            }
            assert_eq!(predict(&m, &x, &t, Alpha::DEFAULT).unwrap(), best);
        }
    }

    #[test]
    fn shared_backbone_affects_both_channels() {
        let m = ModelParams::init(&tiny_arch(Channels::Dual), 5).unwrap();
        assert_eq!(m.backbone.len(), 1);
        let c = Tensor::vector(vec![0.3, 0.2, -0.1]);
        let mut mutated = m.clone();
        for b in mutated.backbone[0].bias.data_mut() {
            *b += 1.0;
        }
        // Zero one half of the dense layer at a time: each channel path
        // on its own must respond to the backbone change.
        for half in 0..2 {
            let mut a = m.clone();
            let mut b = mutated.clone();
            let cols = a.dense.out_dim();
            let f = 4;
            for r in (half * f)..((half + 1) * f) {
                for c in 0..cols {
                    a.dense.weight.data_mut()[r * cols + c] = 0.0;
                    b.dense.weight.data_mut()[r * cols + c] = 0.0;
                }
            }
            let la = forward(&a, &c, &c).unwrap();
            let lb = forward(&b, &c, &c).unwrap();
            assert_ne!(la, lb);
        }
    }

    #[test]
    fn tensors_round_trip_through_from_tensors() {
        let m = ModelParams::init(&tiny_arch(Channels::Single), 1).unwrap();
        let rebuilt = ModelParams::from_tensors(
            &m.architecture(),
            m.tensors().into_iter().cloned().collect(),
        )
        .unwrap();
        assert_eq!(rebuilt, m);
        assert_eq!(m.tensor_names().len(), m.tensors().len());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn channel_sum_is_twice_input(
                v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..10),
                a in 0.0f64..=1.0,
            ) {
                let x = Tensor::vector(v.iter().map(|p| p.0).collect());
                let t = Offset::new(Tensor::vector(v.iter().map(|p| p.1).collect())).unwrap();
                let (c1, c2) = combine(&x, &t, Alpha::new(a).unwrap()).unwrap();
                for i in 0..x.len() {
                    prop_assert!((c1.data()[i] + c2.data()[i] - 2.0 * x.data()[i]).abs() <= 1e-12);
                }
            }
        }
    }
}
