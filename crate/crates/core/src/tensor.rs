//! Dense row-major `f64` tensors and their 32-bit wire encoding.
//!
//! Arithmetic here is eager and untracked; see [`crate::tape`] for the
//! differentiable versions used during training.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::dim(
                    "Tensor::from_rows",
                    format!("row {i} has length {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets a rank-1 or rank-2 tensor as a matrix.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(
                "as_matrix",
                format!("expected rank 1 or 2, got {s:?}"),
            )),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Gathers rows by index into a new `[indices.len() x cols]` tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let cols = if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        };
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Tensor {
            shape: vec![indices.len(), cols],
            data,
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Matrix product of `[m x k]` by `[k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            s => {
                return Err(Error::dim(
                    "matmul",
                    format!("lhs must be rank 2, got {s:?}"),
                ))
            }
        };
        let (k2, n) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n),
            s => {
                return Err(Error::dim(
                    "matmul",
                    format!("rhs must be rank 2, got {s:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::dim(
                    "transpose",
                    format!("expected rank 2, got {s:?}"),
                ))
            }
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(values: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate().skip(1) {
            if v > values[best] {
                best = i;
            }
        }
        best
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// One plain gradient-descent update: `param - lr * grad`.
pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    param.zip_map(grad, "sgd_step", |p, g| p - lr * g)
}

/// In-place variant of [`sgd_step`].
pub fn sgd_step_in_place(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    param.same_shape(grad, "sgd_step")?;
    for (p, g) in param.data.iter_mut().zip(&grad.data) {
        *p -= lr * g;
    }
    Ok(())
}

// Wire format: rank as u32 LE, each dim as u32 LE, then the elements as f32 LE.

/// Encoded size of one tensor in bytes.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    Tensor::new(shape, data)
}

/// Encodes a sequence of tensors behind a `u32` count.
pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = &'a Tensor>,
) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    (0..count).map(|_| read_tensor(r)).collect()
}

/// Size of [`write_tensors`] output for the given shapes.
pub fn encoded_list_len<'a>(shapes: impl Iterator<Item = &'a [usize]>) -> usize {
    4 + shapes.map(encoded_len).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let col = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a =
            Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let b =
            Tensor::matrix(4, 2, (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_values() {
        assert_eq!(
            Tensor::vector(vec![-1.0, 0.0, 2.0]).relu().data(),
            &[0.0, 0.0, 2.0]
        );
        assert!(Tensor::vector(vec![-3.0, -0.5, -1e-9])
            .relu()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_step_examples() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().data(), &[0.5, 1.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        // f(w) = w^2, f'(3) = 6
        let w = Tensor::scalar(3.0);
        let stepped = sgd_step(&w, &Tensor::scalar(2.0 * 3.0), 0.1).unwrap();
        assert!((stepped.item() - 2.4).abs() < 1e-12);
        assert!(sgd_step(&p, &Tensor::scalar(1.0), 0.1).is_err());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn wire_format_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), encoded_len(t.shape()));
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1.5f32.to_le_bytes());
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, std::iter::empty()).unwrap();
        assert_eq!(buf.len(), 4);
        assert_eq!(encoded_list_len(std::iter::empty()), 4);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sgd_step_is_linear_in_grad(
                v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..16),
                lr in 0.0f64..1.0,
            ) {
                let p = Tensor::vector(v.iter().map(|x| x.0).collect());
                let g1 = Tensor::vector(v.iter().map(|x| x.1).collect());
                let g2 = Tensor::vector(v.iter().map(|x| x.2).collect());
                let joint = sgd_step(&p, &g1.add(&g2).unwrap(), lr).unwrap();
                let seq = sgd_step(&sgd_step(&p, &g1, lr).unwrap(), &g2, lr).unwrap();
                for (a, b) in joint.data().iter().zip(seq.data()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn wire_round_trip_is_f32_exact(
                dims in prop::collection::vec(1usize..4, 1..4),
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n: usize = dims.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3f32) as f64).collect();
                let t = Tensor::new(dims, data).unwrap();
                let mut buf = Vec::new();
                write_tensor(&mut buf, &t).unwrap();
                prop_assert_eq!(buf.len(), encoded_len(t.shape()));
                prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
            }
        }
    }
}
