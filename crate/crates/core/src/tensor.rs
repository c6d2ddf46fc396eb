//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! The tape is a Wengert list: every operation appends a node holding its
//! forward value, and [`Tape::backward`] walks the list once in reverse.
//! Values are copied into the tape when recorded, so later mutation of the
//! source buffers cannot corrupt a pending backward pass.
//!
//! Only the operations a Vision Transformer needs are provided. There is no
//! general broadcasting; bias addition is the explicit [`Tape::add_row`].

use std::fmt::Debug;
use std::iter::Sum;

use crate::cost::{CostTerm, FlopCounter};
use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (default) and `f64` (oracles).
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = a·b (+ c)`, with `a` logically `[m,k]` and `b` logically `[k,n]`.
    /// Strides are in elements; `c` is dense row-major `[m,n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slice lengths checked above; strides describe views
                // that stay inside those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a pairwise-distance sum: the channel vectors starting at
/// `offset_a` in part `part_a` and at `offset_b` in part `part_b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelPair {
    pub part_a: usize,
    pub offset_a: usize,
    pub part_b: usize,
    pub offset_b: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { table: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    KlDiv { logits: Var, target: Vec<T>, probs: Vec<T>, temperature: T },
    PairNormSum { parts: Vec<Var>, pairs: Vec<PixelPair>, channels: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    counter: FlopCounter,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Scalar GELU (tanh approximation), exposed for tests and reference code.
pub fn gelu<T: Real>(x: T) -> T {
    gelu_scalar(x)
}

/// Numerically stable softmax of one slice.
pub fn softmax_slice<T: Real>(xs: &[T]) -> Vec<T> {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, accurate when the label holds the largest logit.
pub fn cross_entropy_slice<T: Real>(logits: &[T], label: usize) -> T {
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    (max - logits[label]) + rest.ln_1p()
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: FlopCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut FlopCounter {
        &mut self.counter
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, None)
    }

    /// Matrix product whose multiply-accumulates are charged to `term`.
    pub fn matmul_counted(&mut self, a: Var, b: Var, term: CostTerm) -> Result<Var> {
        self.matmul_impl(a, b, Some(term))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, term: Option<CostTerm>) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] by [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        if let Some(term) = term {
            self.counter.record(term, (m * k * n) as u64);
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_bt_impl(a, b, None)
    }

    pub fn matmul_bt_counted(&mut self, a: Var, b: Var, term: CostTerm) -> Result<Var> {
        self.matmul_bt_impl(a, b, Some(term))
    }

    fn matmul_bt_impl(&mut self, a: Var, b: Var, term: Option<CostTerm>) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] by [{n}x{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            &mut out,
            false,
        );
        if let Some(term) = term {
            self.counter.record(term, (m * k * n) as u64);
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulBt { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, &[a, b]))
    }

    /// `x[m,n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::shape(format!(
                "add_row: {} columns vs bias of {}",
                n,
                self.value(row).numel()
            )));
        }
        let bias = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &b) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Softmax along `axis`, stabilised by subtracting each slice's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        let mut slice = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, s) in slice.iter_mut().enumerate() {
                    *s = src[(o * len + j) * inner + i];
                }
                for (j, p) in softmax_slice(&slice).into_iter().enumerate() {
                    data[(o * len + j) * inner + i] = p;
                }
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, &[x]))
    }

    /// Per-row layer normalisation (population variance) with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(format!(
                "layer_norm: feature dim {n}, gamma {}, beta {}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::from_usize(n).unwrap();
        let mut normed = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                normed[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::LayerNorm { x, gamma, beta, normed, inv_std },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Gelu { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![m, len], data }, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of nothing"));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::shape(format!("concat_cols rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor { shape: vec![m, n], data },
            Op::ConcatCols { parts: parts.to_vec() },
            parts,
        ))
    }

    /// Stack row blocks; every part is read as `[rows, n]` with `n` taken
    /// from its last dimension (a 1-D part counts as one row).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of nothing"));
        }
        let n = *self.value(parts[0]).shape().last().unwrap_or(&0);
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().last() != Some(&n) {
                return Err(Error::shape(format!(
                    "concat_rows width {:?} vs {n}",
                    v.shape().last()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let m = data.len() / n.max(1);
        Ok(self.push(
            Tensor { shape: vec![m, n], data },
            Op::ConcatRows { parts: parts.to_vec() },
            parts,
        ))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(format!("gather row {bad} of {m}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            Tensor { shape: vec![rows.len(), n], data },
            Op::GatherRows { table, rows: rows.to_vec() },
            &[table],
        ))
    }

    /// Mean cross-entropy of `[m, c]` logits against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(Error::shape(format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            total = total + cross_entropy_slice(row, y);
            probs.extend(softmax_slice(row));
        }
        let loss = total / T::from_usize(m).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// `τ²·KL(target ‖ softmax(logits/τ))`, averaged over rows. `target` holds
    /// one probability row per logit row.
    pub fn kl_div(&mut self, logits: Var, target: &[T], temperature: T) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if target.len() != m * c {
            return Err(Error::shape(format!("kl target {} vs [{m}x{c}]", target.len())));
        }
        if temperature <= T::zero() {
            return Err(Error::contract("temperature must be positive"));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        for r in 0..m {
            let scaled: Vec<T> = src[r * c..(r + 1) * c].iter().map(|&z| z / temperature).collect();
            let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + scaled.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for (j, &z) in scaled.iter().enumerate() {
                let p = target[r * c + j];
                let log_q = z - lse;
                if p > T::zero() {
                    total = total + p * (p.ln() - log_q);
                }
                probs.push(log_q.exp());
            }
        }
        let loss = temperature * temperature * total / T::from_usize(m).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv { logits, target: target.to_vec(), probs, temperature },
            &[logits],
        ))
    }

    /// `Σ ‖a − b‖₂` over channel vectors of the listed pixel pairs.
    pub fn pair_norm_sum(&mut self, parts: &[Var], pairs: &[PixelPair], channels: usize) -> Result<Var> {
        let mut total = T::zero();
        for pair in pairs {
            let (a, b) = self.pair_slices(parts, pair, channels)?;
            total = total + a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PairNormSum { parts: parts.to_vec(), pairs: pairs.to_vec(), channels },
            parts,
        ))
    }

    fn pair_slices(&self, parts: &[Var], pair: &PixelPair, channels: usize) -> Result<(&[T], &[T])> {
        let fetch = |part: usize, offset: usize| -> Result<&[T]> {
            let var = parts
                .get(part)
                .ok_or_else(|| Error::shape(format!("pair refers to part {part}")))?;
            self.value(*var)
                .data()
                .get(offset..offset + channels)
                .ok_or_else(|| Error::shape(format!("pair offset {offset} out of range")))
        };
        Ok((fetch(pair.part_a, pair.offset_a)?, fetch(pair.part_b, pair.offset_b)?))
    }

    /// Reverse pass from a single-element `loss`. Gradients are summed over
    /// fan-out and returned for every leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; count];
        let mut out: Vec<Option<Tensor<T>>> = vec![None; count];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out[idx] = Some(Tensor { shape: node.value.shape.clone(), data: g });
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                if self.wants(*a) {
                    // dA = dC·Bᵀ
                    let bv = self.value(*b).data();
                    add_into(&mut grads[a.0], m * k, |da| {
                        T::gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, da, true)
                    });
                }
                if self.wants(*b) {
                    // dB = Aᵀ·dC
                    let av = self.value(*a).data();
                    add_into(&mut grads[b.0], k * n, |db| {
                        T::gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, db, true)
                    });
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[0];
                if self.wants(*a) {
                    // dA = dC·B
                    let bv = self.value(*b).data();
                    add_into(&mut grads[a.0], m * k, |da| {
                        T::gemm(m, n, k, g, n as isize, 1, bv, k as isize, 1, da, true)
                    });
                }
                if self.wants(*b) {
                    // dB = dCᵀ·A
                    let av = self.value(*a).data();
                    add_into(&mut grads[b.0], n * k, |db| {
                        T::gemm(n, m, k, g, 1, n as isize, av, k as isize, 1, db, true)
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                        });
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                    });
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    add_into(&mut grads[row.0], n, |d| {
                        for chunk in g.chunks(n) {
                            d.iter_mut().zip(chunk).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * bv[i];
                        }
                    });
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *factor)
                    });
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    add_into(&mut grads[x.0], n, |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                    add_into(&mut grads[x.0], y.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * len + j) * inner + i;
                                let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..len {
                                    let p = at(j);
                                    d[p] = d[p] + y[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let nf = T::from_usize(n).unwrap();
                    add_into(&mut grads[x.0], m * n, |d| {
                        let mut dh = vec![T::zero(); n];
                        for r in 0..m {
                            let h = &normed[r * n..(r + 1) * n];
                            for c in 0..n {
                                dh[c] = g[r * n + c] * gv[c];
                            }
                            let sum_dh: T = dh.iter().copied().sum();
                            let sum_dh_h: T = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                            let scale = inv_std[r] / nf;
                            for c in 0..n {
                                let v = scale * (nf * dh[c] - sum_dh - h[c] * sum_dh_h);
                                d[r * n + c] = d[r * n + c] + v;
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], n, |d| {
                        for r in 0..m {
                            for c in 0..n {
                                d[c] = d[c] + g[r * n + c] * normed[r * n + c];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], n, |d| {
                        for r in 0..m {
                            for c in 0..n {
                                d[c] = d[c] + g[r * n + c];
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    add_into(&mut grads[x.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * gelu_grad(xv[i]);
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let len = node.value.shape[1];
                    add_into(&mut grads[x.0], m * n, |d| {
                        for r in 0..m {
                            for c in 0..len {
                                let p = r * n + start + c;
                                d[p] = d[p] + g[r * len + c];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).shape[1];
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], m * w, |d| {
                            for r in 0..m {
                                for c in 0..w {
                                    d[r * w + c] = d[r * w + c] + g[r * n + col + c];
                                }
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], len, |d| {
                            d.iter_mut().zip(&g[at..at + len]).for_each(|(d, &g)| *d = *d + g)
                        });
                    }
                    at += len;
                }
            }
            Op::GatherRows { table, rows } => {
                if self.wants(*table) {
                    let (m, n) = (self.value(*table).shape[0], self.value(*table).shape[1]);
                    add_into(&mut grads[table.0], m * n, |d| {
                        for (i, &r) in rows.iter().enumerate() {
                            for c in 0..n {
                                d[r * n + c] = d[r * n + c] + g[i * n + c];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let m = labels.len();
                    let c = probs.len() / m;
                    let w = g[0] / T::from_usize(m).unwrap();
                    add_into(&mut grads[logits.0], m * c, |d| {
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == y { T::one() } else { T::zero() };
                                d[r * c + j] = d[r * c + j] + w * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::KlDiv { logits, target, probs, temperature } => {
                if self.wants(*logits) {
                    let (m, c) = (self.value(*logits).shape[0], self.value(*logits).shape[1]);
                    let w = g[0] * *temperature / T::from_usize(m).unwrap();
                    add_into(&mut grads[logits.0], m * c, |d| {
                        for i in 0..m * c {
                            d[i] = d[i] + w * (probs[i] - target[i]);
                        }
                    });
                }
            }
            Op::PairNormSum { parts, pairs, channels } => {
                for pair in pairs {
                    let (a, b) = match self.pair_slices(parts, pair, *channels) {
                        Ok(s) => s,
                        Err(_) => continue,
                    };
                    let norm = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
                    if norm == T::zero() {
                        continue;
                    }
                    let (va, vb) = (parts[pair.part_a], parts[pair.part_b]);
                    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| g[0] * (x - y) / norm).collect();
                    if self.wants(va) {
                        let len = self.value(va).numel();
                        add_into(&mut grads[va.0], len, |d| {
                            for (c, &v) in diff.iter().enumerate() {
                                d[pair.offset_a + c] = d[pair.offset_a + c] + v;
                            }
                        });
                    }
                    if self.wants(vb) {
                        let len = self.value(vb).numel();
                        add_into(&mut grads[vb.0], len, |d| {
                            for (c, &v) in diff.iter().enumerate() {
                                d[pair.offset_b + c] = d[pair.offset_b + c] - v;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape<f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
        tape.leaf(Tensor::new(vec![rows, cols], data.to_vec()).unwrap(), true)
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 3]).numel(), 6);
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::<f64>::new();
        let eye = mat(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = mat(&mut tape, 2, 2, &[1.5, -2.0, 3.0, 4.25]);
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, -2.0, 3.0, 4.25]);

        let a = mat(&mut tape, 1, 2, &[1.0, 2.0]);
        let b = mat(&mut tape, 2, 1, &[3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = mat(&mut tape, 2, 3, &[0.0; 6]);
        let b = mat(&mut tape, 2, 3, &[0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 1, 3, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x, 1).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = mat(&mut tape, 1, 2, &[1000.0, 0.0]);
        let y = tape.softmax(big, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = mat(&mut tape, 1, 2, &[1.0, 3.0]);
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let g4 = tape.constant(Tensor::full(&[4], 1.0));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = mat(&mut tape, 1, 4, &[2.5; 4]);
        let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let z = mat(&mut tape, 1, 4, &[0.3; 4]);
        let ce = tape.cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);

        let z = mat(&mut tape, 1, 2, &[10.0, -10.0]);
        let ce = tape.cross_entropy(z, &[0]).unwrap();
        // -log sigma(20) = log1p(e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.value(ce).item() - expected).abs() / expected < 1e-12);
        assert!((expected - 2.061e-9).abs() < 1e-12);

        assert!(matches!(tape.cross_entropy(z, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn gelu_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990).abs() < 1e-8);
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap(), true);
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f64>::new();
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let x = tape.leaf(Tensor::new(vec![4], vals.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let grads = tape.backward(half).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 1, 2, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = mat(&mut tape, 1, 2, &[1.0, 1.0]);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn pair_norm_sum_value_and_zero_gradient_at_coincidence() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![1, 4], vec![0.0, 0.0, 3.0, 4.0]).unwrap(), true);
        let pairs = [
            PixelPair { part_a: 0, offset_a: 0, part_b: 0, offset_b: 2 },
            PixelPair { part_a: 0, offset_a: 0, part_b: 0, offset_b: 0 },
        ];
        let tv = tape.pair_norm_sum(&[p], &pairs, 2).unwrap();
        assert_eq!(tape.value(tv).item(), 5.0);
        let grads = tape.backward(tv).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[-0.6, -0.8, 0.6, 0.8]);
    }

    #[test]
    fn matmul_counter_records_macs() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        tape.matmul_counted(a, b, CostTerm::Ffn).unwrap();
        tape.matmul_bt_counted(a, a, CostTerm::SelfAttention).unwrap();
        assert_eq!(tape.counter().ffn_macs, 60);
        assert_eq!(tape.counter().sa_macs, 36);
    }
}
