//! Dense row-major `f64` tensors and the handful of operators the attention
//! and convolution layers are built from.
//!
//! Layout conventions: token matrices are `[N, d]`, images are `[C, H, W]`
//! (or `[B, C, H, W]`). Spatial operators always act on the last two axes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::sum::exact_sum;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

/// Integer translation acting circularly on the last two axes.
///
/// `dy` moves content down, `dx` moves it right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shift2D {
    pub dy: i64,
    pub dx: i64,
}

impl Shift2D {
    pub const IDENTITY: Shift2D = Shift2D { dy: 0, dx: 0 };

    pub const fn new(dy: i64, dx: i64) -> Self {
        Self { dy, dx }
    }

    pub fn compose(self, other: Shift2D) -> Shift2D {
        Shift2D::new(self.dy + other.dy, self.dx + other.dx)
    }

    pub fn inverse(self) -> Shift2D {
        Shift2D::new(-self.dy, -self.dx)
    }

    /// Canonical representative with `0 <= dy < h` and `0 <= dx < w`.
    pub fn reduced(self, h: usize, w: usize) -> Shift2D {
        Shift2D::new(self.dy.rem_euclid(h as i64), self.dx.rem_euclid(w as i64))
    }

    /// True when both components are multiples of `s`.
    pub fn is_multiple_of(self, s: usize) -> bool {
        self.dy.rem_euclid(s as i64) == 0 && self.dx.rem_euclid(s as i64) == 0
    }

    /// All `h * w` shifts of an `h x w` grid, row-major.
    pub fn all(h: usize, w: usize) -> impl Iterator<Item = Shift2D> {
        (0..h as i64).flat_map(move |dy| (0..w as i64).map(move |dx| Shift2D::new(dy, dx)))
    }
}

impl fmt::Display for Shift2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.dy, self.dx)
    }
}

/// Order of the norm used for polyphase selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum NormOrder {
    L1,
    #[default]
    L2,
}

impl TryFrom<u32> for NormOrder {
    type Error = Error;

    fn try_from(p: u32) -> Result<Self> {
        Self::from_p(p)
    }
}

impl From<NormOrder> for u32 {
    fn from(p: NormOrder) -> u32 {
        match p {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

impl NormOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            _ => arg_err(format!("norm order must be 1 or 2, got {p}")),
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("axis lengths must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!("shape {shape:?} needs {numel} elements, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return shape_err("ragged rows");
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, m] => Ok((n, m)),
            _ => shape_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected [C, H, W], got shape {:?}", self.shape)),
        }
    }

    /// Length of the two trailing (spatial) axes.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return shape_err(format!("need at least 2 axes, got shape {:?}", self.shape));
        }
        Ok((self.shape[r - 2], self.shape[r - 1]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[self.rank() - 1] + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|x| alpha * x)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Euclidean distance between two equally shaped tensors.
    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.lp_norm(NormOrder::L2))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(0.0, |m, x| m.max(x.abs())))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (n, m) = self.dims2()?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Circular shift of the last two axes:
    /// `out[.., i, j] = t[.., (i - dy) mod H, (j - dx) mod W]`.
    pub fn circular_shift(&self, s: Shift2D) -> Result<Self> {
        let (h, w) = self.spatial()?;
        let Shift2D { dy, dx } = s.reduced(h, w);
        let (dy, dx) = (dy as usize, dx as usize);
        if dy == 0 && dx == 0 {
            return Ok(self.clone());
        }
        let plane = h * w;
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            for i in 0..h {
                let si = (i + h - dy) % h;
                let srow = &src[si * w..(si + 1) * w];
                let drow = &mut dst[i * w..(i + 1) * w];
                // rotate right by dx
                drow[dx..].copy_from_slice(&srow[..w - dx]);
                drow[..dx].copy_from_slice(&srow[w - dx..]);
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Matrix product with ascending-inner-index accumulation.
    pub fn matmul(&self, b: &Tensor) -> Result<Self> {
        let (n, k) = self.dims2()?;
        let (k2, m) = b.dims2()?;
        if k != k2 {
            return shape_err(format!("matmul: [{n}x{k}] * [{k2}x{m}]"));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                let brow = &b.data[kk * m..(kk + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (n, m) = self.dims2()?;
        if let Some(bad) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("softmax of non-finite value {bad}")));
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(m).take(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(vec![n, m], out)
    }

    /// L1 or L2 norm of all entries, accumulated with [`exact_sum`].
    pub fn lp_norm(&self, p: NormOrder) -> f64 {
        match p {
            NormOrder::L1 => exact_sum(self.data.iter().map(|x| x.abs())),
            NormOrder::L2 => exact_sum(self.data.iter().map(|x| x * x)).sqrt(),
        }
    }

    /// Sum over all entries, correctly rounded.
    pub fn sum(&self) -> f64 {
        exact_sum(self.data.iter().copied())
    }

    /// `[C, H, W]` image to `[H*W, C]` token matrix (row-major pixel order).
    pub fn grid_to_tokens(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        Self::new(vec![c, h * w], self.data.clone())?.transpose()
    }

    /// Inverse of [`Tensor::grid_to_tokens`].
    pub fn tokens_to_grid(&self, h: usize, w: usize) -> Result<Self> {
        let (n, c) = self.dims2()?;
        if n != h * w {
            return shape_err(format!("{n} tokens do not fill a {h}x{w} grid"));
        }
        self.transpose()?.reshape(&[c, h, w])
    }

    /// Permute the rows of a matrix: `out[i] = self[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let (n, m) = self.dims2()?;
        if perm.len() != n {
            return arg_err(format!("permutation of length {} for {n} rows", perm.len()));
        }
        let mut seen = vec![false; n];
        let mut out = Vec::with_capacity(n * m);
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return arg_err("not a permutation");
            }
            out.extend_from_slice(&self.data[p * m..(p + 1) * m]);
        }
        Self::new(vec![n, m], out)
    }
}
