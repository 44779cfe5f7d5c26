//! Polyphase anchoring.
//!
//! An `s`-strided grid splits into `s * s` polyphases, one per offset
//! `(p, q)`. Anchoring finds the polyphase with the largest norm and
//! circularly shifts the input by `(-p, -q)` so that polyphase lands on the
//! anchor positions `(i, j)` with `i, j = 0 mod s`. Any strided or windowed
//! operator applied afterwards sees the same tokens in the same windows no
//! matter how the input was translated.
//!
//! Exact norm ties are broken towards the lexicographically smallest
//! `(p, q)`. Equivariance only holds when the maximum is unique.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{NormOrder, Shift2D, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolyphaseIndex {
    pub p: usize,
    pub q: usize,
}

impl PolyphaseIndex {
    pub const fn new(p: usize, q: usize) -> Self {
        Self { p, q }
    }

    /// The shift that moves this polyphase onto the anchor grid.
    pub fn anchor_shift(self) -> Shift2D {
        Shift2D::new(-(self.p as i64), -(self.q as i64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorResult {
    pub anchored: Tensor,
    pub phase: PolyphaseIndex,
    pub stride: usize,
}

fn check_stride(x: &Tensor, s: usize) -> Result<(usize, usize)> {
    let (h, w) = x.spatial()?;
    if s == 0 {
        return arg_err("stride must be positive");
    }
    if h % s != 0 || w % s != 0 {
        return shape_err(format!("stride {s} does not divide spatial size {h}x{w}"));
    }
    Ok((h, w))
}

/// `out[.., i, j] = x[.., p + s*i, q + s*j]`.
pub fn polyphase_extract(x: &Tensor, idx: PolyphaseIndex, s: usize) -> Result<Tensor> {
    let (h, w) = check_stride(x, s)?;
    if idx.p >= s || idx.q >= s {
        return arg_err(format!("polyphase ({}, {}) out of range for stride {s}", idx.p, idx.q));
    }
    let (ho, wo) = (h / s, w / s);
    let planes = x.numel() / (h * w);
    let src = x.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for b in 0..planes {
        let plane = &src[b * h * w..(b + 1) * h * w];
        for i in 0..ho {
            let row = &plane[(idx.p + s * i) * w..];
            out.extend((0..wo).map(|j| row[idx.q + s * j]));
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

/// Norms of all `s * s` polyphases, row-major in `(p, q)`.
pub fn polyphase_norms(x: &Tensor, s: usize, p_norm: NormOrder) -> Result<Vec<f64>> {
    check_stride(x, s)?;
    let mut norms = Vec::with_capacity(s * s);
    for p in 0..s {
        for q in 0..s {
            norms.push(polyphase_extract(x, PolyphaseIndex::new(p, q), s)?.lp_norm(p_norm));
        }
    }
    Ok(norms)
}

/// Index of the maximum-norm polyphase; ties go to the smallest `(p, q)`.
pub fn max_polyphase(x: &Tensor, s: usize, p_norm: NormOrder) -> Result<PolyphaseIndex> {
    let norms = polyphase_norms(x, s, p_norm)?;
    let mut best = 0;
    for (i, &n) in norms.iter().enumerate() {
        if n > norms[best] {
            best = i;
        }
    }
    Ok(PolyphaseIndex::new(best / s, best % s))
}

/// True when exactly one polyphase attains the maximum norm.
pub fn has_unique_max(x: &Tensor, s: usize, p_norm: NormOrder) -> Result<bool> {
    let norms = polyphase_norms(x, s, p_norm)?;
    let mx = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(norms.iter().filter(|&&n| n == mx).count() == 1)
}

pub fn anchor(x: &Tensor, s: usize, p_norm: NormOrder) -> Result<AnchorResult> {
    let phase = max_polyphase(x, s, p_norm)?;
    let anchored = x.circular_shift(phase.anchor_shift())?;
    Ok(AnchorResult { anchored, phase, stride: s })
}

/// Undo the anchoring shift.
pub fn restore(r: &AnchorResult) -> Result<Tensor> {
    restore_phase(&r.anchored, r.phase)
}

/// Shift any tensor living on the anchored grid back by `(+p, +q)`.
pub fn restore_phase(t: &Tensor, phase: PolyphaseIndex) -> Result<Tensor> {
    t.circular_shift(phase.anchor_shift().inverse())
}
