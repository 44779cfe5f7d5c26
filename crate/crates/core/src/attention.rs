//! Single-head attention operators.
//!
//! * [`self_attention`]: `softmax(X Wq (X Wk)^T) X Wv` over all tokens.
//! * [`window_attention`]: the same inside each non-overlapping `w x w`
//!   window of a `[C, H, W]` grid. Window tokens are flattened row-major.
//! * [`gsa`]: global subsampled attention. Queries come from every pixel,
//!   keys and values from a strided convolution of the input.
//! * `*_poly` variants anchor the input first (stride = window or
//!   subsampling stride) and also return the phase so callers can restore
//!   the original alignment.
//! * [`attention_with_bias`] and [`abs_pos_embed`] are the positional
//!   encodings whose (lack of) shift equivariance the harness checks.

use serde::{Deserialize, Serialize};

use crate::conv::{strided_conv, ConvFilter};
use crate::error::{arg_err, shape_err, Result};
use crate::polyphase::{anchor, PolyphaseIndex};
use crate::tensor::{NormOrder, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `[d, d_k]`
    pub wq: Tensor,
    /// `[d, d_k]`
    pub wk: Tensor,
    /// `[d, d_v]`
    pub wv: Tensor,
    /// Divide logits by `sqrt(d_k)`. Off by default.
    #[serde(default)]
    pub scale: bool,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let (d, dk) = wq.dims2()?;
        let (d2, dk2) = wk.dims2()?;
        let (d3, _) = wv.dims2()?;
        if d != d2 || d != d3 {
            return shape_err(format!("projection input widths differ: {d}, {d2}, {d3}"));
        }
        if dk != dk2 {
            return shape_err(format!("query/key widths differ: {dk} vs {dk2}"));
        }
        Ok(Self { wq, wk, wv, scale: false })
    }

    pub fn with_scale(mut self, scale: bool) -> Self {
        self.scale = scale;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.wv.shape()[1]
    }

    fn check_tokens(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.model_dim() {
            return shape_err(format!("tokens have width {d}, projections expect {}", self.model_dim()));
        }
        Ok(())
    }
}

/// Whether a relative-position bias is known to be circulant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasStructure {
    Free,
    Circulant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelBias {
    bias: Tensor,
    structure: BiasStructure,
}

impl RelBias {
    pub fn new(bias: Tensor, structure: BiasStructure) -> Result<Self> {
        let (n, m) = bias.dims2()?;
        if n != m {
            return shape_err(format!("bias must be square, got {n}x{m}"));
        }
        if structure == BiasStructure::Circulant {
            for i in 0..n {
                for j in 0..n {
                    if bias.at2(i, j) != bias.at2((i + n - j) % n, 0) {
                        return arg_err(format!("bias entry ({i}, {j}) breaks the circulant pattern"));
                    }
                }
            }
        }
        Ok(Self { bias, structure })
    }

    /// `B[i][j] = b[(i - j) mod n]`.
    pub fn circulant(b: &[f64]) -> Self {
        let n = b.len();
        let bias = Tensor::from_fn(&[n, n], |idx| b[(idx / n + n - idx % n) % n]);
        Self { bias, structure: BiasStructure::Circulant }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.bias
    }

    pub fn structure(&self) -> BiasStructure {
        self.structure
    }
}

/// Non-overlapping `w x w` windows tiling an `H x W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub w: usize,
    pub grid: (usize, usize),
}

impl WindowSpec {
    pub fn new(w: usize, height: usize, width: usize) -> Result<Self> {
        if w == 0 || !height.is_multiple_of(w) || !width.is_multiple_of(w) {
            return shape_err(format!("window {w} does not tile a {height}x{width} grid"));
        }
        Ok(Self { w, grid: (height / w, width / w) })
    }

    pub fn for_tensor(w: usize, x: &Tensor) -> Result<Self> {
        let (h, wd) = x.spatial()?;
        Self::new(w, h, wd)
    }
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, scale: bool) -> Result<Tensor> {
    let mut logits = q.matmul(&k.transpose()?)?;
    if scale {
        let c = 1.0 / (q.shape()[1] as f64).sqrt();
        logits = logits.scale(c);
    }
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    logits.softmax_rows()?.matmul(v)
}

/// `softmax(X Wq (X Wk)^T) X Wv`, optionally scaled by `1/sqrt(d_k)`.
pub fn self_attention(x: &Tensor, theta: &AttentionParams) -> Result<Tensor> {
    theta.check_tokens(x)?;
    let q = x.matmul(&theta.wq)?;
    let k = x.matmul(&theta.wk)?;
    let v = x.matmul(&theta.wv)?;
    attend(&q, &k, &v, None, theta.scale)
}

/// Self-attention with an additive bias on the logits.
pub fn attention_with_bias(x: &Tensor, theta: &AttentionParams, bias: &RelBias, scale: bool) -> Result<Tensor> {
    theta.check_tokens(x)?;
    let (n, _) = x.dims2()?;
    if bias.matrix().shape() != [n, n] {
        return shape_err(format!("bias {:?} for {n} tokens", bias.matrix().shape()));
    }
    let q = x.matmul(&theta.wq)?;
    let k = x.matmul(&theta.wk)?;
    let v = x.matmul(&theta.wv)?;
    attend(&q, &k, &v, Some(bias.matrix()), scale)
}

/// Self-attention applied independently inside every window.
pub fn window_attention(x: &Tensor, spec: &WindowSpec, theta: &AttentionParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if WindowSpec::new(spec.w, h, w)? != *spec {
        return shape_err(format!("window spec {spec:?} does not match a {h}x{w} grid"));
    }
    if c != theta.model_dim() {
        return shape_err(format!("input has {c} channels, projections expect {}", theta.model_dim()));
    }
    let ws = spec.w;
    let dv = theta.value_dim();
    let xd = x.data();
    let mut out = vec![0.0; dv * h * w];
    let mut tokens = vec![0.0; ws * ws * c];
    for wi in 0..spec.grid.0 {
        for wj in 0..spec.grid.1 {
            for a in 0..ws {
                for b in 0..ws {
                    let (i, j) = (wi * ws + a, wj * ws + b);
                    for ch in 0..c {
                        tokens[(a * ws + b) * c + ch] = xd[(ch * h + i) * w + j];
                    }
                }
            }
            let t = Tensor::new(vec![ws * ws, c], tokens.clone())?;
            let y = self_attention(&t, theta)?;
            for a in 0..ws {
                for b in 0..ws {
                    let (i, j) = (wi * ws + a, wj * ws + b);
                    for ch in 0..dv {
                        out[(ch * h + i) * w + j] = y.at2(a * ws + b, ch);
                    }
                }
            }
        }
    }
    Tensor::new(vec![dv, h, w], out)
}

/// Anchor at stride `w`, then window attention.
pub fn window_attention_poly(
    x: &Tensor,
    spec: &WindowSpec,
    theta: &AttentionParams,
    p_norm: NormOrder,
) -> Result<(Tensor, PolyphaseIndex)> {
    let r = anchor(x, spec.w, p_norm)?;
    Ok((window_attention(&r.anchored, spec, theta)?, r.phase))
}

/// Global subsampled attention on a `[C, H, W]` grid. `h` must have
/// stride `s` and `C` output channels.
pub fn gsa(x: &Tensor, s: usize, h: &ConvFilter, theta: &AttentionParams) -> Result<Tensor> {
    let (c, height, width) = x.dims3()?;
    if h.stride != s {
        return arg_err(format!("subsampling filter has stride {}, expected {s}", h.stride));
    }
    if c != theta.model_dim() || h.out_channels() != theta.model_dim() {
        return shape_err(format!(
            "input has {c} channels and subsampler emits {}, projections expect {}",
            h.out_channels(),
            theta.model_dim()
        ));
    }
    let tokens = x.grid_to_tokens()?;
    let sub = strided_conv(x, h, s)?.grid_to_tokens()?;
    let q = tokens.matmul(&theta.wq)?;
    let k = sub.matmul(&theta.wk)?;
    let v = sub.matmul(&theta.wv)?;
    attend(&q, &k, &v, None, theta.scale)?.tokens_to_grid(height, width)
}

/// Anchor at stride `s`, then [`gsa`]. Queries and the subsampled keys and
/// values all come from the same anchored tensor.
pub fn gsa_poly(
    x: &Tensor,
    s: usize,
    h: &ConvFilter,
    theta: &AttentionParams,
    p_norm: NormOrder,
) -> Result<(Tensor, PolyphaseIndex)> {
    let r = anchor(x, s, p_norm)?;
    Ok((gsa(&r.anchored, s, h, theta)?, r.phase))
}

/// Adds a fixed absolute positional encoding.
pub fn abs_pos_embed(x: &Tensor, e: &Tensor) -> Result<Tensor> {
    x.add(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::polyphase::{has_unique_max, restore_phase};
    use crate::rng::Rng;
    use crate::tensor::Shift2D;

    fn params(rng: &mut Rng, d: usize, dk: usize, dv: usize) -> AttentionParams {
        AttentionParams::new(rng.normal(&[d, dk]), rng.normal(&[d, dk]), rng.normal(&[d, dv])).unwrap()
    }

    fn lattice_params(rng: &mut Rng, d: usize) -> AttentionParams {
        AttentionParams::new(rng.lattice(&[d, d], 3), rng.lattice(&[d, d], 3), rng.lattice(&[d, d], 3)).unwrap()
    }

    /// Smallest L2 distance between `y` and any circular shift of `base`.
    fn best_residual(base: &Tensor, y: &Tensor) -> f64 {
        let (h, w) = base.spatial().unwrap();
        Shift2D::all(h, w)
            .map(|g| base.circular_shift(g).unwrap().l2_distance(y).unwrap())
            .fold(f64::INFINITY, f64::min)
    }

    fn unique_lattice(rng: &mut Rng, shape: &[usize], s: usize) -> Tensor {
        loop {
            let x = rng.lattice(shape, 3);
            if has_unique_max(&x, s, NormOrder::L2).unwrap() {
                return x;
            }
        }
    }

    #[test]
    fn single_token_is_value_projection() {
        let mut rng = Rng::new(1);
        let th = params(&mut rng, 4, 3, 5);
        let x = rng.normal(&[1, 4]);
        assert_eq!(self_attention(&x, &th).unwrap(), x.matmul(&th.wv).unwrap());
    }

    #[test]
    fn zero_logits_average_the_values() {
        let mut rng = Rng::new(2);
        let mut th = params(&mut rng, 4, 3, 2);
        th.wq = Tensor::zeros(&[4, 3]);
        th.wk = Tensor::zeros(&[4, 3]);
        let x = rng.normal(&[6, 4]);
        let v = x.matmul(&th.wv).unwrap();
        let y = self_attention(&x, &th).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..6).map(|i| v.at2(i, j)).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((y.at2(i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = Rng::new(3);
        let th = params(&mut rng, 4, 3, 2);
        assert!(matches!(self_attention(&rng.normal(&[5, 3]), &th), Err(Error::Shape(_))));
        assert!(AttentionParams::new(rng.normal(&[4, 3]), rng.normal(&[4, 2]), rng.normal(&[4, 2])).is_err());
        assert!(WindowSpec::new(3, 8, 8).is_err());
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut rng = Rng::new(4);
        let th = params(&mut rng, 6, 4, 6);
        let x = rng.normal(&[10, 6]);
        let y = self_attention(&x, &th).unwrap();
        for _ in 0..20 {
            let p = rng.permutation(10);
            let lhs = self_attention(&x.permute_rows(&p).unwrap(), &th).unwrap();
            let rhs = y.permute_rows(&p).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn single_window_is_global_attention() {
        let mut rng = Rng::new(5);
        let th = params(&mut rng, 3, 3, 3);
        let x = rng.normal(&[3, 4, 4]);
        let y = window_attention(&x, &WindowSpec::new(4, 4, 4).unwrap(), &th).unwrap();
        let g = self_attention(&x.grid_to_tokens().unwrap(), &th).unwrap().tokens_to_grid(4, 4).unwrap();
        assert_eq!(y, g);
    }

    #[test]
    fn unit_window_is_per_token_value_map() {
        let mut rng = Rng::new(6);
        let th = params(&mut rng, 3, 2, 5);
        let x = rng.normal(&[3, 4, 6]);
        let y = window_attention(&x, &WindowSpec::new(1, 4, 6).unwrap(), &th).unwrap();
        let v = x.grid_to_tokens().unwrap().matmul(&th.wv).unwrap().tokens_to_grid(4, 6).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn duplicated_windows_give_duplicated_outputs() {
        let mut rng = Rng::new(7);
        let th = params(&mut rng, 2, 2, 2);
        let mut x = rng.normal(&[2, 4, 8]);
        // copy window (0,0) into window (1,1)
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let v = x.at3(c, i, j);
                    x.data_mut()[(c * 4 + i) * 8 + 4 + j] = v;
                }
            }
        }
        let y = window_attention(&x, &WindowSpec::new(4, 4, 8).unwrap(), &th).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.at3(c, i, j), y.at3(c, i, j + 4));
                }
            }
        }
    }

    #[test]
    fn window_attention_poly_equivariance() {
        let mut rng = Rng::new(8);
        let th = lattice_params(&mut rng, 3);
        let spec = WindowSpec::new(2, 8, 8).unwrap();
        let x = unique_lattice(&mut rng, &[3, 8, 8], 2);
        let (base, _) = window_attention_poly(&x, &spec, &th, NormOrder::L2).unwrap();
        let plain = window_attention(&x, &spec, &th).unwrap();
        let mut worst_plain: f64 = 0.0;
        for g in Shift2D::all(8, 8) {
            let xs = x.circular_shift(g).unwrap();
            let (y, _) = window_attention_poly(&xs, &spec, &th, NormOrder::L2).unwrap();
            assert!(best_residual(&base, &y) <= 1e-10);
            worst_plain = worst_plain.max(best_residual(&plain, &window_attention(&xs, &spec, &th).unwrap()));
        }
        assert!(worst_plain > 1e-3);
    }

    #[test]
    fn constant_input_anchoring_is_identity() {
        let mut rng = Rng::new(9);
        let th = params(&mut rng, 2, 2, 2);
        let x = Tensor::full(&[2, 4, 4], 0.5);
        let spec = WindowSpec::new(2, 4, 4).unwrap();
        let (y, ph) = window_attention_poly(&x, &spec, &th, NormOrder::L2).unwrap();
        assert_eq!(ph, PolyphaseIndex::new(0, 0));
        assert_eq!(y, window_attention(&x, &spec, &th).unwrap());
    }

    #[test]
    fn gsa_without_subsampling_is_global_attention() {
        let mut rng = Rng::new(10);
        let th = params(&mut rng, 3, 3, 3);
        let x = rng.normal(&[3, 4, 4]);
        let eye = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
        let h = ConvFilter::new(eye, 1, None).unwrap();
        let y = gsa(&x, 1, &h, &th).unwrap();
        let g = self_attention(&x.grid_to_tokens().unwrap(), &th).unwrap().tokens_to_grid(4, 4).unwrap();
        assert_eq!(y, g);
    }

    #[test]
    fn gsa_zero_queries_give_constant_output() {
        let mut rng = Rng::new(11);
        let mut th = params(&mut rng, 3, 3, 2);
        th.wq = Tensor::zeros(&[3, 3]);
        let x = rng.normal(&[3, 8, 8]);
        let h = ConvFilter::new(rng.normal(&[3, 3, 2, 2]), 2, None).unwrap();
        let y = gsa(&x, 2, &h, &th).unwrap();
        for c in 0..2 {
            let first = y.at3(c, 0, 0);
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(y.at3(c, i, j), first);
                }
            }
        }
        let wrong = ConvFilter::new(rng.normal(&[3, 3, 2, 2]), 1, None).unwrap();
        assert!(matches!(gsa(&x, 2, &wrong, &th), Err(Error::Argument(_))));
    }

    #[test]
    fn gsa_poly_equivariance_and_plain_failure() {
        let mut rng = Rng::new(12);
        let th = lattice_params(&mut rng, 3);
        let h = ConvFilter::new(rng.lattice(&[3, 3, 2, 2], 3), 2, None).unwrap();
        let x = unique_lattice(&mut rng, &[3, 8, 8], 2);
        let (base, ph) = gsa_poly(&x, 2, &h, &th, NormOrder::L2).unwrap();
        assert_eq!(ph, anchor(&x, 2, NormOrder::L2).unwrap().phase);
        let restored = restore_phase(&base, ph).unwrap();
        let plain = gsa(&x, 2, &h, &th).unwrap();
        let mut worst_plain: f64 = 0.0;
        for g in Shift2D::all(8, 8) {
            let xs = x.circular_shift(g).unwrap();
            let (y, ph2) = gsa_poly(&xs, 2, &h, &th, NormOrder::L2).unwrap();
            assert!(best_residual(&base, &y) <= 1e-10);
            // conjugated form is equivariant with the same shift
            let r = restore_phase(&y, ph2).unwrap();
            assert!(r.max_abs_diff(&restored.circular_shift(g).unwrap()).unwrap() <= 1e-12);
            worst_plain = worst_plain.max(best_residual(&plain, &gsa(&xs, 2, &h, &th).unwrap()));
        }
        assert!(worst_plain > 1e-3);
    }

    #[test]
    fn zero_bias_matches_plain_attention() {
        let mut rng = Rng::new(13);
        let th = params(&mut rng, 4, 4, 4);
        let x = rng.normal(&[9, 4]);
        let b = RelBias::new(Tensor::zeros(&[9, 9]), BiasStructure::Free).unwrap();
        let lhs = attention_with_bias(&x, &th, &b, false).unwrap();
        assert!(lhs.max_abs_diff(&self_attention(&x, &th).unwrap()).unwrap() == 0.0);
        let lhs = attention_with_bias(&x, &th, &b, true).unwrap();
        let rhs = self_attention(&x, &th.clone().with_scale(true)).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn circulant_bias_is_validated() {
        let b = RelBias::circulant(&[0.5, -1.0, 2.0, 0.25]);
        assert_eq!(b.matrix().at2(2, 1), -1.0);
        assert_eq!(b.matrix().at2(0, 3), -1.0);
        assert!(RelBias::new(b.matrix().clone(), BiasStructure::Circulant).is_ok());
        let mut bad = Tensor::zeros(&[4, 4]);
        bad.data_mut()[0] = 1.0;
        assert!(matches!(RelBias::new(bad, BiasStructure::Circulant), Err(Error::Argument(_))));
    }

    #[test]
    fn relative_bias_equivariance_depends_on_structure() {
        let mut rng = Rng::new(14);
        let th = params(&mut rng, 4, 4, 4);
        let n = 9;
        let x = rng.normal(&[n, 4]);
        let roll = Shift2D::new(1, 0);
        let mut basis = Tensor::zeros(&[n, n]);
        basis.data_mut()[0] = 1.0;
        basis.data_mut()[n + 1] = 1.0;
        let basis = RelBias::new(basis, BiasStructure::Free).unwrap();
        let circ = RelBias::circulant(rng.normal(&[n]).data());
        for (b, equivariant) in [(&basis, false), (&circ, true)] {
            let lhs = attention_with_bias(&x.circular_shift(roll).unwrap(), &th, b, true).unwrap();
            let rhs = attention_with_bias(&x, &th, b, true).unwrap().circular_shift(roll).unwrap();
            let r = lhs.l2_distance(&rhs).unwrap();
            if equivariant {
                assert!(r <= 1e-12, "{r}");
            } else {
                assert!(r > 1e-3, "{r}");
            }
        }
    }

    #[test]
    fn absolute_embedding() {
        let mut rng = Rng::new(15);
        let x = rng.normal(&[2, 4, 4]);
        assert_eq!(abs_pos_embed(&x, &Tensor::zeros(&[2, 4, 4])).unwrap(), x);
        let g = Shift2D::new(1, 2);
        let e = rng.normal(&[2, 4, 4]);
        let lhs = abs_pos_embed(&x.circular_shift(g).unwrap(), &e).unwrap();
        let rhs = abs_pos_embed(&x, &e).unwrap().circular_shift(g).unwrap();
        let gap = e.sub(&e.circular_shift(g).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs_diff(&gap).unwrap() < 1e-14);
        assert!(gap.lp_norm(NormOrder::L2) > 0.0);
        let c = Tensor::full(&[2, 4, 4], 0.3);
        let lhs = abs_pos_embed(&x.circular_shift(g).unwrap(), &c).unwrap();
        assert_eq!(lhs, abs_pos_embed(&x, &c).unwrap().circular_shift(g).unwrap());
    }
}
