//! Circularly padded 2-D cross-correlation.
//!
//! Kernel placement: an odd `k x k` kernel is centred on the output pixel
//! (offset `k / 2`); an even kernel starts at the output pixel, so a kernel
//! whose size equals the stride tiles the image into disjoint patches the
//! way a ViT patch embedding does. Reads wrap around both spatial axes.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::polyphase::{anchor, PolyphaseIndex};
use crate::tensor::{NormOrder, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFilter {
    /// `[C_out, C_in, k, k]`
    pub weights: Tensor,
    pub stride: usize,
    /// `[C_out]`
    pub bias: Option<Tensor>,
}

impl ConvFilter {
    pub fn new(weights: Tensor, stride: usize, bias: Option<Tensor>) -> Result<Self> {
        let [c_out, _, k, k2] = weights.shape()[..] else {
            return shape_err(format!("conv weights must be [C_out, C_in, k, k], got {:?}", weights.shape()));
        };
        if k != k2 {
            return shape_err("conv kernel must be square");
        }
        if stride == 0 {
            return arg_err("stride must be positive");
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return shape_err(format!("bias shape {:?} for {c_out} outputs", b.shape()));
            }
        }
        Ok(Self { weights, stride, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Strided correlation at this filter's own stride.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        strided_conv(x, self, self.stride)
    }
}

/// One odd `k x k` kernel per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseFilter {
    /// `[C, k, k]`
    pub weights: Tensor,
}

impl DepthwiseFilter {
    pub fn new(weights: Tensor) -> Result<Self> {
        let [_, k, k2] = weights.shape()[..] else {
            return shape_err(format!("depthwise weights must be [C, k, k], got {:?}", weights.shape()));
        };
        if k != k2 {
            return shape_err("depthwise kernel must be square");
        }
        if k % 2 == 0 {
            return arg_err(format!("depthwise kernel size must be odd, got {k}"));
        }
        Ok(Self { weights })
    }
}

fn kernel_offset(k: usize) -> usize {
    if k % 2 == 1 {
        k / 2
    } else {
        0
    }
}

/// Shared kernel: evaluates the circular correlation at positions
/// `(s*i, s*j)`. Accumulation order is channel, kernel row, kernel column,
/// then bias, for every stride, so subsampling a stride-1 result and
/// computing the strided result directly agree bit for bit.
fn correlate(x: &Tensor, weights: &[f64], c_out: usize, k: usize, bias: Option<&Tensor>, s: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    if k > h || k > w {
        return shape_err(format!("kernel {k}x{k} larger than input {h}x{w}"));
    }
    if h % s != 0 || w % s != 0 {
        return shape_err(format!("stride {s} does not divide spatial size {h}x{w}"));
    }
    let (ho, wo) = (h / s, w / s);
    let off = kernel_offset(k);
    let xd = x.data();
    let cols: Vec<Vec<usize>> = (0..wo).map(|j| (0..k).map(|b| (s * j + b + w - off) % w).collect()).collect();
    let mut out = Vec::with_capacity(c_out * ho * wo);
    for o in 0..c_out {
        let wo_base = o * c_in * k * k;
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for i in 0..ho {
            let rows: Vec<usize> = (0..k).map(|a| (s * i + a + h - off) % h).collect();
            for col in &cols {
                let mut acc = 0.0;
                for c in 0..c_in {
                    let plane = &xd[c * h * w..(c + 1) * h * w];
                    let kw = &weights[wo_base + c * k * k..wo_base + (c + 1) * k * k];
                    for (a, &r) in rows.iter().enumerate() {
                        let line = &plane[r * w..(r + 1) * w];
                        for (bb, &cc) in col.iter().enumerate() {
                            acc += kw[a * k + bb] * line[cc];
                        }
                    }
                }
                out.push(acc + b);
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

fn check_channels(x: &Tensor, f: &ConvFilter) -> Result<()> {
    let (c, _, _) = x.dims3()?;
    if c != f.in_channels() {
        return shape_err(format!("input has {c} channels, filter expects {}", f.in_channels()));
    }
    Ok(())
}

/// Stride-1 circular cross-correlation; output keeps the input's spatial size.
/// The filter's own `stride` field is ignored here.
pub fn conv2d_circular(x: &Tensor, f: &ConvFilter) -> Result<Tensor> {
    strided_conv(x, f, 1)
}

/// Circular correlation sampled every `s` pixels, equal to the `(0, 0)`
/// polyphase of [`conv2d_circular`].
pub fn strided_conv(x: &Tensor, f: &ConvFilter, s: usize) -> Result<Tensor> {
    if s == 0 {
        return arg_err("stride must be positive");
    }
    check_channels(x, f)?;
    correlate(x, f.weights.data(), f.out_channels(), f.kernel_size(), f.bias.as_ref(), s)
}

/// Per-channel circular correlation with no cross-channel mixing.
pub fn depthwise_conv_circular(x: &Tensor, f: &DepthwiseFilter) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let [fc, k, _] = f.weights.shape()[..] else {
        return shape_err("depthwise weights must be [C, k, k]");
    };
    if k % 2 == 0 {
        return arg_err(format!("depthwise kernel size must be odd, got {k}"));
    }
    if fc != c {
        return shape_err(format!("input has {c} channels, depthwise filter has {fc}"));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = Tensor::new(vec![1, h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let kw = &f.weights.data()[ch * k * k..(ch + 1) * k * k];
        out.extend(correlate(&plane, kw, 1, k, None, 1)?.into_data());
    }
    Tensor::new(vec![c, h, w], out)
}

/// Polyphase-anchored patch embedding: anchor at stride `s`, then strided
/// correlation at the same stride.
pub fn patch_embed_poly(x: &Tensor, f: &ConvFilter, s: usize, p_norm: NormOrder) -> Result<(Tensor, PolyphaseIndex)> {
    let r = anchor(x, s, p_norm)?;
    Ok((strided_conv(&r.anchored, f, s)?, r.phase))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::polyphase::{has_unique_max, polyphase_extract};
    use crate::rng::Rng;
    use crate::tensor::Shift2D;

    fn delta(c_out: usize, c_in: usize, k: usize) -> ConvFilter {
        let mut w = Tensor::zeros(&[c_out, c_in, k, k]);
        for o in 0..c_out {
            for c in 0..c_in {
                w.data_mut()[((o * c_in + c) * k + k / 2) * k + k / 2] = 1.0;
            }
        }
        ConvFilter::new(w, 1, None).unwrap()
    }

    /// Quadruple loop with explicit modular indexing.
    fn naive_conv(x: &Tensor, f: &ConvFilter) -> Tensor {
        let (c_in, h, w) = x.dims3().unwrap();
        let (c_out, k) = (f.out_channels(), f.kernel_size());
        let off = if k % 2 == 1 { k / 2 } else { 0 } as i64;
        let mut out = Tensor::zeros(&[c_out, h, w]);
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for a in 0..k {
                            for b in 0..k {
                                let r = (i as i64 + a as i64 - off).rem_euclid(h as i64) as usize;
                                let q = (j as i64 + b as i64 - off).rem_euclid(w as i64) as usize;
                                let wv = f.weights.data()[((o * c_in + c) * k + a) * k + b];
                                acc += wv * x.at3(c, r, q);
                            }
                        }
                    }
                    let bias = f.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    out.data_mut()[(o * h + i) * w + j] = acc + bias;
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_sums_input_channels() {
        let x = Rng::new(1).normal(&[2, 5, 5]);
        let y = conv2d_circular(&x, &delta(3, 2, 3)).unwrap();
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(y.at3(o, i, j), x.at3(0, i, j) + x.at3(1, i, j));
                }
            }
        }
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::full(&[1, 6, 6], 1.5);
        let f = ConvFilter::new(Tensor::full(&[1, 1, 3, 3], 1.0), 1, None).unwrap();
        let y = conv2d_circular(&x, &f).unwrap();
        assert!(y.data().iter().all(|&v| v == 13.5));
    }

    #[test]
    fn matches_naive_oracle_bitwise() {
        let mut rng = Rng::new(9);
        let x = rng.normal(&[1, 5, 5]);
        let f = ConvFilter::new(rng.normal(&[1, 1, 3, 3]), 1, None).unwrap();
        assert_eq!(conv2d_circular(&x, &f).unwrap(), naive_conv(&x, &f));
        let x = rng.normal(&[3, 6, 7]);
        let f = ConvFilter::new(rng.normal(&[2, 3, 4, 4]), 1, Some(rng.normal(&[2]))).unwrap();
        assert_eq!(conv2d_circular(&x, &f).unwrap(), naive_conv(&x, &f));
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(conv2d_circular(&x, &delta(1, 3, 3)), Err(Error::Shape(_))));
        let big = ConvFilter::new(Tensor::zeros(&[1, 2, 5, 5]), 1, None).unwrap();
        assert!(matches!(conv2d_circular(&x, &big), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_is_subsampled_full_conv() {
        let mut rng = Rng::new(10);
        let x = rng.normal(&[3, 8, 8]);
        for k in [1, 2, 3, 4] {
            let f = ConvFilter::new(rng.normal(&[4, 3, k, k]), 1, Some(rng.normal(&[4]))).unwrap();
            let full = conv2d_circular(&x, &f).unwrap();
            assert_eq!(strided_conv(&x, &f, 1).unwrap(), full);
            for s in [1, 2, 4] {
                let sub = polyphase_extract(&full, PolyphaseIndex::new(0, 0), s).unwrap();
                assert_eq!(strided_conv(&x, &f, s).unwrap(), sub);
            }
        }
        let f = ConvFilter::new(Tensor::zeros(&[1, 3, 3, 3]), 3, None).unwrap();
        assert!(matches!(strided_conv(&x, &f, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn patch_sums_with_ones_kernel() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let f = ConvFilter::new(Tensor::full(&[1, 1, 2, 2], 1.0), 2, None).unwrap();
        let y = f.apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn depthwise_examples() {
        let mut rng = Rng::new(12);
        let x = rng.normal(&[3, 6, 6]);
        let mut dw = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            dw.data_mut()[c * 9 + 4] = 1.0;
        }
        assert_eq!(depthwise_conv_circular(&x, &DepthwiseFilter::new(dw).unwrap()).unwrap(), x);

        let mut w = rng.normal(&[3, 3, 3]);
        w.data_mut()[..9].iter_mut().for_each(|v| *v = 0.0);
        let y = depthwise_conv_circular(&x, &DepthwiseFilter::new(w).unwrap()).unwrap();
        assert!(y.data()[..36].iter().all(|&v| v == 0.0));

        assert!(matches!(DepthwiseFilter::new(Tensor::zeros(&[3, 2, 2])), Err(Error::Argument(_))));
        let even = DepthwiseFilter { weights: Tensor::zeros(&[3, 2, 2]) };
        assert!(matches!(depthwise_conv_circular(&x, &even), Err(Error::Argument(_))));
    }

    #[test]
    fn depthwise_matches_per_channel_convs() {
        let mut rng = Rng::new(13);
        let x = rng.normal(&[4, 7, 5]);
        let w = rng.normal(&[4, 3, 3]);
        let y = depthwise_conv_circular(&x, &DepthwiseFilter::new(w.clone()).unwrap()).unwrap();
        for c in 0..4 {
            let xc = Tensor::new(vec![1, 7, 5], x.data()[c * 35..(c + 1) * 35].to_vec()).unwrap();
            let wc = Tensor::new(vec![1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = conv2d_circular(&xc, &ConvFilter::new(wc, 1, None).unwrap()).unwrap();
            assert_eq!(&y.data()[c * 35..(c + 1) * 35], yc.data());
        }
    }

    #[test]
    fn unstrided_convs_commute_with_shifts() {
        let mut rng = Rng::new(14);
        let x = rng.lattice(&[2, 8, 8], 3);
        let f = ConvFilter::new(rng.lattice(&[3, 2, 3, 3], 3), 1, None).unwrap();
        let dw = DepthwiseFilter::new(rng.lattice(&[2, 5, 5], 3)).unwrap();
        for g in Shift2D::all(8, 8) {
            let xs = x.circular_shift(g).unwrap();
            assert_eq!(conv2d_circular(&xs, &f).unwrap(), conv2d_circular(&x, &f).unwrap().circular_shift(g).unwrap());
            assert_eq!(
                depthwise_conv_circular(&xs, &dw).unwrap(),
                depthwise_conv_circular(&x, &dw).unwrap().circular_shift(g).unwrap()
            );
        }
    }

    #[test]
    fn patch_embed_poly_examples() {
        let mut rng = Rng::new(15);
        let f = ConvFilter::new(rng.normal(&[4, 2, 2, 2]), 2, None).unwrap();
        let c = Tensor::full(&[2, 8, 8], 0.75);
        let (y, ph) = patch_embed_poly(&c, &f, 2, NormOrder::L2).unwrap();
        assert_eq!(ph, PolyphaseIndex::new(0, 0));
        assert_eq!(y, strided_conv(&c, &f, 2).unwrap());

        // single patch
        let x = rng.normal(&[2, 8, 8]);
        let f8 = ConvFilter::new(rng.normal(&[3, 2, 8, 8]), 8, None).unwrap();
        let (y, _) = patch_embed_poly(&x, &f8, 8, NormOrder::L2).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        let (ys, _) = patch_embed_poly(&x.circular_shift(Shift2D::new(3, 5)).unwrap(), &f8, 8, NormOrder::L2).unwrap();
        assert_eq!(y, ys);
    }

    #[test]
    fn patch_embed_poly_equivariant_for_all_shifts() {
        let mut rng = Rng::new(16);
        let f = ConvFilter::new(rng.lattice(&[3, 2, 2, 2], 3), 2, None).unwrap();
        let x = loop {
            let x = rng.lattice(&[2, 8, 8], 3);
            if has_unique_max(&x, 2, NormOrder::L2).unwrap() {
                break x;
            }
        };
        let (base, _) = patch_embed_poly(&x, &f, 2, NormOrder::L2).unwrap();
        for g in Shift2D::all(8, 8) {
            let (y, _) = patch_embed_poly(&x.circular_shift(g).unwrap(), &f, 2, NormOrder::L2).unwrap();
            assert!(Shift2D::all(4, 4).any(|c| base.circular_shift(c).unwrap() == y), "shift {g}");
        }
    }
}
