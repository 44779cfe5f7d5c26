//! Token-wise layers: layer normalization and the two-layer MLP.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Normalizes each row of `x` over the feature axis, then applies
/// `gamma * x_hat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return shape_err(format!(
            "layer norm over width {d} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * d);
    let (g, b) = (gamma.data(), beta.data());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]));
    }
    Tensor::new(vec![n, d], out)
}

/// Two-layer feed-forward network applied row-wise:
/// `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

fn add_row_bias(x: &mut Tensor, b: &Tensor) -> Result<()> {
    let (_, m) = x.dims2()?;
    if b.shape() != [m] {
        return shape_err(format!("bias {:?} for width {m}", b.shape()));
    }
    for row in x.data_mut().chunks_exact_mut(m) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(())
}

pub fn mlp_block(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    let mut h = x.matmul(&p.w1)?;
    add_row_bias(&mut h, &p.b1)?;
    let h = h.map(|v| p.activation.apply(v));
    let mut y = h.matmul(&p.w2)?;
    add_row_bias(&mut y, &p.b2)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_row_maps_to_beta() {
        let x = Tensor::full(&[2, 4], 3.25);
        let gamma = Tensor::full(&[4], 1.5);
        let beta = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, LAYER_NORM_EPS).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((y.at2(i, j) - beta.data()[j]).abs() <= 1e-2 * 1.5);
            }
        }
    }

    #[test]
    fn standardized_row_is_nearly_fixed() {
        let x = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), LAYER_NORM_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_commutes_with_row_permutations() {
        let mut rng = Rng::new(1);
        let x = rng.normal(&[7, 5]);
        let (g, b) = (rng.normal(&[5]), rng.normal(&[5]));
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let p = rng.permutation(7);
        let yp = layer_norm(&x.permute_rows(&p).unwrap(), &g, &b, LAYER_NORM_EPS).unwrap();
        assert_eq!(yp, y.permute_rows(&p).unwrap());
        assert!(layer_norm(&x, &Tensor::zeros(&[4]), &b, LAYER_NORM_EPS).is_err());
    }

    fn mlp(rng: &mut Rng, d: usize, hdim: usize) -> MlpParams {
        MlpParams {
            w1: rng.normal(&[d, hdim]),
            b1: rng.normal(&[hdim]),
            w2: rng.normal(&[hdim, d]),
            b2: rng.normal(&[d]),
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let p = MlpParams {
            w1: Tensor::zeros(&[3, 6]),
            b1: Tensor::zeros(&[6]),
            w2: Tensor::zeros(&[6, 3]),
            b2: Tensor::zeros(&[3]),
            activation: Activation::Gelu,
        };
        let x = Rng::new(2).normal(&[4, 3]);
        assert_eq!(mlp_block(&x, &p).unwrap(), Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn identity_relu_mlp_passes_nonnegative_input() {
        let p = MlpParams {
            w1: Tensor::eye(3),
            b1: Tensor::zeros(&[3]),
            w2: Tensor::eye(3),
            b2: Tensor::zeros(&[3]),
            activation: Activation::Relu,
        };
        let x = Rng::new(3).normal(&[5, 3]).map(f64::abs);
        assert_eq!(mlp_block(&x, &p).unwrap(), x);
    }

    #[test]
    fn mlp_commutes_with_row_permutations() {
        let mut rng = Rng::new(4);
        let p = mlp(&mut rng, 4, 8);
        let x = rng.normal(&[6, 4]);
        let perm = rng.permutation(6);
        let lhs = mlp_block(&x.permute_rows(&perm).unwrap(), &p).unwrap();
        assert_eq!(lhs, mlp_block(&x, &p).unwrap().permute_rows(&perm).unwrap());
        assert!(mlp_block(&rng.normal(&[6, 5]), &p).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_192).abs() < 1e-5);
        assert!((Activation::Gelu.apply(-3.0) + 0.003_637).abs() < 1e-5);
    }
}
