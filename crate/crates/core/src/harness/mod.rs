//! Equivariance measurement.
//!
//! The core predicate is [`equivariance_test`]: given a map `F`, an input
//! `x` and a translation `g`, find the output translation `g'` minimizing
//! `||F(g x) - g' F(x)||` and compare that minimum against a tolerance.
//! At desk resolutions the search over `g'` is exhaustive, so the test is
//! exact rather than heuristic. Outputs without spatial axes are checked
//! for invariance (`g'` = identity).
//!
//! [`metrics`] holds the model-level measurements (logit variance,
//! consistency, worst-of-N) and [`suites`] the seeded property suites.

pub mod metrics;
pub mod report;
pub mod suites;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{Shift2D, Tensor};

/// Default tolerance for suites on exact (lattice) inputs.
pub const EXACT_TOLERANCE: f64 = 1e-9;
/// Default tolerance for floating point paths on normal-init inputs.
pub const FLOAT_TOLERANCE: f64 = 1e-6;
/// Counterexamples must exceed this residual to count as failures.
pub const COUNTEREXAMPLE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStrategy {
    /// Every translation of the output grid.
    Exhaustive,
    /// Only the given translation.
    Expected(Shift2D),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceVerdict {
    pub op_name: String,
    pub input_seed: u64,
    /// The input translation `g` the verdict refers to.
    pub shift: Shift2D,
    pub passed: bool,
    pub residual: f64,
    /// The output translation `g'` found; present iff `passed`.
    pub matched_shift: Option<Shift2D>,
}

/// Runs `F` on `x` and on `g x` and searches for the output shift.
pub fn equivariance_test<F>(
    f: F,
    x: &Tensor,
    g: Shift2D,
    strategy: CandidateStrategy,
    tolerance: f64,
) -> Result<EquivarianceVerdict>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let base = f(x)?;
    let moved = f(&x.circular_shift(g)?)?;
    compare_outputs(&base, &moved, g, strategy, tolerance)
}

/// The search half of [`equivariance_test`], for callers that already hold
/// `F(x)` and `F(g x)`.
pub fn compare_outputs(
    base: &Tensor,
    moved: &Tensor,
    g: Shift2D,
    strategy: CandidateStrategy,
    tolerance: f64,
) -> Result<EquivarianceVerdict> {
    if base.shape() != moved.shape() {
        return shape_err(format!("F(x) is {:?} but F(g x) is {:?}", base.shape(), moved.shape()));
    }
    let (residual, best) = if base.rank() < 2 {
        (moved.l2_distance(base)?, Shift2D::IDENTITY)
    } else {
        match strategy {
            CandidateStrategy::Expected(e) => (moved.l2_distance(&base.circular_shift(e)?)?, e),
            CandidateStrategy::Exhaustive => best_candidate(base, moved, g)?,
        }
    };
    let passed = residual <= tolerance;
    Ok(EquivarianceVerdict {
        op_name: String::new(),
        input_seed: 0,
        shift: g,
        passed,
        residual,
        matched_shift: passed.then_some(best),
    })
}

/// Minimum over all output translations; `g` (reduced to the output grid)
/// is tried first so it wins exact ties.
fn best_candidate(base: &Tensor, moved: &Tensor, g: Shift2D) -> Result<(f64, Shift2D)> {
    let (h, w) = base.spatial()?;
    let first = g.reduced(h, w);
    let mut best = (moved.l2_distance(&base.circular_shift(first)?)?, first);
    for c in Shift2D::all(h, w) {
        if best.0 == 0.0 {
            break;
        }
        if c == first {
            continue;
        }
        let r = moved.l2_distance(&base.circular_shift(c)?)?;
        if r < best.0 {
            best = (r, c);
        }
    }
    Ok(best)
}

/// Row-permutation residual `||F(P X) - P F(X)||_max` for token maps.
pub fn permutation_residual<F>(f: F, x: &Tensor, perm: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let lhs = f(&x.permute_rows(perm)?)?;
    let rhs = f(x)?.permute_rows(perm)?;
    lhs.max_abs_diff(&rhs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Exhaustive,
    UniformRandom,
}

/// Which input translations to evaluate.
///
/// Exhaustive mode enumerates every `(dy, dx)` in the inclusive box,
/// stepping by `step`; random mode draws `count` shifts uniformly from the
/// box. Random draws for stream `k` come from `Rng::with_stream(seed, k)`,
/// so the first `n` draws of a larger sample equal a smaller sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSampler {
    pub mode: SamplerMode,
    /// Inclusive `(lo, hi)` bounds for `dy`.
    pub dy: (i64, i64),
    /// Inclusive `(lo, hi)` bounds for `dx`.
    pub dx: (i64, i64),
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub step: usize,
}

fn one() -> usize {
    1
}

impl Default for ShiftSampler {
    fn default() -> Self {
        Self::uniform(-15, 15, 20, 0)
    }
}

impl ShiftSampler {
    pub fn uniform(lo: i64, hi: i64, count: usize, seed: u64) -> Self {
        Self { mode: SamplerMode::UniformRandom, dy: (lo, hi), dx: (lo, hi), count, seed, step: 1 }
    }

    pub fn exhaustive(lo: i64, hi: i64) -> Self {
        Self { mode: SamplerMode::Exhaustive, dy: (lo, hi), dx: (lo, hi), count: 1, seed: 0, step: 1 }
    }

    /// Every shift of an `h x w` grid that is a multiple of `step`.
    pub fn grid(h: usize, w: usize, step: usize) -> Self {
        Self { mode: SamplerMode::Exhaustive, dy: (0, h as i64 - 1), dx: (0, w as i64 - 1), count: 1, seed: 0, step }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }

    /// Checks the bounds against an `h x w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (h, w) = (h as i64, w as i64);
        if self.dy.0 > self.dy.1 || self.dx.0 > self.dx.1 {
            return arg_err("sampler bounds must satisfy lo <= hi");
        }
        if self.dy.0 < -h || self.dy.1 > h || self.dx.0 < -w || self.dx.1 > w {
            return arg_err(format!("sampler bounds {:?} x {:?} exceed [-{h}, {h}] x [-{w}, {w}]", self.dy, self.dx));
        }
        if self.count == 0 || self.step == 0 {
            return arg_err("sampler count and step must be positive");
        }
        Ok(())
    }

    /// Shifts for stream 0.
    pub fn shifts(&self) -> Vec<Shift2D> {
        self.shifts_for(0)
    }

    /// Shifts for an independent stream (exhaustive mode ignores it).
    pub fn shifts_for(&self, stream: u64) -> Vec<Shift2D> {
        match self.mode {
            SamplerMode::Exhaustive => {
                let st = self.step as i64;
                let ys = (self.dy.0..=self.dy.1).filter(move |v| v.rem_euclid(st) == 0);
                ys.flat_map(|dy| {
                    (self.dx.0..=self.dx.1).filter(move |v| v.rem_euclid(st) == 0).map(move |dx| Shift2D::new(dy, dx))
                })
                .collect()
            }
            SamplerMode::UniformRandom => {
                let mut rng = Rng::with_stream(self.seed, stream);
                (0..self.count)
                    .map(|_| {
                        let dy = rng.int_in(self.dy.0, self.dy.1);
                        let dx = rng.int_in(self.dx.0, self.dx.1);
                        Shift2D::new(dy, dx)
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{strided_conv, ConvFilter};
    use crate::tensor::NormOrder;

    #[test]
    fn identity_map_matches_the_input_shift() {
        let x = Rng::new(1).normal(&[2, 6, 6]);
        for g in [Shift2D::new(0, 0), Shift2D::new(2, 5), Shift2D::new(-1, 3)] {
            let v =
                equivariance_test(|t| Ok(t.clone()), &x, g, CandidateStrategy::Exhaustive, EXACT_TOLERANCE).unwrap();
            assert!(v.passed);
            assert_eq!(v.residual, 0.0);
            assert_eq!(v.matched_shift, Some(g.reduced(6, 6)));
        }
    }

    #[test]
    fn shifting_map_commutes() {
        let x = Rng::new(2).normal(&[6, 6]);
        let f = |t: &Tensor| t.circular_shift(Shift2D::new(1, 1));
        let g = Shift2D::new(4, 1);
        let v = equivariance_test(f, &x, g, CandidateStrategy::Exhaustive, 0.0).unwrap();
        assert_eq!((v.residual, v.matched_shift), (0.0, Some(g)));
        let v = equivariance_test(f, &x, g, CandidateStrategy::Expected(g), 0.0).unwrap();
        assert!(v.passed);
    }

    #[test]
    fn strided_conv_fails_for_some_shift() {
        let mut rng = Rng::new(3);
        let x = rng.normal(&[2, 8, 8]);
        let f = ConvFilter::new(rng.normal(&[3, 2, 2, 2]), 2, None).unwrap();
        let worst = Shift2D::all(8, 8)
            .map(|g| {
                equivariance_test(|t| strided_conv(t, &f, 2), &x, g, CandidateStrategy::Exhaustive, EXACT_TOLERANCE)
                    .unwrap()
            })
            .fold(0.0f64, |m, v| {
                assert_eq!(v.passed, v.matched_shift.is_some());
                m.max(v.residual)
            });
        assert!(worst > 1e-3);
    }

    #[test]
    fn zero_shift_gives_zero_residual() {
        let mut rng = Rng::new(4);
        let x = rng.normal(&[2, 8, 8]);
        let f = ConvFilter::new(rng.normal(&[3, 2, 2, 2]), 2, None).unwrap();
        let v =
            equivariance_test(|t| strided_conv(t, &f, 2), &x, Shift2D::IDENTITY, CandidateStrategy::Exhaustive, 0.0)
                .unwrap();
        assert_eq!(v.residual, 0.0);
    }

    #[test]
    fn residual_scales_linearly_for_linear_maps() {
        let mut rng = Rng::new(5);
        let x = rng.lattice(&[2, 8, 8], 2);
        let f = ConvFilter::new(rng.lattice(&[3, 2, 2, 2], 2), 2, None).unwrap();
        let g = Shift2D::new(1, 0);
        let run = |t: &Tensor| {
            equivariance_test(|u| strided_conv(u, &f, 2), t, g, CandidateStrategy::Expected(Shift2D::IDENTITY), 1.0)
                .unwrap()
                .residual
        };
        let r = run(&x);
        for alpha in [2.0, -0.5, 4.0] {
            assert_eq!(run(&x.scale(alpha)), alpha.abs() * r);
        }
    }

    #[test]
    fn vectors_fall_back_to_invariance() {
        let x = Rng::new(6).normal(&[4, 4]);
        let sum = |t: &Tensor| Tensor::new(vec![1], vec![t.sum()]);
        let v = equivariance_test(sum, &x, Shift2D::new(1, 2), CandidateStrategy::Exhaustive, 0.0).unwrap();
        assert_eq!(v.matched_shift, Some(Shift2D::IDENTITY));
        let norm = |t: &Tensor| Tensor::new(vec![1], vec![t.lp_norm(NormOrder::L1) + t.at2(0, 0)]);
        let v = equivariance_test(norm, &x, Shift2D::new(1, 2), CandidateStrategy::Exhaustive, 0.0).unwrap();
        assert!(!v.passed && v.matched_shift.is_none());
    }

    #[test]
    fn sampler_modes() {
        let s = ShiftSampler::exhaustive(-1, 1);
        assert_eq!(s.shifts().len(), 9);
        let g = ShiftSampler::grid(8, 8, 4);
        assert_eq!(g.shifts(), vec![Shift2D::new(0, 0), Shift2D::new(0, 4), Shift2D::new(4, 0), Shift2D::new(4, 4)]);
        let r = ShiftSampler::uniform(-15, 15, 30, 7);
        let a = r.shifts();
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|g| (-15..=15).contains(&g.dy) && (-15..=15).contains(&g.dx)));
        assert_eq!(r.clone().with_count(1).shifts()[..], a[..1]);
        assert_ne!(r.shifts_for(1), a);
        assert!(r.validate(32, 32).is_ok());
        assert!(r.validate(8, 8).is_err());
        assert!(ShiftSampler::uniform(0, 1, 0, 0).validate(8, 8).is_err());
    }
}
