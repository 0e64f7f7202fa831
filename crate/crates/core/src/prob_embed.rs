//! Diagonal-Gaussian pixel embeddings.
//!
//! A [`ProbRepr`] is a mean vector plus a per-dimension variance. Two of them
//! are compared with the mutual likelihood score ([`mls`]), the log density
//! that both describe the same point, and any number of them are combined by
//! precision-weighted fusion ([`fuse`]).

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{PrclError, Result};

/// Smallest variance a [`ProbRepr`] may hold.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Largest variance a [`ProbRepr`] may hold.
pub const VARIANCE_CEIL: f64 = 1e8;

static CLAMPED_VARIANCES: AtomicU64 = AtomicU64::new(0);

/// Number of variance entries clamped into `[VARIANCE_FLOOR, VARIANCE_CEIL]`
/// since process start.
pub fn clamped_variance_count() -> u64 {
    CLAMPED_VARIANCES.load(AtomicOrdering::Relaxed)
}

/// A diagonal Gaussian `N(mu, diag(sigma2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRepr {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

impl ProbRepr {
    /// Builds a representation, clamping variances into the allowed range.
    pub fn new(mu: Vec<f64>, mut sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(PrclError::DimensionMismatch {
                expected: mu.len(),
                got: sigma2.len(),
            });
        }
        if mu.is_empty() {
            return Err(PrclError::contract("representation dimension must be positive"));
        }
        if mu.iter().chain(sigma2.iter()).any(|v| !v.is_finite()) {
            return Err(PrclError::NonFinite("ProbRepr"));
        }
        let mut clamped = 0;
        for s in sigma2.iter_mut() {
            let c = s.clamp(VARIANCE_FLOOR, VARIANCE_CEIL);
            if c != *s {
                clamped += 1;
                *s = c;
            }
        }
        if clamped > 0 {
            CLAMPED_VARIANCES.fetch_add(clamped, AtomicOrdering::Relaxed);
        }
        Ok(ProbRepr { mu, sigma2 })
    }

    /// Representation with the same variance in every dimension.
    pub fn isotropic(mu: Vec<f64>, sigma2: f64) -> Result<Self> {
        let d = mu.len();
        ProbRepr::new(mu, vec![sigma2; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.mu, self.sigma2)
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.mu
            .iter()
            .chain(self.sigma2.iter())
            .zip(other.mu.iter().chain(other.sigma2.iter()))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Gradient of [`mls`] with respect to each of its four parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlsGrad {
    pub mu_a: Vec<f64>,
    pub sigma2_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub sigma2_b: Vec<f64>,
}

fn check_pair(a_mu: &[f64], a_s2: &[f64], b_mu: &[f64], b_s2: &[f64]) -> Result<()> {
    let d = a_mu.len();
    for len in [a_s2.len(), b_mu.len(), b_s2.len()] {
        if len != d {
            return Err(PrclError::DimensionMismatch { expected: d, got: len });
        }
    }
    if a_mu
        .iter()
        .chain(a_s2)
        .chain(b_mu)
        .chain(b_s2)
        .any(|v| !v.is_finite())
    {
        return Err(PrclError::NonFinite("mls input"));
    }
    Ok(())
}

/// Mutual likelihood score on raw parameter slices.
///
/// Only the per-dimension variance *sums* must be positive, so one side may
/// carry zero variance (virtual negatives do).
pub fn mls_raw(a_mu: &[f64], a_s2: &[f64], b_mu: &[f64], b_s2: &[f64]) -> Result<f64> {
    check_pair(a_mu, a_s2, b_mu, b_s2)?;
    let mut acc = 0.0;
    for d in 0..a_mu.len() {
        let s = a_s2[d] + b_s2[d];
        if s <= 0.0 {
            return Err(PrclError::contract("variance sum must be positive"));
        }
        let diff = a_mu[d] - b_mu[d];
        acc += diff * diff / s + s.ln();
    }
    Ok(-0.5 * acc - 0.5 * a_mu.len() as f64 * (2.0 * PI).ln())
}

/// Mutual likelihood score, including the `-(D/2) log 2π` constant.
pub fn mls(a: &ProbRepr, b: &ProbRepr) -> Result<f64> {
    mls_raw(&a.mu, &a.sigma2, &b.mu, &b.sigma2)
}

/// Analytic gradient of [`mls_raw`].
pub fn mls_grad_raw(a_mu: &[f64], a_s2: &[f64], b_mu: &[f64], b_s2: &[f64]) -> Result<MlsGrad> {
    check_pair(a_mu, a_s2, b_mu, b_s2)?;
    let d = a_mu.len();
    let mut g = MlsGrad {
        mu_a: vec![0.0; d],
        sigma2_a: vec![0.0; d],
        mu_b: vec![0.0; d],
        sigma2_b: vec![0.0; d],
    };
    for i in 0..d {
        let s = a_s2[i] + b_s2[i];
        if s <= 0.0 {
            return Err(PrclError::contract("variance sum must be positive"));
        }
        let diff = a_mu[i] - b_mu[i];
        g.mu_a[i] = -diff / s;
        g.mu_b[i] = diff / s;
        // d/ds of -0.5 (diff^2 / s + ln s)
        let ds = 0.5 * (diff * diff / (s * s) - 1.0 / s);
        g.sigma2_a[i] = ds;
        g.sigma2_b[i] = ds;
    }
    Ok(g)
}

pub fn mls_grad(a: &ProbRepr, b: &ProbRepr) -> Result<MlsGrad> {
    mls_grad_raw(&a.mu, &a.sigma2, &b.mu, &b.sigma2)
}

/// Precision-weighted fusion of representations.
///
/// Inputs are summed in a canonical order, so the result is bit-identical
/// under any permutation of `reps`.
pub fn fuse(reps: &[ProbRepr]) -> Result<ProbRepr> {
    let first = reps
        .first()
        .ok_or_else(|| PrclError::contract("cannot fuse an empty set"))?;
    let d = first.dim();
    if let Some(bad) = reps.iter().find(|r| r.dim() != d) {
        return Err(PrclError::DimensionMismatch {
            expected: d,
            got: bad.dim(),
        });
    }
    if reps.len() == 1 {
        return Ok(first.clone());
    }
    let mut order: Vec<&ProbRepr> = reps.iter().collect();
    order.sort_by(|a, b| a.canonical_cmp(b));

    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for r in order {
        for i in 0..d {
            let p = 1.0 / r.sigma2[i];
            precision[i] += p;
            weighted[i] += r.mu[i] * p;
        }
    }
    let sigma2: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mu = weighted.iter().zip(&sigma2).map(|(w, s)| w * s).collect();
    ProbRepr::new(mu, sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn repr(mu: &[f64], s2: &[f64]) -> ProbRepr {
        ProbRepr::new(mu.to_vec(), s2.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn mls_zero_distance_unit_sum() {
        let a = repr(&[0.0], &[0.5]);
        let v = mls(&a, &a).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn mls_two_dim_example() {
        // -0.5 * (1/2 + ln 2 + ln 2) - ln(2π), evaluated by hand
        let a = repr(&[1.0, 0.0], &[1.0, 1.0]);
        let b = repr(&[0.0, 0.0], &[1.0, 1.0]);
        assert!((mls(&a, &b).unwrap() - (-2.781_024_246_969_290_7)).abs() < 1e-12);
    }

    #[test]
    fn mls_rejects_mismatched_dims() {
        let a = repr(&[0.0], &[1.0]);
        let b = repr(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(mls(&a, &b), Err(PrclError::DimensionMismatch { .. })));
        assert!(mls_grad(&a, &b).is_err());
    }

    #[test]
    fn mls_rejects_non_finite() {
        assert!(mls_raw(&[f64::NAN], &[1.0], &[0.0], &[1.0]).is_err());
        assert!(ProbRepr::new(vec![f64::INFINITY], vec![1.0]).is_err());
    }

    #[test]
    fn construction_clamps_variance() {
        let before = clamped_variance_count();
        let r = repr(&[0.0, 0.0, 0.0], &[0.0, 1e12, 2.0]);
        assert_eq!(r.sigma2(), &[VARIANCE_FLOOR, VARIANCE_CEIL, 2.0]);
        assert!(clamped_variance_count() >= before + 2);
    }

    #[test]
    fn grad_zero_at_equal_means() {
        let a = repr(&[0.3, -1.0], &[0.5, 2.0]);
        let b = repr(&[0.3, -1.0], &[1.5, 0.1]);
        let g = mls_grad(&a, &b).unwrap();
        assert!(g.mu_a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fuse_equal_precision() {
        let f = fuse(&[repr(&[0.0], &[2.0]), repr(&[4.0], &[2.0])]).unwrap();
        assert_eq!(f.sigma2(), &[1.0]);
        assert_eq!(f.mu(), &[2.0]);
    }

    #[test]
    fn fuse_single_is_identity() {
        let r = repr(&[1.25, -3.0], &[0.7, 4.0]);
        assert_eq!(fuse(std::slice::from_ref(&r)).unwrap(), r);
    }

    #[test]
    fn fuse_unequal_precision() {
        // precision 1 + 1/3 = 4/3, mean (0 + 4/3) * 3/4 = 1
        let f = fuse(&[repr(&[0.0], &[1.0]), repr(&[4.0], &[3.0])]).unwrap();
        assert!(close(f.sigma2()[0], 0.75, 1e-15));
        assert!(close(f.mu()[0], 1.0, 1e-15));
    }

    #[test]
    fn fuse_empty_is_error() {
        assert!(fuse(&[]).is_err());
    }

    fn arb_reprs(d: usize) -> impl Strategy<Value = Vec<ProbRepr>> {
        prop::collection::vec(
            (
                prop::collection::vec(-10.0..10.0f64, d),
                prop::collection::vec(0.01..10.0f64, d),
            ),
            1..12,
        )
        .prop_map(|v| v.into_iter().map(|(m, s)| ProbRepr::new(m, s).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn mls_is_symmetric(v in arb_reprs(5)) {
            let a = &v[0];
            let b = v.last().unwrap();
            prop_assert_eq!(mls(a, b).unwrap(), mls(b, a).unwrap());
        }

        #[test]
        fn mls_grad_means_antisymmetric(v in arb_reprs(4)) {
            let g = mls_grad(&v[0], v.last().unwrap()).unwrap();
            for (x, y) in g.mu_a.iter().zip(&g.mu_b) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn mls_grad_matches_finite_differences(v in arb_reprs(4)) {
            let a = &v[0];
            let b = v.last().unwrap();
            let g = mls_grad(a, b).unwrap();
            let h = 1e-5;
            let f = |am: &[f64], as2: &[f64], bm: &[f64], bs2: &[f64]| mls_raw(am, as2, bm, bs2).unwrap();
            for i in 0..a.dim() {
                let fd = |which: usize| {
                    let mut p = [a.mu().to_vec(), a.sigma2().to_vec(), b.mu().to_vec(), b.sigma2().to_vec()];
                    let x0 = p[which][i];
                    p[which][i] = x0 + h;
                    let up = f(&p[0], &p[1], &p[2], &p[3]);
                    p[which][i] = x0 - h;
                    let dn = f(&p[0], &p[1], &p[2], &p[3]);
                    (up - dn) / (2.0 * h)
                };
                let analytic = [g.mu_a[i], g.sigma2_a[i], g.mu_b[i], g.sigma2_b[i]];
                for (which, an) in analytic.iter().enumerate() {
                    let num = fd(which);
                    prop_assert!((an - num).abs() <= 1e-6 * an.abs().max(1.0), "{which}:{i} {an} vs {num}");
                }
            }
        }

        #[test]
        fn fusion_precision_is_additive(v in arb_reprs(3)) {
            let f = fuse(&v).unwrap();
            for d in 0..3 {
                let p: f64 = v.iter().map(|r| 1.0 / r.sigma2()[d]).sum();
                prop_assert!(close(1.0 / f.sigma2()[d], p, 1e-12));
            }
        }

        #[test]
        fn fused_mean_is_convex(v in arb_reprs(3)) {
            let f = fuse(&v).unwrap();
            for d in 0..3 {
                let lo = v.iter().map(|r| r.mu()[d]).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|r| r.mu()[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f.mu()[d] >= lo - 1e-12 && f.mu()[d] <= hi + 1e-12);
            }
        }

        #[test]
        fn fusion_is_associative(v in arb_reprs(3), w in arb_reprs(3)) {
            let nested = fuse(&[fuse(&v).unwrap(), fuse(&w).unwrap()]).unwrap();
            let all: Vec<ProbRepr> = v.iter().chain(w.iter()).cloned().collect();
            let flat = fuse(&all).unwrap();
            for d in 0..3 {
                prop_assert!(close(nested.mu()[d], flat.mu()[d], 1e-10) || (nested.mu()[d] - flat.mu()[d]).abs() < 1e-10);
                prop_assert!(close(nested.sigma2()[d], flat.sigma2()[d], 1e-10));
            }
        }

        #[test]
        fn fusion_is_permutation_invariant(v in arb_reprs(3), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(fuse(&v).unwrap(), fuse(&shuffled).unwrap());
        }

        #[test]
        fn mls_decreases_with_variance_at_zero_distance(
            mu in prop::collection::vec(-5.0..5.0f64, 3),
            s2 in prop::collection::vec(0.01..5.0f64, 3),
            dim in 0usize..3,
            bump in 0.01..5.0f64,
        ) {
            let a = ProbRepr::new(mu.clone(), s2.clone()).unwrap();
            let mut s2b = s2.clone();
            s2b[dim] += bump;
            let b = ProbRepr::new(mu.clone(), s2b).unwrap();
            let base = mls(&a, &a).unwrap();
            let wider = mls(&b, &a).unwrap();
            prop_assert!(wider < base);
        }
    }
}
