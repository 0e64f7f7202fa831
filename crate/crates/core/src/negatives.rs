//! Representation sampling and negative generation for the contrastive term.
//!
//! Valid representations pass a weak confidence threshold; anchors are the
//! valid ones still below the strong threshold. Real negatives are drawn
//! from other classes with probability following prototype similarity, and
//! virtual negatives are synthesized from prototypes directly.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PrclError, Result};
use crate::prob_embed::{mls_raw, ProbRepr};
use crate::prototypes::{GlobalPrototype, PrototypeBank};

/// Redraws allowed when a sampled negative class has nothing to offer.
pub const MAX_REDRAWS: usize = 8;

static SKIPPED_NEGATIVE_DRAWS: AtomicU64 = AtomicU64::new(0);

pub fn skipped_negative_draws() -> u64 {
    SKIPPED_NEGATIVE_DRAWS.load(Ordering::Relaxed)
}

/// A pixel representation with its class assignment and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub repr: ProbRepr,
    pub class: usize,
    pub confidence: f64,
    /// Position in the batch the representation came from.
    pub pixel: usize,
}

/// A synthetic negative with zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualNegative {
    pub class_id: usize,
    pub value: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Noise scale used for virtual negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VnScale {
    /// `mu + beta * eps * sigma2`, literally.
    #[default]
    Variance,
    /// `mu + beta * eps * sqrt(sigma2)`, the usual reparameterization.
    StdDev,
}

/// Everything the contrastive loss needs for one anchor class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorGroup {
    pub class: usize,
    pub anchors: Vec<Candidate>,
    pub real_negatives: Vec<Candidate>,
    pub virtual_negatives: Vec<VirtualNegative>,
}

/// Per-iteration contrastive samples, one group per anchor class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub groups: Vec<AnchorGroup>,
}

impl SampleSet {
    pub fn anchor_count(&self) -> usize {
        self.groups.iter().map(|g| g.anchors.len()).sum()
    }
}

/// Keeps representations with confidence strictly above `delta_w`.
pub fn filter_valid(reps: &[Candidate], delta_w: f64) -> Vec<Candidate> {
    reps.iter().filter(|c| c.confidence > delta_w).cloned().collect()
}

/// Uniformly picks up to `k` of the representations with confidence below
/// `delta_s`.
pub fn sample_anchors<R: Rng + ?Sized>(valid: &[Candidate], delta_s: f64, k: usize, rng: &mut R) -> Vec<Candidate> {
    let pool: Vec<&Candidate> = valid.iter().filter(|c| c.confidence < delta_s).collect();
    if pool.len() <= k {
        return pool.into_iter().cloned().collect();
    }
    rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Softmax over `mls(anchor prototype, other prototype) / temperature_n`
/// for every initialized class other than `anchor_class`.
pub fn negative_class_distribution(
    anchor_class: usize,
    bank: &PrototypeBank,
    temperature_n: f64,
) -> Result<Vec<(usize, f64)>> {
    if temperature_n <= 0.0 {
        return Err(PrclError::contract("negative sampling temperature must be positive"));
    }
    let anchor = bank
        .get(anchor_class)
        .ok_or_else(|| PrclError::contract(format!("anchor class {anchor_class} has no prototype")))?;
    let mut scores = Vec::new();
    for c in bank.initialized_classes().filter(|&c| c != anchor_class) {
        let g = bank.get(c).expect("initialized");
        let s = mls_raw(&anchor.mu_hat, &anchor.sigma2_hat, &g.mu_hat, &g.sigma2_hat)?;
        scores.push((c, s / temperature_n));
    }
    let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|(_, s)| (s - max).exp()).sum();
    Ok(scores.into_iter().map(|(c, s)| (c, (s - max).exp() / total)).collect())
}

/// Draws `k_total` class labels from `distribution`, then one representation
/// uniformly from that class's pool for each draw. Returned lists are indexed
/// by class.
pub fn sample_real_negatives<R: Rng + ?Sized>(
    valid_by_class: &[Vec<Candidate>],
    distribution: &[(usize, f64)],
    k_total: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Candidate>>> {
    let mut out = vec![Vec::new(); valid_by_class.len()];
    if k_total == 0 || distribution.is_empty() {
        return Ok(out);
    }
    let weights = WeightedIndex::new(distribution.iter().map(|(_, p)| *p))
        .map_err(|e| PrclError::contract(format!("bad negative distribution: {e}")))?;
    'draws: for _ in 0..k_total {
        for _ in 0..=MAX_REDRAWS {
            let class = distribution[weights.sample(rng)].0;
            if let Some(pick) = valid_by_class.get(class).and_then(|pool| pool.choose(rng)) {
                out[class].push(pick.clone());
                continue 'draws;
            }
        }
        SKIPPED_NEGATIVE_DRAWS.fetch_add(1, Ordering::Relaxed);
    }
    Ok(out)
}

/// Samples `count` virtual negatives around an initialized prototype.
pub fn generate_vn<R: Rng + ?Sized>(
    gdp: &GlobalPrototype,
    beta: f64,
    count: usize,
    scale: VnScale,
    rng: &mut R,
) -> Result<Vec<VirtualNegative>> {
    if !gdp.initialized() {
        return Err(PrclError::contract(format!(
            "cannot draw virtual negatives from uninitialized class {}",
            gdp.class_id
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(PrclError::contract("virtual radius must be finite and nonnegative"));
    }
    let spread: Vec<f64> = match scale {
        VnScale::Variance => gdp.sigma2_hat.iter().map(|s| beta * s).collect(),
        VnScale::StdDev => gdp.sigma2_hat.iter().map(|s| beta * s.sqrt()).collect(),
    };
    Ok((0..count)
        .map(|_| VirtualNegative {
            class_id: gdp.class_id,
            value: gdp
                .mu_hat
                .iter()
                .zip(&spread)
                .map(|(m, s)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + s * eps
                })
                .collect(),
            sigma2: vec![0.0; gdp.dim()],
        })
        .collect())
}

/// FIFO store of past representations, used only as a comparison baseline.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    next_seq: u64,
    len: usize,
    per_class: Vec<VecDeque<(u64, ProbRepr)>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, num_classes: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(PrclError::contract("memory bank capacity must be positive"));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            next_seq: 0,
            len: 0,
            per_class: vec![VecDeque::new(); num_classes],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.per_class.get(class).map_or(0, VecDeque::len)
    }

    /// Appends one entry, evicting the globally oldest when full.
    pub fn enqueue(&mut self, class: usize, repr: ProbRepr) -> Result<()> {
        if class >= self.per_class.len() {
            return Err(PrclError::contract(format!("class {class} out of range")));
        }
        if repr.dim() != self.dim {
            return Err(PrclError::DimensionMismatch { expected: self.dim, got: repr.dim() });
        }
        if self.len == self.capacity {
            let oldest = self
                .per_class
                .iter()
                .enumerate()
                .filter_map(|(c, q)| q.front().map(|(s, _)| (*s, c)))
                .min()
                .map(|(_, c)| c)
                .expect("full bank has entries");
            self.per_class[oldest].pop_front();
            self.len -= 1;
        }
        self.per_class[class].push_back((self.next_seq, repr));
        self.next_seq += 1;
        self.len += 1;
        Ok(())
    }

    /// Uniformly samples `k` stored entries (with replacement) from classes
    /// other than `exclude`.
    pub fn sample_excluding<R: Rng + ?Sized>(&self, exclude: usize, k: usize, rng: &mut R) -> Vec<(usize, ProbRepr)> {
        let total: usize = self
            .per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != exclude)
            .map(|(_, q)| q.len())
            .sum();
        if total == 0 {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                let mut idx = rng.random_range(0..total);
                for (c, q) in self.per_class.iter().enumerate() {
                    if c == exclude {
                        continue;
                    }
                    if idx < q.len() {
                        return (c, q[idx].1.clone());
                    }
                    idx -= q.len();
                }
                unreachable!("index within total")
            })
            .collect()
    }

    /// Bytes held by stored means and variances.
    pub fn state_bytes(&self) -> usize {
        self.len * 2 * self.dim * 8
    }
}
