//! Training losses: supervised and confidence-weighted cross-entropy, the
//! prototype contrastive loss over mutual likelihood scores, the contrastive
//! weight schedule, and the hyperparameters that drive all of them.

use crate::error::{PrclError, Result};
use crate::negatives::{SampleSet, VnScale};
use crate::prototypes::PrototypeBank;

/// Scalars that control sampling and the loss stack.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Contrastive temperature.
    pub tau: f64,
    /// Strong threshold: anchors have confidence below it.
    pub delta_s: f64,
    /// Weak threshold: valid representations have confidence above it.
    pub delta_w: f64,
    /// Confidence threshold counted by the unsupervised loss weight.
    pub delta_u: f64,
    /// Virtual radius.
    pub beta: f64,
    pub lambda_c0: f64,
    pub alpha_sched: f64,
    pub vn_count: usize,
    pub vn_scale: VnScale,
    pub anchors_per_class: usize,
    pub negatives_total: usize,
    pub teacher_momentum: f64,
    pub ema_proto_momentum: f64,
    pub lr_main: f64,
    pub lr_prob_head: f64,
    pub temperature_n: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.5,
            delta_s: 0.8,
            delta_w: 0.7,
            delta_u: 0.8,
            beta: 1.0,
            lambda_c0: 0.1,
            alpha_sched: std::f64::consts::LN_10,
            vn_count: 4,
            vn_scale: VnScale::Variance,
            anchors_per_class: 32,
            negatives_total: 64,
            teacher_momentum: 0.99,
            ema_proto_momentum: 0.99,
            lr_main: 6.4e-3,
            lr_prob_head: 5e-5,
            temperature_n: 1.0,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Checks every range constraint. The error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(PrclError::Config {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        for (key, v) in [
            ("delta_s", self.delta_s),
            ("delta_w", self.delta_w),
            ("delta_u", self.delta_u),
            ("teacher_momentum", self.teacher_momentum),
            ("ema_proto_momentum", self.ema_proto_momentum),
        ] {
            if !unit(v) {
                return bad(key, "must lie in [0, 1]");
            }
        }
        if self.delta_w > self.delta_s {
            return bad("delta_w", "must not exceed delta_s");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be nonnegative");
        }
        if !(self.lambda_c0 >= 0.0 && self.lambda_c0.is_finite()) {
            return bad("lambda_c0", "must be nonnegative");
        }
        if !self.alpha_sched.is_finite() {
            return bad("alpha_sched", "must be finite");
        }
        for (key, v) in [("lr_main", self.lr_main), ("lr_prob_head", self.lr_prob_head), ("temperature_n", self.temperature_n)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be positive");
            }
        }
        Ok(())
    }
}

/// `lambda_c0 · exp(alpha · (t / t_total)²)`.
pub fn lambda_schedule(t: f64, t_total: f64, lambda_c0: f64, alpha_sched: f64) -> Result<f64> {
    if t_total <= 0.0 {
        return Err(PrclError::contract("schedule length must be positive"));
    }
    if !(0.0..=t_total).contains(&t) {
        return Err(PrclError::contract(format!("schedule position {t} outside [0, {t_total}]")));
    }
    let r = t / t_total;
    Ok(lambda_c0 * (alpha_sched * r * r).exp())
}

/// A scalar loss with its gradient with respect to the logits (row-major,
/// one row of `num_classes` per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Fraction of confident pixels; 1 for the supervised loss.
    pub omega: f64,
}

fn mean_ce(logits: &[f64], num_classes: usize, labels: &[usize], scale: f64) -> Result<(f64, Vec<f64>)> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes {
        return Err(PrclError::DimensionMismatch {
            expected: labels.len() * num_classes,
            got: logits.len(),
        });
    }
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(PrclError::contract(format!("label {y} out of range")));
        }
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[y];
        let g = &mut grad[i * num_classes..(i + 1) * num_classes];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *gk = scale * (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((scale * total / n as f64, grad))
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn supervised_ce(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<CeOutput> {
    let (loss, grad) = mean_ce(logits, num_classes, labels, 1.0)?;
    Ok(CeOutput { loss, grad, omega: 1.0 })
}

/// Cross-entropy against pseudo-labels, scaled by the fraction of pixels
/// whose confidence exceeds `delta_u`.
pub fn unsupervised_weighted_ce(
    logits: &[f64],
    num_classes: usize,
    pseudo_labels: &[usize],
    confidences: &[f64],
    delta_u: f64,
) -> Result<CeOutput> {
    if confidences.len() != pseudo_labels.len() {
        return Err(PrclError::DimensionMismatch {
            expected: pseudo_labels.len(),
            got: confidences.len(),
        });
    }
    let n = pseudo_labels.len();
    let confident = confidences.iter().filter(|&&c| c > delta_u).count();
    let omega = if n == 0 { 0.0 } else { confident as f64 / n as f64 };
    let (loss, grad) = mean_ce(logits, num_classes, pseudo_labels, omega)?;
    Ok(CeOutput { loss, grad, omega })
}

/// One anchor's InfoNCE term, `-log(e^{pos/τ} / (e^{pos/τ} + Σ e^{neg/τ}))`.
pub fn info_nce_term(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let pos = positive / tau;
    let max = negatives.iter().map(|s| s / tau).fold(pos, f64::max);
    let z: f64 = (pos - max).exp() + negatives.iter().map(|s| (s / tau - max).exp()).sum::<f64>();
    max + z.ln() - pos
}

/// Gradient for one anchor pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub pixel: usize,
    pub grad_mu: Vec<f64>,
    pub grad_sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub anchor_grads: Vec<AnchorGrad>,
    /// Classes dropped because the bank had no prototype for them.
    pub skipped_classes: Vec<usize>,
}

/// InfoNCE over mutual likelihood scores with the class prototype as the
/// positive and real plus virtual negatives in the denominator.
///
/// The loss is a per-class mean over anchors, then a mean over classes.
/// Prototypes and negatives are constants; gradients reach anchors only.
pub fn contrastive_loss(samples: &SampleSet, bank: &PrototypeBank, hp: &HyperParams) -> Result<ContrastiveOutput> {
    let tau = hp.tau;
    let mut out = ContrastiveOutput::default();
    let live: Vec<_> = samples
        .groups
        .iter()
        .filter(|g| !g.anchors.is_empty())
        .filter(|g| {
            let ok = bank.get(g.class).is_some();
            if !ok {
                out.skipped_classes.push(g.class);
            }
            ok
        })
        .collect();
    if live.is_empty() {
        return Ok(out);
    }
    let class_weight = 1.0 / live.len() as f64;

    let mut scores = Vec::new();
    // per target: 1/(σ²_a + σ²_t) and μ_a - μ_t, reused by the gradient pass
    let mut inv = Vec::new();
    let mut diff = Vec::new();
    for group in live {
        let proto = bank.get(group.class).expect("filtered");
        let weight = class_weight / group.anchors.len() as f64;
        // (mu, sigma2) of every target; the positive comes first
        let mut targets: Vec<(&[f64], &[f64])> = Vec::with_capacity(1 + group.real_negatives.len() + group.virtual_negatives.len());
        targets.push((&proto.mu_hat, &proto.sigma2_hat));
        targets.extend(group.real_negatives.iter().map(|n| (n.repr.mu(), n.repr.sigma2())));
        targets.extend(group.virtual_negatives.iter().map(|v| (v.value.as_slice(), v.sigma2.as_slice())));

        for anchor in &group.anchors {
            let (a_mu, a_s2) = (anchor.repr.mu(), anchor.repr.sigma2());
            let d = a_mu.len();
            scores.clear();
            inv.clear();
            diff.clear();
            for (t_mu, t_s2) in &targets {
                scores.push(pair_score(a_mu, a_s2, t_mu, t_s2, &mut inv, &mut diff)? / tau);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let lse = max + z.ln();
            out.loss += weight * (lse - scores[0]);

            let mut grad_mu = vec![0.0; d];
            let mut grad_sigma2 = vec![0.0; d];
            for j in 0..targets.len() {
                let p = (scores[j] - lse).exp();
                let coeff = weight * (p - if j == 0 { 1.0 } else { 0.0 }) / tau;
                if coeff == 0.0 {
                    continue;
                }
                let (inv_j, diff_j) = (&inv[j * d..(j + 1) * d], &diff[j * d..(j + 1) * d]);
                for k in 0..d {
                    let r = diff_j[k] * inv_j[k];
                    grad_mu[k] -= coeff * r;
                    grad_sigma2[k] += coeff * 0.5 * (r * r - inv_j[k]);
                }
            }
            out.anchor_grads.push(AnchorGrad {
                pixel: anchor.pixel,
                grad_mu,
                grad_sigma2,
            });
        }
    }
    Ok(out)
}

/// MLS of one pair, appending the per-dimension inverse variance sums and
/// mean differences to the scratch buffers. The log term is taken of the
/// product of variance sums in blocks of eight dimensions, which keeps the
/// product finite for any clamped variances.
fn pair_score(a_mu: &[f64], a_s2: &[f64], t_mu: &[f64], t_s2: &[f64], inv: &mut Vec<f64>, diff: &mut Vec<f64>) -> Result<f64> {
    if t_mu.len() != a_mu.len() {
        return Err(PrclError::DimensionMismatch { expected: a_mu.len(), got: t_mu.len() });
    }
    let mut quad = 0.0;
    let mut log_det = 0.0;
    let mut prod = 1.0;
    for k in 0..a_mu.len() {
        if k % 8 == 0 && k > 0 {
            log_det += f64::ln(prod);
            prod = 1.0;
        }
        let s = a_s2[k] + t_s2[k];
        let dk = a_mu[k] - t_mu[k];
        let i = 1.0 / s;
        quad += dk * dk * i;
        prod *= s;
        inv.push(i);
        diff.push(dk);
    }
    let score = -0.5 * (quad + log_det + prod.ln()) - 0.5 * a_mu.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    if !score.is_finite() {
        return Err(PrclError::NonFinite("mutual likelihood score"));
    }
    Ok(score)
}

/// `ls + lu + lambda_t · lc`.
pub fn total_loss(ls: f64, lu: f64, lc: f64, lambda_t: f64) -> f64 {
    ls + lu + lambda_t * lc
}
