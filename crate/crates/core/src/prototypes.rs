//! Class prototypes: per-iteration local prototypes, the streaming global
//! distribution prototype (GDP), and the EMA-of-means baseline.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{PrclError, Result};
use crate::prob_embed::{fuse, ProbRepr};

static SKIPPED_UPDATES: AtomicU64 = AtomicU64::new(0);

/// Number of GDP updates dropped because they would have produced
/// non-finite state.
pub fn skipped_update_count() -> u64 {
    SKIPPED_UPDATES.load(Ordering::Relaxed)
}

/// Streaming Gaussian posterior over a class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrototype {
    pub class_id: usize,
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
    pub n_updates: u64,
}

impl GlobalPrototype {
    /// A prototype that has absorbed nothing yet (infinite prior variance).
    pub fn empty(class_id: usize, dim: usize) -> Self {
        GlobalPrototype {
            class_id,
            mu_hat: vec![0.0; dim],
            sigma2_hat: vec![f64::INFINITY; dim],
            n_updates: 0,
        }
    }

    pub fn initialized(&self) -> bool {
        self.n_updates > 0
    }

    pub fn dim(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn as_repr(&self) -> Result<ProbRepr> {
        if !self.initialized() {
            return Err(PrclError::contract(format!(
                "prototype for class {} is uninitialized",
                self.class_id
            )));
        }
        ProbRepr::new(self.mu_hat.clone(), self.sigma2_hat.clone())
    }
}

/// Local prototype of one class in the current iteration.
pub fn local_prototype(reps_of_class: &[ProbRepr]) -> Result<ProbRepr> {
    fuse(reps_of_class)
}

/// Absorbs one local prototype into the running posterior.
///
/// The first update copies `local` exactly. Later updates add precisions and
/// precision-weighted means.
pub fn gdp_update(prev: &GlobalPrototype, local: &ProbRepr) -> Result<GlobalPrototype> {
    if prev.dim() != local.dim() {
        return Err(PrclError::DimensionMismatch {
            expected: prev.dim(),
            got: local.dim(),
        });
    }
    if !prev.initialized() {
        return Ok(GlobalPrototype {
            class_id: prev.class_id,
            mu_hat: local.mu().to_vec(),
            sigma2_hat: local.sigma2().to_vec(),
            n_updates: 1,
        });
    }
    let mut mu_hat = Vec::with_capacity(prev.dim());
    let mut sigma2_hat = Vec::with_capacity(prev.dim());
    for d in 0..prev.dim() {
        let p_prev = 1.0 / prev.sigma2_hat[d];
        let p_loc = 1.0 / local.sigma2()[d];
        let s2 = 1.0 / (p_prev + p_loc);
        mu_hat.push(s2 * (prev.mu_hat[d] * p_prev + local.mu()[d] * p_loc));
        sigma2_hat.push(s2);
    }
    if mu_hat.iter().chain(&sigma2_hat).any(|v| !v.is_finite()) {
        SKIPPED_UPDATES.fetch_add(1, Ordering::Relaxed);
        return Ok(prev.clone());
    }
    Ok(GlobalPrototype {
        class_id: prev.class_id,
        mu_hat,
        sigma2_hat,
        n_updates: prev.n_updates + 1,
    })
}

/// Closed-form posterior over every representation ever observed, with an
/// uninformative prior. Kept separate from [`fuse`] on purpose: it is the
/// reference that the streaming update is checked against.
pub fn gdp_batch_oracle(all_reps: &[ProbRepr]) -> Result<ProbRepr> {
    if all_reps.is_empty() {
        return Err(PrclError::contract("batch oracle needs at least one representation"));
    }
    let d = all_reps[0].dim();
    let mut mu = Vec::with_capacity(d);
    let mut sigma2 = Vec::with_capacity(d);
    for k in 0..d {
        let mut precision = 0.0;
        for r in all_reps {
            if r.dim() != d {
                return Err(PrclError::DimensionMismatch { expected: d, got: r.dim() });
            }
            precision += 1.0 / r.sigma2()[k];
        }
        let var = 1.0 / precision;
        let mut mean = 0.0;
        for r in all_reps {
            mean += var / r.sigma2()[k] * r.mu()[k];
        }
        mu.push(mean);
        sigma2.push(var);
    }
    ProbRepr::new(mu, sigma2)
}

/// `momentum * prev + (1 - momentum) * local`, elementwise.
pub fn ema_prototype_update(prev: &[f64], local: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(PrclError::contract(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if prev.len() != local.len() {
        return Err(PrclError::DimensionMismatch {
            expected: prev.len(),
            got: local.len(),
        });
    }
    Ok(prev
        .iter()
        .zip(local)
        .map(|(p, l)| momentum * p + (1.0 - momentum) * l)
        .collect())
}

/// How prototypes carry over between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeStrategy {
    /// Each iteration uses only its own local prototype.
    None,
    /// Means follow an exponential moving average.
    Ema,
    /// Streaming Bayesian posterior.
    Gdp,
}

impl PrototypeStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeStrategy::None => "none",
            PrototypeStrategy::Ema => "ema",
            PrototypeStrategy::Gdp => "gdp",
        }
    }
}

/// One prototype slot per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    strategy: PrototypeStrategy,
    dim: usize,
    entries: Vec<Option<GlobalPrototype>>,
}

impl PrototypeBank {
    pub fn new(strategy: PrototypeStrategy, num_classes: usize, dim: usize) -> Self {
        PrototypeBank {
            strategy,
            dim,
            entries: vec![None; num_classes],
        }
    }

    pub fn strategy(&self) -> PrototypeStrategy {
        self.strategy
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The prototype for `class`, if one has been absorbed.
    pub fn get(&self, class: usize) -> Option<&GlobalPrototype> {
        self.entries
            .get(class)
            .and_then(|e| e.as_ref())
            .filter(|g| g.initialized())
    }

    pub fn initialized_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.entries.len()).filter(|&c| self.get(c).is_some())
    }

    /// Folds this iteration's local prototype for `class` into the bank.
    pub fn absorb(&mut self, class: usize, local: &ProbRepr, ema_momentum: f64) -> Result<()> {
        if class >= self.entries.len() {
            return Err(PrclError::contract(format!("class {class} out of range")));
        }
        if local.dim() != self.dim {
            return Err(PrclError::DimensionMismatch {
                expected: self.dim,
                got: local.dim(),
            });
        }
        let prev = self.entries[class]
            .take()
            .unwrap_or_else(|| GlobalPrototype::empty(class, self.dim));
        let next = match self.strategy {
            PrototypeStrategy::Gdp => gdp_update(&prev, local)?,
            PrototypeStrategy::None => GlobalPrototype {
                class_id: class,
                mu_hat: local.mu().to_vec(),
                sigma2_hat: local.sigma2().to_vec(),
                n_updates: prev.n_updates + 1,
            },
            PrototypeStrategy::Ema => {
                let mu_hat = if prev.initialized() {
                    ema_prototype_update(&prev.mu_hat, local.mu(), ema_momentum)?
                } else {
                    local.mu().to_vec()
                };
                GlobalPrototype {
                    class_id: class,
                    mu_hat,
                    sigma2_hat: local.sigma2().to_vec(),
                    n_updates: prev.n_updates + 1,
                }
            }
        };
        self.entries[class] = Some(next);
        Ok(())
    }

    /// Persistent bytes: `2·D` 64-bit reals plus one 64-bit counter per class.
    pub fn state_bytes(&self) -> usize {
        self.entries.len() * (2 * self.dim * 8 + 8)
    }

    /// Writes `(class_id, n_updates, mu_hat, sigma2_hat)` records, prefixed by
    /// the record count, all little-endian 64-bit.
    pub fn write_records<W: Write>(&self, w: &mut W) -> Result<()> {
        let live: Vec<&GlobalPrototype> = self.entries.iter().flatten().filter(|g| g.initialized()).collect();
        w.write_all(&(live.len() as u64).to_le_bytes())?;
        for g in live {
            w.write_all(&(g.class_id as u64).to_le_bytes())?;
            w.write_all(&g.n_updates.to_le_bytes())?;
            for v in g.mu_hat.iter().chain(&g.sigma2_hat) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_records<R: Read>(
        r: &mut R,
        strategy: PrototypeStrategy,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let mut bank = PrototypeBank::new(strategy, num_classes, dim);
        let count = read_u64(r)?;
        if count > num_classes as u64 {
            return Err(PrclError::Incompatible(format!(
                "{count} prototype records for {num_classes} classes"
            )));
        }
        for _ in 0..count {
            let class_id = read_u64(r)? as usize;
            let n_updates = read_u64(r)?;
            if class_id >= num_classes || bank.entries[class_id].is_some() {
                return Err(PrclError::Incompatible(format!("bad prototype record for class {class_id}")));
            }
            let mut vals = Vec::with_capacity(2 * dim);
            for _ in 0..2 * dim {
                vals.push(f64::from_le_bytes(read_array(r)?));
            }
            let sigma2_hat = vals.split_off(dim);
            bank.entries[class_id] = Some(GlobalPrototype {
                class_id,
                mu_hat: vals,
                sigma2_hat,
                n_updates,
            });
        }
        Ok(bank)
    }
}

fn read_array<R: Read>(r: &mut R) -> Result<[u8; 8]> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

/// Euclidean displacement of each class mean between two banks. `None` when
/// either bank lacks the class.
pub fn prototype_shift(before: &PrototypeBank, after: &PrototypeBank) -> Vec<Option<f64>> {
    let n = before.num_classes().max(after.num_classes());
    (0..n)
        .map(|c| {
            let (a, b) = (before.get(c)?, after.get(c)?);
            Some(
                a.mu_hat
                    .iter()
                    .zip(&b.mu_hat)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn repr(mu: &[f64], s2: &[f64]) -> ProbRepr {
        ProbRepr::new(mu.to_vec(), s2.to_vec()).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    fn random_reprs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<ProbRepr> {
        (0..n)
            .map(|_| {
                let mu = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
                let s2 = (0..d).map(|_| rng.random_range(0.05..5.0)).collect();
                ProbRepr::new(mu, s2).unwrap()
            })
            .collect()
    }

    #[test]
    fn local_prototype_cases() {
        let r = repr(&[1.0, 2.0], &[0.5, 0.5]);
        assert_eq!(local_prototype(std::slice::from_ref(&r)).unwrap(), r);

        let p = local_prototype(&[repr(&[0.0], &[2.0]), repr(&[1.0], &[2.0])]).unwrap();
        assert_eq!(p.mu(), &[0.5]);
        assert_eq!(p.sigma2(), &[1.0]);

        // precisions 1 + 1/2 + 1/4 = 7/4; mean = (1·1 + 2/2 + 4/4)·4/7 = 12/7
        let p = local_prototype(&[repr(&[1.0], &[1.0]), repr(&[2.0], &[2.0]), repr(&[4.0], &[4.0])]).unwrap();
        assert!(rel_close(p.sigma2()[0], 4.0 / 7.0, 1e-14));
        assert!(rel_close(p.mu()[0], 12.0 / 7.0, 1e-14));

        assert!(local_prototype(&[]).is_err());
    }

    #[test]
    fn gdp_update_examples() {
        let prev = gdp_update(&GlobalPrototype::empty(0, 1), &repr(&[0.0], &[1.0])).unwrap();
        let next = gdp_update(&prev, &repr(&[2.0], &[1.0])).unwrap();
        assert_eq!(next.mu_hat, vec![1.0]);
        assert_eq!(next.sigma2_hat, vec![0.5]);
        assert_eq!(next.n_updates, 2);

        let g = gdp_update(&GlobalPrototype::empty(3, 1), &repr(&[3.0], &[0.2])).unwrap();
        assert_eq!(g.mu_hat, vec![3.0]);
        assert_eq!(g.sigma2_hat, vec![0.2]);
        assert!(g.initialized());
        assert_eq!(g.class_id, 3);
    }

    #[test]
    fn gdp_stream_of_fifty_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reps = random_reprs(&mut rng, 50, 6);
        let mut g = GlobalPrototype::empty(0, 6);
        for r in &reps {
            g = gdp_update(&g, r).unwrap();
        }
        let o = gdp_batch_oracle(&reps).unwrap();
        for d in 0..6 {
            assert!(rel_close(g.mu_hat[d], o.mu()[d], 1e-10));
            assert!(rel_close(g.sigma2_hat[d], o.sigma2()[d], 1e-10));
        }
    }

    #[test]
    fn oracle_identities() {
        let r = repr(&[1.0, -2.0], &[0.3, 3.0]);
        assert_eq!(gdp_batch_oracle(std::slice::from_ref(&r)).unwrap().mu(), r.mu());
        let o = gdp_batch_oracle(&[repr(&[1.0], &[2.0]), repr(&[2.0], &[2.0]), repr(&[6.0], &[2.0])]).unwrap();
        assert!(rel_close(o.mu()[0], 3.0, 1e-15));
        assert!(gdp_batch_oracle(&[]).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_prototype_update(&[2.0], &[5.0], 1.0).unwrap(), vec![2.0]);
        assert_eq!(ema_prototype_update(&[2.0], &[5.0], 0.0).unwrap(), vec![5.0]);
        let v = ema_prototype_update(&[0.0], &[1.0], 0.99).unwrap();
        assert!((v[0] - 0.01).abs() < 1e-15);
        assert!(ema_prototype_update(&[0.0], &[1.0], 1.5).is_err());
        assert!(ema_prototype_update(&[0.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn shift_examples() {
        let mut a = PrototypeBank::new(PrototypeStrategy::None, 2, 2);
        a.absorb(0, &repr(&[0.0, 0.0], &[1.0, 1.0]), 0.0).unwrap();
        let same = prototype_shift(&a, &a);
        assert_eq!(same, vec![Some(0.0), None]);
        let mut b = a.clone();
        b.absorb(0, &repr(&[3.0, 4.0], &[1.0, 1.0]), 0.0).unwrap();
        assert_eq!(prototype_shift(&a, &b)[0], Some(5.0));
    }

    #[test]
    fn records_round_trip() {
        let mut bank = PrototypeBank::new(PrototypeStrategy::Gdp, 3, 2);
        bank.absorb(2, &repr(&[1.0, 2.0], &[0.5, 0.25]), 0.0).unwrap();
        bank.absorb(2, &repr(&[3.0, 2.0], &[0.5, 0.25]), 0.0).unwrap();
        let mut buf = Vec::new();
        bank.write_records(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 8 + 4 * 8);
        let back = PrototypeBank::read_records(&mut buf.as_slice(), PrototypeStrategy::Gdp, 3, 2).unwrap();
        assert_eq!(back, bank);
        assert!(PrototypeBank::read_records(&mut &buf[..20], PrototypeStrategy::Gdp, 3, 2).is_err());
    }

    #[test]
    fn state_bytes_formula() {
        let bank = PrototypeBank::new(PrototypeStrategy::Gdp, 6, 16);
        assert_eq!(bank.state_bytes(), 16 * 6 * 16 + 8 * 6);
    }

    proptest! {
        #[test]
        fn gdp_variance_never_grows(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = GlobalPrototype::empty(0, 3);
            for r in random_reprs(&mut rng, n, 3) {
                let next = gdp_update(&g, &r).unwrap();
                if g.initialized() {
                    for d in 0..3 {
                        prop_assert!(next.sigma2_hat[d] <= g.sigma2_hat[d]);
                    }
                }
                g = next;
            }
        }

        #[test]
        fn first_update_is_exact_copy(mu in prop::collection::vec(-9.0..9.0f64, 4), s2 in prop::collection::vec(0.001..9.0f64, 4)) {
            let r = ProbRepr::new(mu, s2).unwrap();
            let g = gdp_update(&GlobalPrototype::empty(0, 4), &r).unwrap();
            prop_assert_eq!(&g.mu_hat[..], r.mu());
            prop_assert_eq!(&g.sigma2_hat[..], r.sigma2());
        }

        #[test]
        fn chunked_stream_equals_batch(seed in any::<u64>(), n in 1usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps = random_reprs(&mut rng, n, 4);
            let mut g = GlobalPrototype::empty(0, 4);
            let mut start = 0;
            while start < n {
                let len = rng.random_range(1..=(n - start).min(17));
                let local = local_prototype(&reps[start..start + len]).unwrap();
                g = gdp_update(&g, &local).unwrap();
                start += len;
            }
            let o = gdp_batch_oracle(&reps).unwrap();
            for d in 0..4 {
                prop_assert!(rel_close(g.mu_hat[d], o.mu()[d], 1e-9) || (g.mu_hat[d] - o.mu()[d]).abs() < 1e-12);
                prop_assert!(rel_close(g.sigma2_hat[d], o.sigma2()[d], 1e-9));
            }
        }

        #[test]
        fn ema_and_gdp_converge_on_constant_input(mu in prop::collection::vec(-5.0..5.0f64, 3)) {
            let target = ProbRepr::isotropic(mu.clone(), 0.5).unwrap();
            let mut ema = PrototypeBank::new(PrototypeStrategy::Ema, 1, 3);
            let mut gdp = PrototypeBank::new(PrototypeStrategy::Gdp, 1, 3);
            ema.absorb(0, &ProbRepr::isotropic(vec![0.0; 3], 0.5).unwrap(), 0.8).unwrap();
            gdp.absorb(0, &ProbRepr::isotropic(vec![0.0; 3], 1e6).unwrap(), 0.8).unwrap();
            for _ in 0..100 {
                ema.absorb(0, &target, 0.8).unwrap();
                gdp.absorb(0, &target, 0.8).unwrap();
            }
            for d in 0..3 {
                prop_assert!((ema.get(0).unwrap().mu_hat[d] - mu[d]).abs() < 1e-6);
                prop_assert!((gdp.get(0).unwrap().mu_hat[d] - mu[d]).abs() < 1e-6);
            }
        }
    }
}
