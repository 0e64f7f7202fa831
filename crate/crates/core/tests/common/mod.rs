//! Helpers shared by integration test targets.
#![allow(dead_code)]

use prcl_core::negatives::{AnchorGroup, Candidate, SampleSet, VirtualNegative};
use prcl_core::network::{backward, forward, ModelParams, NetShape};
use prcl_core::objective::{contrastive_loss, supervised_ce, unsupervised_weighted_ce};
use prcl_core::{HyperParams, ProbRepr, PrototypeBank, PrototypeStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

struct Instance {
    pixels: Vec<f64>,
    labels: Vec<usize>,
    pseudo: Vec<usize>,
    conf: Vec<f64>,
    bank: PrototypeBank,
    negatives: Vec<Candidate>,
    vns: Vec<VirtualNegative>,
    lambda: f64,
}

pub fn random_repr(rng: &mut ChaCha8Rng, d: usize) -> ProbRepr {
    ProbRepr::new(
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
    )
    .unwrap()
}

fn instance(rng: &mut ChaCha8Rng, shape: NetShape, n: usize) -> Instance {
    let d = shape.embed;
    let mut bank = PrototypeBank::new(PrototypeStrategy::Gdp, shape.classes, d);
    for c in 0..shape.classes {
        bank.absorb(c, &random_repr(rng, d), 0.0).unwrap();
    }
    Instance {
        pixels: (0..n * shape.features).map(|_| rng.random_range(-1.5..1.5)).collect(),
        labels: (0..n).map(|_| rng.random_range(0..shape.classes)).collect(),
        pseudo: (0..n).map(|_| rng.random_range(0..shape.classes)).collect(),
        conf: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        bank,
        negatives: (0..3)
            .map(|k| Candidate { repr: random_repr(rng, d), class: k % shape.classes, confidence: 1.0, pixel: usize::MAX })
            .collect(),
        vns: (0..2)
            .map(|k| VirtualNegative {
                class_id: k,
                value: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                sigma2: vec![0.0; d],
            })
            .collect(),
        lambda: rng.random_range(0.1..1.0),
    }
}

// Supervised CE on the first half, weighted CE on the second half and the
// contrastive term with every pixel as an anchor of its label.
fn total(p: &ModelParams, inst: &Instance, want_grad: bool) -> (f64, Option<ModelParams>) {
    let shape = p.shape();
    let (c, d) = (shape.classes, shape.embed);
    let n = inst.labels.len();
    let half = n / 2;
    let out = forward(p, &inst.pixels).unwrap();
    let ls = supervised_ce(&out.logits[..half * c], c, &inst.labels[..half]).unwrap();
    let lu = unsupervised_weighted_ce(&out.logits[half * c..], c, &inst.pseudo[half..], &inst.conf[half..], 0.5).unwrap();
    let mut groups: Vec<AnchorGroup> = (0..c)
        .map(|k| AnchorGroup {
            class: k,
            anchors: Vec::new(),
            real_negatives: inst.negatives.iter().filter(|x| x.class != k).cloned().collect(),
            virtual_negatives: inst.vns.iter().filter(|v| v.class_id != k).cloned().collect(),
        })
        .collect();
    for i in 0..n {
        let repr = ProbRepr::new(out.mu[i * d..(i + 1) * d].to_vec(), out.sigma2[i * d..(i + 1) * d].to_vec()).unwrap();
        groups[inst.labels[i]].anchors.push(Candidate { repr, class: inst.labels[i], confidence: 1.0, pixel: i });
    }
    groups.retain(|g| !g.anchors.is_empty());
    let hp = HyperParams::default();
    let lc = contrastive_loss(&SampleSet { groups }, &inst.bank, &hp).unwrap();
    let loss = ls.loss + lu.loss + inst.lambda * lc.loss;
    if !want_grad {
        return (loss, None);
    }
    let mut gl = ls.grad;
    gl.extend_from_slice(&lu.grad);
    let mut gmu = vec![0.0; n * d];
    let mut gs2 = vec![0.0; n * d];
    for ag in &lc.anchor_grads {
        for k in 0..d {
            gmu[ag.pixel * d + k] += inst.lambda * ag.grad_mu[k];
            gs2[ag.pixel * d + k] += inst.lambda * ag.grad_sigma2[k];
        }
    }
    let grads = backward(p, &out.cache, &gl, &gmu, &gs2).unwrap();
    (loss, Some(grads))
}

/// Checks every parameter of a model against central differences of the
/// full loss. Returns the number of parameters checked.
pub fn check_network_gradients(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape { features: 3, hidden: 5, classes: 3, embed: 4 };
    let p = ModelParams::init(shape, &mut rng);
    let inst = instance(&mut rng, shape, 6);
    let grads = total(&p, &inst, true).1.unwrap().flat();
    let base = p.flat();
    let h = 1e-6;
    for (i, &g) in grads.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let mut pp = p.clone();
        pp.set_flat(&plus).unwrap();
        let mut pm = p.clone();
        pm.set_flat(&minus).unwrap();
        let fd = (total(&pp, &inst, false).0 - total(&pm, &inst, false).0) / (2.0 * h);
        if !close(g, fd, 1e-4, 1e-8) {
            return Err(format!("seed {seed} param {i}: analytic {g} vs numeric {fd}"));
        }
    }
    Ok(grads.len())
}

