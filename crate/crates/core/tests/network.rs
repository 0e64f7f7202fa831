mod common;

use prcl_core::network::{forward, ModelParams, NetShape};

fn sine_params(shape: NetShape) -> ModelParams {
    let mut p = ModelParams::zeros(shape);
    let vals: Vec<f64> = (0..p.num_params()).map(|i| 0.5 * (0.7 * i as f64 + 0.3).sin()).collect();
    p.set_flat(&vals).unwrap();
    p
}

#[test]
fn forward_matches_reference_values() {
    let shape = NetShape { features: 3, hidden: 4, classes: 3, embed: 2 };
    let p = sine_params(shape);
    assert_eq!(p.num_params(), 91);
    let x: Vec<f64> = (0..6).map(|i| (1.3 * i as f64).cos()).collect();
    let out = forward(&p, &x).unwrap();
    // computed by a direct scalar implementation outside this crate
    let logits = [
        -0.08599436125288407, 0.9309855931223816, 0.011195729090813011,
        0.18400373464059025, 0.6645116156955957, 0.24335310267404645,
    ];
    let mu = [-0.8513776433834517, 0.04509978916228058, -0.7687006799971745, -0.06846011477513192];
    let s2 = [0.9066809778845647, 1.222875395785521, 0.8914635734048402, 1.2530952421889603];
    for (a, b) in out.logits.iter().zip(&logits).chain(out.mu.iter().zip(&mu)).chain(out.sigma2.iter().zip(&s2)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn backward_matches_finite_differences_of_the_full_loss() {
    for seed in 0..5 {
        common::check_network_gradients(seed).unwrap();
    }
}
