//! A per-pixel network with a shared encoder and three heads: segmentation
//! logits, representation means, and representation variances.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{PrclError, Result};

/// Raw probability-head outputs are clamped to this range before `exp`.
pub const LOG_VARIANCE_CLAMP: f64 = 6.0;

/// Dense layer `y = W x + b` with `W` stored row-major (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/sqrt(in_dim)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Linear::zeros(in_dim, out_dim);
        for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
            *v = rng.random_range(-bound..=bound);
        }
        layer
    }

    /// `y = W x + b` for every row of `x` (`n × in_dim`, row-major). Works on
    /// a transposed copy of `W` so the inner loop runs over contiguous
    /// outputs.
    fn apply_rows(&self, x: &[f64], y: &mut [f64]) {
        let (din, dout) = (self.in_dim, self.out_dim);
        let mut wt = vec![0.0; din * dout];
        for j in 0..dout {
            for k in 0..din {
                wt[k * dout + j] = self.w[j * din + k];
            }
        }
        for (xi, yi) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
            yi.copy_from_slice(&self.b);
            for (k, &xk) in xi.iter().enumerate() {
                for (yj, &w) in yi.iter_mut().zip(&wt[k * dout..(k + 1) * dout]) {
                    *yj += xk * w;
                }
            }
        }
    }

    /// Accumulates parameter gradients for one sample and writes the input
    /// gradient into `gx` (added, not overwritten).
    #[inline]
    fn backprop(&self, x: &[f64], gy: &[f64], grad: &mut Linear, gx: &mut [f64]) {
        for (j, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[j] += g;
            let row = &self.w[j * self.in_dim..(j + 1) * self.in_dim];
            let grow = &mut grad.w[j * self.in_dim..(j + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub embed: usize,
}

/// Encoder `f`, segmentation head `g`, representation head `h`, probability
/// head `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Linear,
    pub seg_head: Linear,
    pub repr_hidden: Linear,
    pub repr_out: Linear,
    pub prob_hidden: Linear,
    pub prob_out: Linear,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let NetShape { features, hidden, classes, embed } = shape;
        ModelParams {
            encoder: Linear::init(features, hidden, rng),
            seg_head: Linear::init(hidden, classes, rng),
            repr_hidden: Linear::init(hidden, hidden, rng),
            repr_out: Linear::init(hidden, embed, rng),
            prob_hidden: Linear::init(hidden, hidden, rng),
            prob_out: Linear::init(hidden, embed, rng),
        }
    }

    pub fn zeros(shape: NetShape) -> Self {
        let NetShape { features, hidden, classes, embed } = shape;
        ModelParams {
            encoder: Linear::zeros(features, hidden),
            seg_head: Linear::zeros(hidden, classes),
            repr_hidden: Linear::zeros(hidden, hidden),
            repr_out: Linear::zeros(hidden, embed),
            prob_hidden: Linear::zeros(hidden, hidden),
            prob_out: Linear::zeros(hidden, embed),
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            features: self.encoder.in_dim,
            hidden: self.encoder.out_dim,
            classes: self.seg_head.out_dim,
            embed: self.repr_out.out_dim,
        }
    }

    /// Layers paired with whether they belong to the probability head.
    pub fn layers(&self) -> [(&Linear, bool); 6] {
        [
            (&self.encoder, false),
            (&self.seg_head, false),
            (&self.repr_hidden, false),
            (&self.repr_out, false),
            (&self.prob_hidden, true),
            (&self.prob_out, true),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&mut Linear, bool); 6] {
        [
            (&mut self.encoder, false),
            (&mut self.seg_head, false),
            (&mut self.repr_hidden, false),
            (&mut self.repr_out, false),
            (&mut self.prob_hidden, true),
            (&mut self.prob_out, true),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(l, _)| l.w.len() + l.b.len()).sum()
    }

    /// All parameters in a fixed order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers().iter().flat_map(|(l, _)| l.values().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(PrclError::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for (layer, _) in self.layers_mut() {
            for v in layer.values_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.layers().iter().flat_map(|(l, _)| l.values()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (layer, _) in self.layers_mut() {
            layer.values_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn write_le<W: Write>(&self, w: &mut W) -> Result<()> {
        for (layer, _) in self.layers() {
            for v in layer.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_le<R: Read>(r: &mut R, shape: NetShape) -> Result<Self> {
        let mut params = ModelParams::zeros(shape);
        let mut buf = [0u8; 8];
        for (layer, _) in params.layers_mut() {
            for v in layer.values_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(params)
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub n: usize,
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    repr_hidden: Vec<f64>,
    prob_hidden: Vec<f64>,
    prob_raw: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Per-pixel outputs, all row-major.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub cache: ForwardCache,
}

/// Maps raw probability-head output to a variance in `[e^-6, e^6]`.
pub fn variance_from_raw(raw: f64) -> f64 {
    raw.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP).exp()
}

/// Runs the student (or teacher) on `n` pixels of `F` features each.
pub fn forward(params: &ModelParams, pixels: &[f64]) -> Result<ForwardOutput> {
    let NetShape { features, hidden, classes, embed } = params.shape();
    if pixels.len() % features != 0 {
        return Err(PrclError::DimensionMismatch {
            expected: features,
            got: pixels.len() % features,
        });
    }
    let n = pixels.len() / features;
    let mut h = vec![0.0; n * hidden];
    let mut rh = vec![0.0; n * hidden];
    let mut ph = vec![0.0; n * hidden];
    let mut logits = vec![0.0; n * classes];
    let mut mu = vec![0.0; n * embed];
    let mut raw = vec![0.0; n * embed];
    params.encoder.apply_rows(pixels, &mut h);
    h.iter_mut().for_each(|v| *v = v.tanh());
    params.seg_head.apply_rows(&h, &mut logits);
    params.repr_hidden.apply_rows(&h, &mut rh);
    rh.iter_mut().for_each(|v| *v = v.max(0.0));
    params.repr_out.apply_rows(&rh, &mut mu);
    params.prob_hidden.apply_rows(&h, &mut ph);
    ph.iter_mut().for_each(|v| *v = v.max(0.0));
    params.prob_out.apply_rows(&ph, &mut raw);
    if logits.iter().chain(&mu).chain(&raw).any(|v| !v.is_finite()) {
        return Err(PrclError::Numeric("non-finite activation in forward pass".into()));
    }
    let sigma2: Vec<f64> = raw.iter().map(|&r| variance_from_raw(r)).collect();
    Ok(ForwardOutput {
        logits,
        mu,
        sigma2: sigma2.clone(),
        cache: ForwardCache {
            n,
            inputs: pixels.to_vec(),
            hidden: h,
            repr_hidden: rh,
            prob_hidden: ph,
            prob_raw: raw,
            sigma2,
        },
    })
}

/// Logits only, without caching. Used for teacher predictions and evaluation.
pub fn predict_logits(params: &ModelParams, pixels: &[f64]) -> Result<Vec<f64>> {
    let NetShape { features, hidden, classes, .. } = params.shape();
    let n = pixels.len() / features;
    let mut h = vec![0.0; n * hidden];
    let mut logits = vec![0.0; n * classes];
    params.encoder.apply_rows(&pixels[..n * features], &mut h);
    h.iter_mut().for_each(|v| *v = v.tanh());
    params.seg_head.apply_rows(&h, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PrclError::Numeric("non-finite logits".into()));
    }
    Ok(logits)
}

/// Exact gradients of a scalar loss given its gradients with respect to the
/// logits, means and variances produced by [`forward`].
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grad_mu: &[f64],
    grad_sigma2: &[f64],
) -> Result<ModelParams> {
    let shape = params.shape();
    let NetShape { features, hidden, classes, embed } = shape;
    let n = cache.n;
    for (got, want) in [
        (grad_logits.len(), n * classes),
        (grad_mu.len(), n * embed),
        (grad_sigma2.len(), n * embed),
    ] {
        if got != want {
            return Err(PrclError::DimensionMismatch { expected: want, got });
        }
    }
    let mut grads = ModelParams::zeros(shape);
    let mut gh = vec![0.0; hidden];
    let mut g_rh = vec![0.0; hidden];
    let mut g_ph = vec![0.0; hidden];
    let mut g_raw = vec![0.0; embed];
    let mut gx = vec![0.0; features];
    for i in 0..n {
        let x = &cache.inputs[i * features..(i + 1) * features];
        let h = &cache.hidden[i * hidden..(i + 1) * hidden];
        let rh = &cache.repr_hidden[i * hidden..(i + 1) * hidden];
        let ph = &cache.prob_hidden[i * hidden..(i + 1) * hidden];
        gh.iter_mut().for_each(|v| *v = 0.0);

        params
            .seg_head
            .backprop(h, &grad_logits[i * classes..(i + 1) * classes], &mut grads.seg_head, &mut gh);

        let gmu = &grad_mu[i * embed..(i + 1) * embed];
        if gmu.iter().any(|&g| g != 0.0) {
            g_rh.iter_mut().for_each(|v| *v = 0.0);
            params.repr_out.backprop(rh, gmu, &mut grads.repr_out, &mut g_rh);
            for (g, &a) in g_rh.iter_mut().zip(rh) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            params.repr_hidden.backprop(h, &g_rh, &mut grads.repr_hidden, &mut gh);
        }

        let gs2 = &grad_sigma2[i * embed..(i + 1) * embed];
        if gs2.iter().any(|&g| g != 0.0) {
            for k in 0..embed {
                let raw = cache.prob_raw[i * embed + k];
                g_raw[k] = if raw.abs() < LOG_VARIANCE_CLAMP {
                    gs2[k] * cache.sigma2[i * embed + k]
                } else {
                    0.0
                };
            }
            g_ph.iter_mut().for_each(|v| *v = 0.0);
            params.prob_out.backprop(ph, &g_raw, &mut grads.prob_out, &mut g_ph);
            for (g, &a) in g_ph.iter_mut().zip(ph) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            params.prob_hidden.backprop(h, &g_ph, &mut grads.prob_hidden, &mut gh);
        }

        for (g, &a) in gh.iter_mut().zip(h) {
            *g *= 1.0 - a * a;
        }
        gx.iter_mut().for_each(|v| *v = 0.0);
        params.encoder.backprop(x, &gh, &mut grads.encoder, &mut gx);
    }
    Ok(grads)
}

/// Argmax labels and max-softmax confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabels {
    pub fn one_hot(&self, pixel: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.labels[pixel]] = 1.0;
        v
    }
}

/// Argmax with ties going to the lowest class index.
pub fn pseudo_label(logits: &[f64], num_classes: usize) -> PseudoLabels {
    let n = logits.len() / num_classes;
    let mut labels = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for row in logits.chunks_exact(num_classes) {
        let mut best = 0;
        for k in 1..num_classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
        labels.push(best);
        confidences.push(1.0 / z);
    }
    PseudoLabels { num_classes, labels, confidences }
}

/// Softmax probability of `class` for each pixel.
pub fn class_probability(logits: &[f64], num_classes: usize, classes: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(num_classes)
        .zip(classes)
        .map(|(row, &c)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            (row[c] - max).exp() / z
        })
        .collect()
}

/// Teacher weights, updated only as an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &ModelParams, momentum: f64) -> Self {
        TeacherState {
            params: student.clone(),
            momentum,
        }
    }
}

/// `teacher ← m · teacher + (1 − m) · student` for every parameter.
pub fn teacher_ema_step(teacher: &mut TeacherState, student: &ModelParams) -> Result<()> {
    let m = teacher.momentum;
    if !(0.0..=1.0).contains(&m) {
        return Err(PrclError::contract(format!("teacher momentum {m} outside [0, 1]")));
    }
    for ((t, _), (s, _)) in teacher.params.layers_mut().into_iter().zip(student.layers()) {
        for (tv, sv) in t.values_mut().zip(s.values()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Poly decay factor `(1 − iter / total)^0.9`.
pub fn poly_factor(iter: usize, total_iters: usize) -> f64 {
    if total_iters == 0 {
        return 1.0;
    }
    (1.0 - iter.min(total_iters) as f64 / total_iters as f64).powf(0.9)
}

/// One SGD step: the probability head uses `lr_prob_head`, everything else
/// `lr_main`, both scaled by the poly schedule.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    lr_main: f64,
    lr_prob_head: f64,
    iter: usize,
    total_iters: usize,
) -> Result<()> {
    if !(lr_main > 0.0 && lr_prob_head > 0.0) {
        return Err(PrclError::contract("learning rates must be positive"));
    }
    let decay = poly_factor(iter, total_iters);
    for ((p, is_prob), (g, _)) in params.layers_mut().into_iter().zip(grads.layers()) {
        let lr = decay * if is_prob { lr_prob_head } else { lr_main };
        for (pv, gv) in p.values_mut().zip(g.values()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
