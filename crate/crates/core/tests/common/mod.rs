//! Reference implementations used as oracles by the integration suites.
//!
//! Nothing here calls into the library's numeric paths: forward passes,
//! losses, neighbour searches and rankings are recomputed with plain loops.
#![allow(dead_code)]

use mmsel_core::adapter::AdapterParams;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hidden pre-activations of one adapter for input `x`.
pub fn pre_activations(p: &AdapterParams, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|o| {
            let mut s = p.b1[o];
            for i in 0..d {
                s += p.w1[[o, i]] * x[i];
            }
            s
        })
        .collect()
}

pub fn forward(p: &AdapterParams, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let hidden: Vec<f64> = pre_activations(p, x).into_iter().map(|v| v.max(0.0)).collect();
    (0..d)
        .map(|o| {
            let mut s = p.b2[o];
            for h in 0..d {
                s += p.w2[[o, h]] * hidden[h];
            }
            p.blend * s + (1.0 - p.blend) * x[o]
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Image-to-class InfoNCE, scalar loops.
pub fn infonce(
    img: &AdapterParams,
    txt: &AdapterParams,
    images: &[Vec<f64>],
    labels: &[u32],
    texts: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let z: Vec<Vec<f64>> = texts.iter().map(|t| unit(forward(txt, t))).collect();
    let mut total = 0.0;
    for (x, &y) in images.iter().zip(labels) {
        let a = unit(forward(img, x));
        let logits: Vec<f64> = z.iter().map(|zc| dot(&a, zc) / tau).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y as usize];
    }
    total / images.len() as f64
}

/// A small random contrastive problem whose ReLU pre-activations all stay
/// at least `margin` away from the kink, so central differences are valid.
pub struct GradInstance {
    pub img: AdapterParams,
    pub txt: AdapterParams,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub texts: Vec<Vec<f64>>,
    pub tau: f64,
}

impl GradInstance {
    pub fn random(seed: u64, dim: usize, classes: usize, batch: usize, tau: f64) -> Self {
        let mut r = rng(seed);
        let margin = 1e-3;
        loop {
            let blend_i = r.random_range(0.05..1.0);
            let blend_t = r.random_range(0.05..1.0);
            let img = AdapterParams::random(dim, blend_i, 0.6, &mut r);
            let txt = AdapterParams::random(dim, blend_t, 0.6, &mut r);
            let draw = |r: &mut ChaCha8Rng| unit((0..dim).map(|_| r.sample(StandardNormal)).collect());
            let images: Vec<Vec<f64>> = (0..batch).map(|_| draw(&mut r)).collect();
            let texts: Vec<Vec<f64>> = (0..classes).map(|_| draw(&mut r)).collect();
            let labels: Vec<u32> = (0..batch).map(|_| r.random_range(0..classes as u32)).collect();
            let clear = images
                .iter()
                .flat_map(|x| pre_activations(&img, x))
                .chain(texts.iter().flat_map(|t| pre_activations(&txt, t)))
                .all(|p| p.abs() > margin);
            if clear {
                return Self { img, txt, images, labels, texts, tau };
            }
        }
    }

    pub fn images_matrix(&self) -> Array2<f64> {
        to_matrix(&self.images)
    }

    pub fn texts_matrix(&self) -> Array2<f64> {
        to_matrix(&self.texts)
    }

    pub fn loss(&self, img: &AdapterParams, txt: &AdapterParams) -> f64 {
        infonce(img, txt, &self.images, &self.labels, &self.texts, self.tau)
    }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap()
}

/// Every scalar parameter of an adapter, as (name, getter/setter) through a
/// flat index: w1, b1, w2, b2, blend.
pub fn param_count(dim: usize) -> usize {
    2 * dim * dim + 2 * dim + 1
}

pub fn param_mut(p: &mut AdapterParams, idx: usize) -> &mut f64 {
    let d = p.b1.len();
    let dd = d * d;
    match idx {
        i if i < dd => &mut p.w1[[i / d, i % d]],
        i if i < dd + d => &mut p.b1[i - dd],
        i if i < 2 * dd + d => {
            let j = i - dd - d;
            &mut p.w2[[j / d, j % d]]
        }
        i if i < 2 * dd + 2 * d => &mut p.b2[i - 2 * dd - d],
        _ => &mut p.blend,
    }
}

/// Worst relative error between `analytic(idx)` and central differences of
/// the oracle loss, over every parameter of both adapters.
///
/// Relative error is `|a - f| / max(|a|, |f|)`; components where both are
/// below `1e-8` in magnitude count as agreeing.
pub fn max_fd_error(
    inst: &GradInstance,
    analytic_img: impl Fn(usize) -> f64,
    analytic_txt: impl Fn(usize) -> f64,
    step: f64,
) -> f64 {
    let dim = inst.img.b1.len();
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        for idx in 0..param_count(dim) {
            let (mut ip, mut im) = (inst.img.clone(), inst.img.clone());
            let (mut tp, mut tm) = (inst.txt.clone(), inst.txt.clone());
            if side == 0 {
                *param_mut(&mut ip, idx) += step;
                *param_mut(&mut im, idx) -= step;
            } else {
                *param_mut(&mut tp, idx) += step;
                *param_mut(&mut tm, idx) -= step;
            }
            let fd = (inst.loss(&ip, &tp) - inst.loss(&im, &tm)) / (2.0 * step);
            let a = if side == 0 { analytic_img(idx) } else { analytic_txt(idx) };
            let scale = a.abs().max(fd.abs());
            if scale < 1e-8 {
                continue;
            }
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}

pub fn grad_component(g: &mmsel_core::adapter::AdapterGrads, idx: usize) -> f64 {
    let d = g.b1.len();
    let dd = d * d;
    match idx {
        i if i < dd => g.w1[[i / d, i % d]],
        i if i < dd + d => g.b1[i - dd],
        i if i < 2 * dd + d => {
            let j = i - dd - d;
            g.w2[[j / d, j % d]]
        }
        i if i < 2 * dd + 2 * d => g.b2[i - 2 * dd - d],
        _ => g.blend,
    }
}

/// O(N^2) k-nearest same-class neighbours: full distance list per sample,
/// fully sorted by (distance, index). `k = max(1, class_size / divisor)`.
pub fn brute_force_knn(features: &Array2<f64>, labels: &[u32], divisor: usize) -> (Vec<Vec<usize>>, Vec<f64>) {
    let n = labels.len();
    let mut neighbors = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    for i in 0..n {
        let class_size = labels.iter().filter(|&&l| l == labels[i]).count();
        let k = (class_size / divisor).max(1).min(class_size - 1);
        let mut all: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if j == i || labels[j] != labels[i] {
                continue;
            }
            let mut s = 0.0;
            for c in 0..features.ncols() {
                let diff = features[[i, c]] - features[[j, c]];
                s += diff * diff;
            }
            all.push((s.sqrt(), j));
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        let mut sum = 0.0;
        for (d, _) in &all {
            sum += d;
        }
        means.push(sum / k as f64);
        neighbors.push(all.iter().map(|p| p.1).collect());
    }
    (neighbors, means)
}

/// Top-`count` samples by `sas + alpha * minmax(sds)`, ties by index, as a mask.
pub fn combined_score_top(sas: &[f64], sds: &[f64], alpha: f64, count: usize) -> Vec<bool> {
    let lo = sds.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let combined: Vec<f64> = (0..sas.len())
        .map(|i| {
            let norm = if hi > lo { (sds[i] - lo) / (hi - lo) } else { 0.0 };
            sas[i] + alpha * norm
        })
        .collect();
    let mut order: Vec<usize> = (0..sas.len()).collect();
    order.sort_by(|&a, &b| combined[b].partial_cmp(&combined[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; sas.len()];
    for &i in &order[..count] {
        mask[i] = true;
    }
    mask
}

/// Closest integer count to `ratio * n`, at least one.
pub fn rounded_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).max(1)
}
