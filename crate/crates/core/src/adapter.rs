//! Dimension-preserving residual MLP adapters and their contrastive fit.
//!
//! Each adapter maps `x` to `blend * (w2 * relu(w1 * x + b1) + b2) + (1 - blend) * x`.
//! The image adapter is applied to every sample embedding, the text adapter
//! to every class prompt embedding. Inputs are unit-normalized before they
//! enter an adapter. Training minimizes an image-to-class InfoNCE loss over
//! the whole class bank, with the gradients below written out by hand.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{normalized_rows_f64, validate_pair, ByteReader, ClassTextBank, EmbeddingTable};

pub const ADAPTER_MAGIC: [u8; 4] = *b"ADP1";
pub const ADAPTER_VERSION: u32 = 1;

/// Weights of one adapter. `w1` and `w2` are `(out, in)` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub blend: f64,
}

/// Partial derivatives of a scalar loss with respect to [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub blend: f64,
}

/// Image and text adapters, always used together.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub image: AdapterParams,
    pub text: AdapterParams,
}

struct ForwardCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    mlp: Array2<f64>,
    out: Array2<f64>,
}

impl AdapterParams {
    /// Adapter that returns its input unchanged (`blend = 0`).
    pub fn passthrough(dim: usize) -> Self {
        Self {
            w1: Array2::eye(dim),
            b1: Array1::zeros(dim),
            w2: Array2::eye(dim),
            b2: Array1::zeros(dim),
            blend: 0.0,
        }
    }

    /// Fresh adapter for training: He-initialized `w1`, zero `w2` and biases,
    /// so the initial output is `(1 - blend) * x`.
    pub fn init<R: Rng + ?Sized>(dim: usize, blend: f64, rng: &mut R) -> Self {
        let scale = (2.0 / dim as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((dim, dim), || scale * rng.sample::<f64, _>(StandardNormal));
        Self {
            w1,
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
            blend,
        }
    }

    /// Gaussian-random weights, mostly for tests.
    pub fn random<R: Rng + ?Sized>(dim: usize, blend: f64, scale: f64, rng: &mut R) -> Self {
        let mut g = || scale * rng.sample::<f64, _>(StandardNormal);
        Self {
            w1: Array2::from_shape_simple_fn((dim, dim), &mut g),
            b1: Array1::from_shape_simple_fn(dim, &mut g),
            w2: Array2::from_shape_simple_fn((dim, dim), &mut g),
            b2: Array1::from_shape_simple_fn(dim, &mut g),
            blend,
        }
    }

    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.blend.is_finite()
            && self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
            && self.b1.iter().chain(self.b2.iter()).all(|v| v.is_finite())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.dim(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x.len())?;
        let pre = self.w1.dot(&x) + &self.b1;
        let hidden = pre.mapv(relu);
        let mlp = self.w2.dot(&hidden) + &self.b2;
        Ok(mlp * self.blend + &x * (1.0 - self.blend))
    }

    /// Row-wise [`forward`](Self::forward) over a batch.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.out)
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_dim(x.ncols())?;
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(relu);
        let mlp = hidden.dot(&self.w2.t()) + &self.b2;
        let out = &mlp * self.blend + &x * (1.0 - self.blend);
        Ok(ForwardCache { pre, hidden, mlp, out })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the batch output) to the weights.
    fn backward(&self, x: ArrayView2<'_, f64>, cache: &ForwardCache, d_out: &Array2<f64>) -> AdapterGrads {
        let d_mlp = d_out * self.blend;
        let w2 = d_mlp.t().dot(&cache.hidden);
        let b2 = d_mlp.sum_axis(Axis(0));
        let mut d_pre = d_mlp.dot(&self.w2);
        Zip::from(&mut d_pre).and(&cache.pre).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = d_pre.t().dot(&x);
        let b1 = d_pre.sum_axis(Axis(0));
        let blend = (d_out * &(&cache.mlp - &x)).sum();
        AdapterGrads { w1, b1, w2, b2, blend }
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl AdapterGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w1: Array2::zeros((dim, dim)),
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
            blend: 0.0,
        }
    }
}

impl AdapterPair {
    pub fn passthrough(dim: usize) -> Self {
        Self {
            image: AdapterParams::passthrough(dim),
            text: AdapterParams::passthrough(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.image.dim()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        self.image.check_dim(dim)?;
        self.text.check_dim(dim)
    }
}

/// Loss value and gradients for both adapters.
#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub image: AdapterGrads,
    pub text: AdapterGrads,
}

/// Image-to-class InfoNCE on prepared inputs.
///
/// `images` are the (already unit-normalized) adapter inputs of the batch,
/// `texts` one row per class. Returns the batch-mean loss
/// `mean_i [ logsumexp_c(cos(a_i, t_c) / tau) - cos(a_i, t_{y_i}) / tau ]`
/// along with its exact gradient.
pub fn infonce_on_inputs(
    image_adapter: &AdapterParams,
    text_adapter: &AdapterParams,
    images: ArrayView2<'_, f64>,
    labels: &[u32],
    texts: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<InfoNceOutput> {
    let batch = images.nrows();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(Error::LengthMismatch {
            expected: batch,
            found: labels.len(),
        });
    }
    if texts.ncols() != images.ncols() {
        return Err(Error::DimensionMismatch {
            expected: images.ncols(),
            found: texts.ncols(),
        });
    }
    let classes = texts.nrows();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::LabelOutOfRange { row, label, classes });
    }

    let img = image_adapter.forward_cached(images)?;
    let txt = text_adapter.forward_cached(texts)?;
    let (a, a_norm) = unit_rows(&img.out)?;
    let (z, z_norm) = unit_rows(&txt.out)?;

    let inv_tau = 1.0 / temperature;
    let logits = a.dot(&z.t()) * inv_tau;

    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((batch, classes));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[i] as usize;
        loss += lse - row[y];
        for (c, &s) in row.iter().enumerate() {
            g[[i, c]] = (s - lse).exp();
        }
        g[[i, y]] -= 1.0;
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("InfoNCE loss evaluated to {loss}")));
    }
    g *= inv_tau / batch as f64;

    let d_a = g.dot(&z);
    let d_z = g.t().dot(&a);
    let d_img_out = unit_rows_backward(&a, &a_norm, &d_a);
    let d_txt_out = unit_rows_backward(&z, &z_norm, &d_z);

    Ok(InfoNceOutput {
        loss,
        image: image_adapter.backward(images, &img, &d_img_out),
        text: text_adapter.backward(texts, &txt, &d_txt_out),
    })
}

/// InfoNCE over the rows `rows` of `table`, against every class of `bank`.
pub fn infonce_loss(
    adapters: &AdapterPair,
    table: &EmbeddingTable,
    rows: &[usize],
    bank: &ClassTextBank,
    temperature: f64,
) -> Result<InfoNceOutput> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    validate_pair(table, bank)?;
    let batch = table.select_rows(rows)?;
    let images = normalized_rows_f64(batch.embeddings())?;
    let texts = normalized_rows_f64(bank.text_embeddings())?;
    infonce_on_inputs(
        &adapters.image,
        &adapters.text,
        images.view(),
        batch.labels(),
        texts.view(),
        temperature,
    )
}

fn unit_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(n.is_finite() && *n > 0.0)) {
        return Err(Error::ZeroNormRow(i));
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Gradient through `u -> u / |u|`: `(g - a (a . g)) / |u|` per row.
fn unit_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut o, a), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let proj = a.dot(&o);
        o.scaled_add(-proj, &a);
        o /= n;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub seed: u64,
    pub blend: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 256,
            learning_rate: 1e-3,
            momentum: 0.9,
            temperature: 0.07,
            seed: 0,
            blend: 0.2,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.epochs < 1 {
            return bad(format!("epochs must be >= 1, got {}", self.epochs));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return bad(format!("temperature must be in (0, 1], got {}", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return bad(format!("blend must be in [0, 1], got {}", self.blend));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// One JSON object per line: `{"epoch":..,"mean_loss":..,"wall_ms":..}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Same log with every `wall_ms` set to zero.
    pub fn without_timings(&self) -> Self {
        Self {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochLog { wall_ms: 0, ..e.clone() })
                .collect(),
        }
    }
}

struct Momentum {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Momentum {
    fn new(dim: usize) -> Self {
        Self {
            w1: Array2::zeros((dim, dim)),
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
        }
    }

    /// `v = mu * v + g; p -= lr * v`. The blend is a hyperparameter and stays fixed.
    fn step(&mut self, p: &mut AdapterParams, g: &AdapterGrads, lr: f64, mu: f64) {
        fn upd<D: ndarray::Dimension>(
            p: &mut ndarray::Array<f64, D>,
            v: &mut ndarray::Array<f64, D>,
            g: &ndarray::Array<f64, D>,
            lr: f64,
            mu: f64,
        ) {
            Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = mu * *v + g;
                *p -= lr * *v;
            });
        }
        upd(&mut p.w1, &mut self.w1, &g.w1, lr, mu);
        upd(&mut p.b1, &mut self.b1, &g.b1, lr, mu);
        upd(&mut p.w2, &mut self.w2, &g.w2, lr, mu);
        upd(&mut p.b2, &mut self.b2, &g.b2, lr, mu);
    }
}

/// Starting point of [`fit_adapters`] for `cfg.seed`.
pub fn initial_adapters(dim: usize, cfg: &AdaptConfig) -> AdapterPair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    AdapterPair {
        image: AdapterParams::init(dim, cfg.blend, &mut rng),
        text: AdapterParams::init(dim, cfg.blend, &mut rng),
    }
}

/// Fits both adapters with mini-batch momentum SGD on [`infonce_on_inputs`].
///
/// Deterministic for a fixed `cfg.seed`: stream 0 of a ChaCha generator draws
/// the initial weights, stream 1 the per-epoch shuffles. Batch losses and
/// gradients are reduced in a fixed order.
pub fn fit_adapters(table: &EmbeddingTable, bank: &ClassTextBank, cfg: &AdaptConfig) -> Result<(AdapterPair, TrainingLog)> {
    cfg.validate()?;
    validate_pair(table, bank)?;
    let dim = table.dim();
    let mut pair = initial_adapters(dim, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let images = normalized_rows_f64(table.embeddings())?;
    let texts = normalized_rows_f64(bank.text_embeddings())?;
    let labels = table.labels();
    let mut order: Vec<usize> = (0..table.n()).collect();
    let mut vel_i = Momentum::new(dim);
    let mut vel_t = Momentum::new(dim);
    let mut log = TrainingLog::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = images.select(Axis(0), chunk);
            let y: Vec<u32> = chunk.iter().map(|&r| labels[r]).collect();
            let out = infonce_on_inputs(&pair.image, &pair.text, x.view(), &y, texts.view(), cfg.temperature)
                .map_err(|e| match e {
                    Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("epoch {epoch}, batch {b}: {msg}")),
                    other => other,
                })?;
            total += out.loss * chunk.len() as f64;
            vel_i.step(&mut pair.image, &out.image, cfg.learning_rate, cfg.momentum);
            vel_t.step(&mut pair.text, &out.text, cfg.learning_rate, cfg.momentum);
            if !(pair.image.is_finite() && pair.text.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {b}: adapter weights diverged"
                )));
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: total / table.n() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((pair, log))
}

/// Applies the image adapter to every (unit-normalized) row of `table`.
pub fn adapt_images(table: &EmbeddingTable, adapter: &AdapterParams) -> Result<Array2<f64>> {
    adapter.check_dim(table.dim())?;
    adapter.forward_batch(normalized_rows_f64(table.embeddings())?.view())
}

/// Applies the text adapter to every (unit-normalized) class embedding.
pub fn adapt_texts(bank: &ClassTextBank, adapter: &AdapterParams) -> Result<Array2<f64>> {
    adapter.check_dim(bank.dim())?;
    adapter.forward_batch(normalized_rows_f64(bank.text_embeddings())?.view())
}

fn put_params(out: &mut Vec<u8>, p: &AdapterParams) {
    out.extend_from_slice(&p.blend.to_le_bytes());
    for v in p.w1.iter().chain(p.b1.iter()).chain(p.w2.iter()).chain(p.b2.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_params(r: &mut ByteReader<'_>, dim: usize) -> Result<AdapterParams> {
    let blend = r.f64s(1)?[0];
    let w1 = Array2::from_shape_vec((dim, dim), r.f64s(dim * dim)?).expect("sized");
    let b1 = Array1::from_vec(r.f64s(dim)?);
    let w2 = Array2::from_shape_vec((dim, dim), r.f64s(dim * dim)?).expect("sized");
    let b2 = Array1::from_vec(r.f64s(dim)?);
    Ok(AdapterParams { w1, b1, w2, b2, blend })
}

/// `"ADP1" | u32 version | u32 dim | image adapter | text adapter`, each
/// adapter as `f64 blend, w1, b1, w2, b2` little-endian, row-major.
pub fn encode_adapters(pair: &AdapterPair) -> Result<Vec<u8>> {
    pair.check_dim(pair.dim())?;
    let dim = pair.dim();
    let mut out = Vec::with_capacity(12 + 2 * 8 * (1 + 2 * dim * dim + 2 * dim));
    out.extend_from_slice(&ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    put_params(&mut out, &pair.image);
    put_params(&mut out, &pair.text);
    Ok(out)
}

pub fn decode_adapters(bytes: &[u8]) -> Result<AdapterPair> {
    let mut r = ByteReader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let version = r.u32()?;
    if version != ADAPTER_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let dim = r.u32()? as usize;
    r.require(2 * (1 + 2 * dim as u64 * dim as u64 + 2 * dim as u64), 8)?;
    let image = read_params(&mut r, dim)?;
    let text = read_params(&mut r, dim)?;
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes(r.remaining()));
    }
    Ok(AdapterPair { image, text })
}

pub fn save_adapters(pair: &AdapterPair, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_adapters(pair)?)?;
    Ok(())
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<AdapterPair> {
    decode_adapters(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gaussian_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
    }

    /// Scalar-loop forward pass, written independently of the ndarray path.
    fn forward_oracle(p: &AdapterParams, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut hidden = vec![0.0; d];
        for o in 0..d {
            let mut s = p.b1[o];
            for i in 0..d {
                s += p.w1[[o, i]] * x[i];
            }
            hidden[o] = if s > 0.0 { s } else { 0.0 };
        }
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

    #[test]
    fn blend_zero_is_exact_identity() {
        let mut r = rng(1);
        let p = AdapterParams::random(6, 0.0, 1.0, &mut r);
        let x = array![0.3, -1.2, 5.0, 0.0, -0.0, 1e-9];
        assert_eq!(p.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn relu_identity_on_nonnegative_input() {
        let mut p = AdapterParams::passthrough(4);
        p.blend = 1.0;
        let x = array![0.0, 0.5, 2.0, 7.25];
        assert_eq!(p.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut r = rng(2);
        for _ in 0..20 {
            let p = AdapterParams::random(7, r.random::<f64>(), 0.7, &mut r);
            let x: Vec<f64> = (0..7).map(|_| r.sample(StandardNormal)).collect();
            let fast = p.forward(ArrayView1::from(&x)).unwrap();
            let batch = p.forward_batch(Array2::from_shape_vec((1, 7), x.clone()).unwrap().view()).unwrap();
            for ((a, b), c) in fast.iter().zip(forward_oracle(&p, &x)).zip(batch.row(0)) {
                assert!((a - b).abs() <= 1e-6 && (c - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = AdapterParams::passthrough(3);
        assert!(matches!(
            p.forward(array![1.0, 2.0].view()),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut r = rng(3);
        let p = AdapterPair {
            image: AdapterParams::random(4, 0.3, 0.5, &mut r),
            text: AdapterParams::random(4, 0.3, 0.5, &mut r),
        };
        let x = gaussian_matrix(5, 4, &mut r);
        let t = gaussian_matrix(1, 4, &mut r);
        let out = infonce_on_inputs(&p.image, &p.text, x.view(), &[0; 5], t.view(), 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn aligned_orthogonal_closed_form() {
        let tau = 0.07;
        let p = AdapterPair::passthrough(3);
        let eye = Array2::<f64>::eye(3);
        for k in 2..=3 {
            let texts = eye.slice(ndarray::s![..k, ..]).to_owned();
            let labels: Vec<u32> = (0..k as u32).collect();
            let out = infonce_on_inputs(&p.image, &p.text, texts.view(), &labels, texts.view(), tau).unwrap();
            let pos = (1.0f64 / tau).exp();
            let expected = -(pos / (pos + (k as f64 - 1.0))).ln();
            assert!((out.loss - expected).abs() <= 1e-15, "{} vs {}", out.loss, expected);
        }
        let two = -((1.0f64 / tau).exp() / ((1.0f64 / tau).exp() + 1.0)).ln();
        assert!((two - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut r = rng(4);
        for _ in 0..20 {
            let p = AdapterParams::random(5, 0.5, 1.0, &mut r);
            let q = AdapterParams::random(5, 0.5, 1.0, &mut r);
            let x = gaussian_matrix(6, 5, &mut r);
            let t = gaussian_matrix(3, 5, &mut r);
            let out = infonce_on_inputs(&p, &q, x.view(), &[0, 1, 2, 0, 1, 2], t.view(), 0.1).unwrap();
            assert!(out.loss >= 0.0);
        }
    }

    #[test]
    fn empty_batch_and_bad_label() {
        let p = AdapterParams::passthrough(2);
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            infonce_on_inputs(&p, &p, empty.view(), &[], t.view(), 0.07),
            Err(Error::EmptyBatch)
        ));
        let x = array![[1.0, 1.0]];
        assert!(matches!(
            infonce_on_inputs(&p, &p, x.view(), &[2], t.view(), 0.07),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for cfg in [
            AdaptConfig { epochs: 0, ..Default::default() },
            AdaptConfig { batch_size: 1, ..Default::default() },
            AdaptConfig { temperature: 0.0, ..Default::default() },
            AdaptConfig { temperature: 1.5, ..Default::default() },
            AdaptConfig { blend: 1.1, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let mut r = rng(5);
        let pair = AdapterPair {
            image: AdapterParams::random(3, 0.2, 1.0, &mut r),
            text: AdapterParams::random(3, 0.2, 1.0, &mut r),
        };
        let bytes = encode_adapters(&pair).unwrap();
        assert_eq!(decode_adapters(&bytes).unwrap(), pair);
        let mut bad = bytes.clone();
        bad[3] = b'9';
        assert!(matches!(decode_adapters(&bad), Err(Error::MagicMismatch { .. })));
        assert!(matches!(
            decode_adapters(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));
    }
}
