//! Synthetic embedding worlds with controlled label noise and corruption.
//!
//! Class centers are random unit vectors with a minimum pairwise angle.
//! The text embedding of a class is its center; a clean image embedding is
//! `normalize(center + intra_spread * g)` with `g ~ N(0, I)`. Label noise
//! reassigns exactly `floor(rate * N)` labels uniformly among the other
//! classes without moving the embeddings. Corruption adds
//! `corruption_sigma * g` to exactly `floor(rate * N)` further embeddings.
//! An optional fixed random rotation of all image embeddings models a shift
//! between the image and text encoders.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreVector;
use crate::selector::SelectionState;
use crate::store::{ClassTextBank, EmbeddingTable};

const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub intra_spread: f64,
    /// Minimum angle between class centers, in degrees.
    pub inter_separation: f64,
    pub label_noise_rate: f64,
    pub corruption_rate: f64,
    pub corruption_sigma: f64,
    pub seed: u64,
    /// Rotate every image embedding by one fixed random orthogonal matrix.
    pub rotate_images: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 100,
            dim: 32,
            intra_spread: 0.15,
            inter_separation: 60.0,
            label_noise_rate: 0.0,
            corruption_rate: 0.0,
            corruption_sigma: 0.45,
            seed: 0,
            rotate_images: false,
        }
    }
}

impl SynthSpec {
    pub fn n(&self) -> usize {
        self.n_classes * self.per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.n_classes < 1 {
            return bad("n_classes must be >= 1".into());
        }
        if self.per_class < 2 {
            return bad(format!("per_class must be >= 2, got {}", self.per_class));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        for (name, rate) in [
            ("label_noise_rate", self.label_noise_rate),
            ("corruption_rate", self.corruption_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must be in [0, 1], got {rate}"));
            }
        }
        if self.label_noise_rate + self.corruption_rate > 1.0 + 1e-12 {
            return bad("label_noise_rate + corruption_rate exceeds 1".into());
        }
        if self.label_noise_rate > 0.0 && self.n_classes < 2 {
            return bad("label noise needs at least two classes".into());
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return bad(format!("intra_spread must be finite and >= 0, got {}", self.intra_spread));
        }
        if !(self.corruption_sigma >= 0.0 && self.corruption_sigma.is_finite()) {
            return bad(format!("corruption_sigma must be finite and >= 0, got {}", self.corruption_sigma));
        }
        if !(0.0..180.0).contains(&self.inter_separation) {
            return bad(format!("inter_separation must be in [0, 180), got {}", self.inter_separation));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFlag {
    Clean,
    LabelFlipped,
    Corrupted,
}

impl SampleFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleFlag::Clean => "clean",
            SampleFlag::LabelFlipped => "label_flipped",
            SampleFlag::Corrupted => "corrupted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub flags: Vec<SampleFlag>,
    /// Class each embedding was drawn from (differs from the label when flipped).
    pub true_labels: Vec<u32>,
}

impl GroundTruth {
    pub fn count(&self, flag: SampleFlag) -> usize {
        self.flags.iter().filter(|&&f| f == flag).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub table: EmbeddingTable,
    pub bank: ClassTextBank,
    pub truth: GroundTruth,
}

fn gaussian<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn class_centers<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Array1<f64>>> {
    let min_cos = spec.inter_separation.to_radians().cos();
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while centers.len() < spec.n_classes {
        attempts += 1;
        if attempts > MAX_CENTER_ATTEMPTS {
            return Err(Error::SpecInvalid(format!(
                "could not place {} centers {}° apart in {} dimensions within {MAX_CENTER_ATTEMPTS} draws",
                spec.n_classes, spec.inter_separation, spec.dim
            )));
        }
        let c = unit(gaussian(spec.dim, rng));
        if centers.iter().all(|o| o.dot(&c) <= min_cos + 1e-12) {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation<R: Rng>(dim: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    let mut i = 0;
    while i < dim {
        let mut v = gaussian(dim, rng);
        for j in 0..i {
            let qj = q.row(j);
            let p = v.dot(&qj);
            v.scaled_add(-p, &qj);
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-8 {
            continue;
        }
        q.row_mut(i).assign(&(v / n));
        i += 1;
    }
    q
}

fn exact_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Builds a world from `spec`. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, dim) = (spec.n_classes, spec.dim);
    let centers = class_centers(spec, &mut rng)?;
    let rotation = spec.rotate_images.then(|| random_rotation(dim, &mut rng));

    let n = spec.n();
    let mut images = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for j in 0..spec.per_class {
            let row = c * spec.per_class + j;
            let x = unit(center + &(gaussian(dim, &mut rng) * spec.intra_spread));
            images.row_mut(row).assign(&x);
            labels.push(c as u32);
            ids.push(format!("class_{c:03}/{j:05}"));
        }
    }
    let true_labels = labels.clone();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_flip = exact_count(spec.label_noise_rate, n);
    let n_corrupt = exact_count(spec.corruption_rate, n);
    let mut flags = vec![SampleFlag::Clean; n];
    for &i in &order[..n_flip] {
        let other = rng.random_range(0..k as u32 - 1);
        labels[i] = if other >= labels[i] { other + 1 } else { other };
        flags[i] = SampleFlag::LabelFlipped;
    }
    for &i in &order[n_flip..n_flip + n_corrupt] {
        let noise = gaussian(dim, &mut rng) * spec.corruption_sigma;
        let mut row = images.row_mut(i);
        row += &noise;
        flags[i] = SampleFlag::Corrupted;
    }
    if let Some(r) = &rotation {
        images = images.dot(&r.t());
    }

    let mut text = Array2::<f64>::zeros((k, dim));
    for (c, center) in centers.iter().enumerate() {
        text.row_mut(c).assign(center);
    }
    let table = EmbeddingTable::new(images.mapv(|v| v as f32), labels, ids)?;
    let names = (0..k).map(|c| format!("class_{c:03}")).collect();
    let bank = ClassTextBank::new(text.mapv(|v| v as f32), names, "A photo of {}")?;
    Ok(SynthWorld {
        table,
        bank,
        truth: GroundTruth { flags, true_labels },
    })
}

#[derive(Serialize)]
struct TruthRow<'a> {
    index: usize,
    sample_id: &'a str,
    label: u32,
    true_label: u32,
    flag: &'static str,
}

/// `index,sample_id,label,true_label,flag` per sample.
pub fn truth_csv(world: &SynthWorld) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..world.table.n() {
        w.serialize(TruthRow {
            index: i,
            sample_id: &world.table.sample_ids()[i],
            label: world.table.labels()[i],
            true_label: world.truth.true_labels[i],
            flag: world.truth.flags[i].as_str(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_truth_csv(world: &SynthWorld, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, truth_csv(world)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct TruthRecord {
    #[allow(dead_code)]
    index: usize,
    #[allow(dead_code)]
    sample_id: String,
    #[allow(dead_code)]
    label: u32,
    true_label: u32,
    flag: SampleFlag,
}

pub fn read_truth_csv(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let mut r = csv::Reader::from_path(path)?;
    let mut flags = Vec::new();
    let mut true_labels = Vec::new();
    for rec in r.deserialize() {
        let rec: TruthRecord = rec?;
        flags.push(rec.flag);
        true_labels.push(rec.true_label);
    }
    Ok(GroundTruth { flags, true_labels })
}

/// Path of the ground-truth CSV written next to a store file.
pub fn truth_path_for(store: impl AsRef<Path>) -> std::path::PathBuf {
    store.as_ref().with_extension("truth.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionMetrics {
    pub n_total: usize,
    pub n_selected: usize,
    pub achieved_ratio: f64,
    /// Fraction of selected samples whose label was flipped.
    pub noisy_fraction: f64,
    /// Fraction of selected samples whose embedding was corrupted.
    pub corrupted_fraction: f64,
    pub per_class_selected: Vec<usize>,
    pub selected_mean_sas: Option<f64>,
    pub rejected_mean_sas: Option<f64>,
    pub selected_mean_sds: Option<f64>,
    pub rejected_mean_sds: Option<f64>,
}

impl SelectionMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean_of(values: &[f64], rows: &[usize]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|&i| values[i]).sum::<f64>() / rows.len() as f64)
}

/// Metrics of a boolean selection mask against ground truth.
pub fn mask_metrics(mask: &[bool], truth: &GroundTruth, scores: &ScoreVector, labels: &[u32]) -> Result<SelectionMetrics> {
    let n = mask.len();
    for len in [truth.flags.len(), scores.len(), labels.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, found: len });
        }
    }
    let selected: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let rejected: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let frac = |flag: SampleFlag| {
        if selected.is_empty() {
            0.0
        } else {
            selected.iter().filter(|&&i| truth.flags[i] == flag).count() as f64 / selected.len() as f64
        }
    };
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut per_class_selected = vec![0; classes];
    for &i in &selected {
        per_class_selected[labels[i] as usize] += 1;
    }
    Ok(SelectionMetrics {
        n_total: n,
        n_selected: selected.len(),
        achieved_ratio: selected.len() as f64 / n as f64,
        noisy_fraction: frac(SampleFlag::LabelFlipped),
        corrupted_fraction: frac(SampleFlag::Corrupted),
        per_class_selected,
        selected_mean_sas: mean_of(&scores.sas, &selected),
        rejected_mean_sas: mean_of(&scores.sas, &rejected),
        selected_mean_sds: mean_of(&scores.sds, &selected),
        rejected_mean_sds: mean_of(&scores.sds, &rejected),
    })
}

pub fn selection_metrics(
    state: &SelectionState,
    truth: &GroundTruth,
    scores: &ScoreVector,
    labels: &[u32],
) -> Result<SelectionMetrics> {
    mask_metrics(&state.mask, truth, scores, labels)
}

/// Uniformly random mask with exactly `count` entries set.
pub fn random_mask(n: usize, count: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut mask = vec![false; n];
    for &i in &idx[..count.min(n)] {
        mask[i] = true;
    }
    mask
}
