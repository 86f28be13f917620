//! Per-sample alignment and diversity scores.
//!
//! The alignment score of sample `i` is the cosine between its adapted image
//! embedding and the adapted text embedding of its class. The diversity score
//! is the mean L2 distance from its adapted image embedding to its `k`
//! nearest neighbours within the same class, where `k` is a fraction of the
//! class size. Neighbour search is exact.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_images, adapt_texts, AdapterPair, AdapterParams};
use crate::error::{Error, Result};
use crate::store::{validate_pair, ByteReader, ClassTextBank, EmbeddingTable};

pub const SCORES_MAGIC: [u8; 4] = *b"SCR1";
pub const SCORES_VERSION: u32 = 1;

pub const DEFAULT_K_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    /// Alignment score per sample, in `[-1, 1]`.
    pub sas: Vec<f64>,
    /// Diversity score per sample, `>= 0`.
    pub sds: Vec<f64>,
    /// Neighbour count used for each class label (0 for labels with no samples).
    pub k_used: Vec<usize>,
}

impl ScoreVector {
    pub fn new(sas: Vec<f64>, sds: Vec<f64>, k_used: Vec<usize>) -> Result<Self> {
        let s = Self { sas, sds, k_used };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.sas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sds.len() != self.sas.len() {
            return Err(Error::LengthMismatch {
                expected: self.sas.len(),
                found: self.sds.len(),
            });
        }
        if let Some(i) = self.sas.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::SpecInvalid(format!("sas[{i}] = {} outside [-1, 1]", self.sas[i])));
        }
        if let Some(i) = self.sds.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::SpecInvalid(format!("sds[{i}] = {} is not a finite nonnegative value", self.sds[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub k_fraction: f64,
    /// Measure diversity distances between unit-normalized adapted features
    /// instead of the raw adapter outputs.
    pub normalize_sds_features: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            k_fraction: DEFAULT_K_FRACTION,
            normalize_sds_features: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "k_fraction must be in (0, 1], got {}",
                self.k_fraction
            )));
        }
        Ok(())
    }
}

fn unit_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::ZeroNormRow(i));
        }
        row /= n;
    }
    Ok(out)
}

/// Cosine between each adapted image and the adapted text of its class.
/// Text embeddings are adapted once per class.
pub fn semantic_alignment(table: &EmbeddingTable, bank: &ClassTextBank, adapters: &AdapterPair) -> Result<Vec<f64>> {
    validate_pair(table, bank)?;
    adapters.check_dim(table.dim())?;
    let images = unit_rows(&adapt_images(table, &adapters.image)?)?;
    let texts = unit_rows(&adapt_texts(bank, &adapters.text)?)?;
    Ok(images
        .rows()
        .into_iter()
        .zip(table.labels())
        .map(|(a, &y)| a.dot(&texts.row(y as usize)).clamp(-1.0, 1.0))
        .collect())
}

/// Neighbour count for a class of `class_size` samples.
pub fn neighbor_count(class_size: usize, k_fraction: f64) -> usize {
    let k = ((k_fraction * class_size as f64) + 1e-9).floor() as usize;
    k.max(1).min(class_size.saturating_sub(1))
}

/// Exact same-class neighbours of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    /// For each sample, neighbour indices ordered by (distance, index).
    pub neighbors: Vec<Vec<usize>>,
    /// Distances matching `neighbors`.
    pub distances: Vec<Vec<f64>>,
    pub k_used: Vec<usize>,
}

pub(crate) fn l2(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Per-class exact k-nearest-neighbour search over `features`.
pub fn same_class_neighbors(features: ArrayView2<'_, f64>, labels: &[u32], k_fraction: f64) -> Result<Neighborhoods> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!("k_fraction must be in (0, 1], got {k_fraction}")));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i);
    }
    if let Some((class, m)) = members.iter().enumerate().find(|(_, m)| m.len() == 1) {
        return Err(Error::ClassTooSmall { class, size: m.len() });
    }

    let mut neighbors = vec![Vec::new(); n];
    let mut distances = vec![Vec::new(); n];
    let mut k_used = vec![0; classes];
    for (class, idx) in members.iter().enumerate() {
        let m = idx.len();
        if m == 0 {
            continue;
        }
        let k = neighbor_count(m, k_fraction);
        k_used[class] = k;
        let mut pair = vec![0.0; m * m];
        for a in 0..m {
            for b in a + 1..m {
                let d = l2(features.row(idx[a]), features.row(idx[b]));
                pair[a * m + b] = d;
                pair[b * m + a] = d;
            }
        }
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
        for a in 0..m {
            cand.clear();
            cand.extend((0..m).filter(|&b| b != a).map(|b| (pair[a * m + b], idx[b])));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_distance_then_index);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by_distance_then_index);
            let i = idx[a];
            neighbors[i] = cand.iter().map(|c| c.1).collect();
            distances[i] = cand.iter().map(|c| c.0).collect();
        }
    }
    Ok(Neighborhoods {
        neighbors,
        distances,
        k_used,
    })
}

/// Mean same-class neighbour distance per sample, plus `k` per class label.
pub fn sample_diversity_from_features(
    features: ArrayView2<'_, f64>,
    labels: &[u32],
    k_fraction: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let nb = same_class_neighbors(features, labels, k_fraction)?;
    let sds = nb
        .distances
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    Ok((sds, nb.k_used))
}

/// Diversity scores on the adapted image embeddings of `table`.
pub fn sample_diversity(table: &EmbeddingTable, image_adapter: &AdapterParams, cfg: &ScoreConfig) -> Result<(Vec<f64>, Vec<usize>)> {
    cfg.validate()?;
    let mut features = adapt_images(table, image_adapter)?;
    if cfg.normalize_sds_features {
        features = unit_rows(&features)?;
    }
    sample_diversity_from_features(features.view(), table.labels(), cfg.k_fraction)
}

/// Both scores for every sample of `table`.
pub fn score_all(table: &EmbeddingTable, bank: &ClassTextBank, adapters: &AdapterPair, cfg: &ScoreConfig) -> Result<ScoreVector> {
    let sas = semantic_alignment(table, bank, adapters)?;
    let (sds, mut k_used) = sample_diversity(table, &adapters.image, cfg)?;
    k_used.resize(bank.k().max(k_used.len()), 0);
    ScoreVector::new(sas, sds, k_used)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / n;
        let std = if min == max {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        };
        Self { mean, std, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    const BINS: usize = 20;

    fn of(values: &[f64], lo: f64, hi: f64) -> Self {
        let mut counts = vec![0; Self::BINS];
        let width = (hi - lo) / Self::BINS as f64;
        for &v in values {
            let bin = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
            counts[bin.clamp(0, Self::BINS as isize - 1) as usize] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScoreStats {
    pub class: u32,
    pub count: usize,
    pub k_used: usize,
    pub sas: Summary,
    pub sds: Summary,
    pub sas_histogram: Histogram,
    pub sds_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub n: usize,
    pub sas: Summary,
    pub sds: Summary,
    pub classes: Vec<ClassScoreStats>,
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-class summaries and histograms. Classes with no samples are omitted.
pub fn score_report(scores: &ScoreVector, table: &EmbeddingTable) -> Result<ScoreReport> {
    if scores.len() != table.n() {
        return Err(Error::LengthMismatch {
            expected: table.n(),
            found: scores.len(),
        });
    }
    scores.validate()?;
    let sds_hi = scores.sds.iter().copied().fold(0.0, f64::max);
    let classes_seen = table.labels().iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut classes = Vec::new();
    for c in 0..classes_seen {
        let rows: Vec<usize> = (0..table.n()).filter(|&i| table.labels()[i] as usize == c).collect();
        if rows.is_empty() {
            continue;
        }
        let sas: Vec<f64> = rows.iter().map(|&i| scores.sas[i]).collect();
        let sds: Vec<f64> = rows.iter().map(|&i| scores.sds[i]).collect();
        classes.push(ClassScoreStats {
            class: c as u32,
            count: rows.len(),
            k_used: scores.k_used.get(c).copied().unwrap_or(0),
            sas: Summary::of(&sas),
            sds: Summary::of(&sds),
            sas_histogram: Histogram::of(&sas, -1.0, 1.0),
            sds_histogram: Histogram::of(&sds, 0.0, sds_hi),
        });
    }
    Ok(ScoreReport {
        n: table.n(),
        sas: Summary::of(&scores.sas),
        sds: Summary::of(&scores.sds),
        classes,
    })
}

/// `"SCR1" | u32 version | u64 N | N f32 sas | N f32 sds`, little-endian.
pub fn encode_scores(scores: &ScoreVector) -> Result<Vec<u8>> {
    scores.validate()?;
    let n = scores.len();
    let mut out = Vec::with_capacity(16 + 8 * n);
    out.extend_from_slice(&SCORES_MAGIC);
    out.extend_from_slice(&SCORES_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in scores.sas.iter().chain(&scores.sds) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_scores`]. `k_used` is not stored and comes back empty.
pub fn decode_scores(bytes: &[u8]) -> Result<ScoreVector> {
    let mut r = ByteReader::new(bytes);
    r.magic(SCORES_MAGIC)?;
    let version = r.u32()?;
    if version != SCORES_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = r.u64()?;
    r.require(n, 8)?;
    let n = n as usize;
    let sas = r.f32s(n)?.into_iter().map(f64::from).collect();
    let sds = r.f32s(n)?.into_iter().map(f64::from).collect();
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes(r.remaining()));
    }
    ScoreVector::new(sas, sds, Vec::new())
}

pub fn save_scores(scores: &ScoreVector, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scores(scores)?)?;
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreVector> {
    decode_scores(&fs::read(path)?)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    sample_id: &'a str,
    label: u32,
    sas: f64,
    sds: f64,
}

/// CSV with columns `sample_id,label,sas,sds`, one row per sample in index order.
pub fn scores_csv(scores: &ScoreVector, table: &EmbeddingTable) -> Result<String> {
    if scores.len() != table.n() {
        return Err(Error::LengthMismatch {
            expected: table.n(),
            found: scores.len(),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..table.n() {
        w.serialize(ScoreRow {
            sample_id: &table.sample_ids()[i],
            label: table.labels()[i],
            sas: scores.sas[i],
            sds: scores.sds[i],
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table(rows: Array2<f32>, labels: Vec<u32>) -> EmbeddingTable {
        let ids = (0..rows.nrows()).map(|i| format!("s{i}")).collect();
        EmbeddingTable::new(rows, labels, ids).unwrap()
    }

    fn bank(rows: Array2<f32>) -> ClassTextBank {
        let names = (0..rows.nrows()).map(|i| format!("c{i}")).collect();
        ClassTextBank::new(rows, names, "A photo of {}").unwrap()
    }

    #[test]
    fn identical_and_orthogonal_alignment() {
        let t = table(array![[1.0f32, 2.0, 0.0], [0.0, 0.0, 3.0]], vec![0, 0]);
        let b = bank(array![[1.0f32, 2.0, 0.0]]);
        let sas = semantic_alignment(&t, &b, &AdapterPair::passthrough(3)).unwrap();
        assert!((sas[0] - 1.0).abs() < 1e-12);
        assert_eq!(sas[1], 0.0);
    }

    #[test]
    fn two_points_single_neighbor() {
        let f = array![[0.0, 0.0], [2.0, 0.0]];
        let (sds, k) = sample_diversity_from_features(f.view(), &[0, 0], 0.1).unwrap();
        assert_eq!(sds, vec![2.0, 2.0]);
        assert_eq!(k, vec![1]);
    }

    #[test]
    fn identical_class_has_zero_diversity() {
        let f = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [5.0, 0.0], [4.0, 0.0]];
        let (sds, _) = sample_diversity_from_features(f.view(), &[0, 0, 0, 1, 1], 0.5).unwrap();
        assert_eq!(&sds[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&sds[3..], &[1.0, 1.0]);
    }

    #[test]
    fn singleton_class_is_rejected() {
        let f = array![[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]];
        assert!(matches!(
            sample_diversity_from_features(f.view(), &[0, 0, 1], 0.1),
            Err(Error::ClassTooSmall { class: 1, size: 1 })
        ));
    }

    #[test]
    fn k_fraction_floors_and_clamps() {
        assert_eq!(neighbor_count(2, 0.1), 1);
        assert_eq!(neighbor_count(19, 0.1), 1);
        assert_eq!(neighbor_count(20, 0.1), 2);
        assert_eq!(neighbor_count(100, 0.1), 10);
        assert_eq!(neighbor_count(5, 1.0), 4);
    }

    #[test]
    fn ties_break_by_index() {
        // Sample 0 is equidistant from 1, 2 and 3.
        let f = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [9.0, 9.0]];
        let nb = same_class_neighbors(f.view(), &[0; 5], 0.4).unwrap();
        assert_eq!(nb.neighbors[0], vec![1, 2]);
    }

    #[test]
    fn isolated_outlier_has_class_max_diversity() {
        let mut rows = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 0.01;
            rows.extend([t.cos(), t.sin(), 0.0]);
        }
        rows.extend([0.0, 0.0, 5.0]);
        let f = Array2::from_shape_vec((31, 3), rows).unwrap();
        let (sds, _) = sample_diversity_from_features(f.view(), &[0; 31], 0.1).unwrap();
        let argmax = (0..31).max_by(|&a, &b| sds[a].total_cmp(&sds[b])).unwrap();
        assert_eq!(argmax, 30);
    }

    #[test]
    fn per_class_translation_invariance() {
        let f = array![[0.1, 0.2], [0.5, -0.3], [1.0, 1.5], [2.0, 0.0], [-1.0, -1.0], [0.3, 0.9]];
        let labels = [0, 0, 0, 1, 1, 1];
        let (base, _) = sample_diversity_from_features(f.view(), &labels, 0.5).unwrap();
        let mut shifted = f.clone();
        for i in 0..3 {
            shifted[[i, 0]] += 3.0;
            shifted[[i, 1]] -= 7.0;
        }
        let (moved, _) = sample_diversity_from_features(shifted.view(), &labels, 0.5).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_shapes() {
        let t = table(array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![0, 0, 0]);
        let s = ScoreVector::new(vec![0.5; 3], vec![0.25; 3], vec![1]).unwrap();
        let r = score_report(&s, &t).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.classes[0].sas.std, 0.0);
        assert_eq!(r.classes[0].sds.std, 0.0);
        assert_eq!(r.to_json().unwrap(), score_report(&s, &t).unwrap().to_json().unwrap());
        let short = ScoreVector::new(vec![0.5; 2], vec![0.25; 2], vec![1]).unwrap();
        assert!(matches!(score_report(&short, &t), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn scores_binary_round_trip() {
        let s = ScoreVector::new(vec![0.5, -0.25, 1.0], vec![0.0, 2.0, 0.125], vec![]).unwrap();
        let bytes = encode_scores(&s).unwrap();
        assert_eq!(&bytes[..4], b"SCR1");
        assert_eq!(decode_scores(&bytes).unwrap(), s);
        assert!(matches!(decode_scores(&bytes[..bytes.len() - 2]), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn csv_layout() {
        let t = table(array![[1.0f32, 0.0], [0.0, 1.0]], vec![0, 0]);
        let s = ScoreVector::new(vec![0.5, 1.0], vec![0.25, 0.0], vec![1]).unwrap();
        assert_eq!(scores_csv(&s, &t).unwrap(), "sample_id,label,sas,sds\ns0,0,0.5,0.25\ns1,0,1.0,0.0\n");
    }
}
