//! Synthetic cross-domain datasets: Gaussian class blobs, an affine domain
//! shift, label/feature/mixed corruption with ground-truth clean flags, and
//! CSV persistence with a JSON sidecar.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "ntda-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Target => write!(f, "target"),
        }
    }
}

/// A labeled dataset from one domain. Target labels exist for evaluation
/// only; the trainer never receives them (it is handed target features as a
/// bare matrix).
#[derive(Debug, Clone)]
pub struct DomainDataset {
    features: Matrix,
    labels: Vec<usize>,
    clean_flags: Option<Vec<bool>>,
    domain_tag: DomainTag,
    class_count: usize,
}

impl DomainDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        clean_flags: Option<Vec<bool>>,
        domain_tag: DomainTag,
        class_count: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if class_count < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(flags) = &clean_flags {
            if flags.len() != labels.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} clean flags for {} rows",
                    flags.len(),
                    labels.len()
                )));
            }
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(DomainDataset {
            features,
            labels,
            clean_flags,
            domain_tag,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_flags(&self) -> Option<&[bool]> {
        self.clean_flags.as_deref()
    }

    pub fn domain_tag(&self) -> DomainTag {
        self.domain_tag
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Parameters for `gen_blobs`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub class_sep: f64,
    pub seed: u64,
}

/// Class centers: for M <= input_dim, scaled standard basis vectors (the
/// vertices of a scaled simplex, pairwise distance exactly `class_sep`);
/// otherwise evenly spaced on a circle in the first two coordinates with
/// adjacent separation `class_sep`.
pub fn blob_centers(classes: usize, input_dim: usize, class_sep: f64) -> Matrix {
    let mut centers = Matrix::zeros(classes, input_dim);
    if classes <= input_dim {
        let r = class_sep / 2.0f64.sqrt();
        for j in 0..classes {
            centers.set(j, j, r);
        }
    } else {
        let radius = class_sep / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        for j in 0..classes {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / classes as f64;
            centers.set(j, 0, radius * angle.cos());
            centers.set(j, 1, radius * angle.sin());
        }
    }
    centers
}

/// Balanced isotropic unit-variance Gaussian clusters, deterministic per seed.
pub fn gen_blobs(spec: &BlobSpec, tag: DomainTag) -> Result<DomainDataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.input_dim < 2 {
        return Err(Error::Config(format!(
            "need at least 2 input dimensions, got {}",
            spec.input_dim
        )));
    }
    let centers = blob_centers(spec.classes, spec.input_dim, spec.class_sep);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let center = centers.row(class);
        for _ in 0..spec.per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + z);
            }
            labels.push(class);
        }
    }
    DomainDataset::new(
        Matrix::from_vec(n, spec.input_dim, data)?,
        labels,
        None,
        tag,
        spec.classes,
    )
}

/// An affine domain shift: `x -> scale * R(theta) x + translation`, with the
/// rotation acting on the first two coordinates only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShiftSpec {
    pub rotation_degrees: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl ShiftSpec {
    pub fn identity(input_dim: usize) -> Self {
        ShiftSpec {
            rotation_degrees: 0.0,
            translation: vec![0.0; input_dim],
            scale: 1.0,
        }
    }

    /// Translation along the all-ones direction with the given euclidean norm.
    pub fn uniform_translation(input_dim: usize, norm: f64) -> Vec<f64> {
        let c = norm / (input_dim as f64).sqrt();
        vec![c; input_dim]
    }
}

pub fn apply_shift(ds: &DomainDataset, shift: &ShiftSpec) -> Result<DomainDataset> {
    if !(shift.scale > 0.0) {
        return Err(Error::Config(format!("shift scale must be > 0, got {}", shift.scale)));
    }
    let dim = ds.input_dim();
    if shift.translation.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "translation has {} entries for {}-dim data",
            shift.translation.len(),
            dim
        )));
    }
    if dim < 2 && shift.rotation_degrees != 0.0 {
        return Err(Error::Config("rotation needs at least 2 coordinates".into()));
    }
    let theta = shift.rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut features = ds.features.clone();
    for i in 0..features.rows() {
        let row = features.row_mut(i);
        if dim >= 2 {
            let (x0, x1) = (row[0], row[1]);
            row[0] = cos * x0 - sin * x1;
            row[1] = sin * x0 + cos * x1;
        }
        for (v, t) in row.iter_mut().zip(&shift.translation) {
            *v = shift.scale * *v + t;
        }
    }
    DomainDataset::new(
        features,
        ds.labels.clone(),
        ds.clean_flags.clone(),
        ds.domain_tag,
        ds.class_count,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    None,
    Label,
    Feature,
    Mixed,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorruptionKind::None),
            "label" => Ok(CorruptionKind::Label),
            "feature" => Ok(CorruptionKind::Feature),
            "mixed" => Ok(CorruptionKind::Mixed),
            other => Err(Error::Config(format!("unknown corruption kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CorruptionKind::None => "none",
            CorruptionKind::Label => "label",
            CorruptionKind::Feature => "feature",
            CorruptionKind::Mixed => "mixed",
        };
        write!(f, "{s}")
    }
}

/// The corruption protocol applied to a source dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub p_noise: f64,
    pub seed: u64,
    /// When true, label redraws exclude the original class, so the realized
    /// label-change rate equals the nominal rate instead of `p (M-1) / M`.
    #[serde(default)]
    pub exclude_original: bool,
}

pub fn corrupt(ds: &DomainDataset, spec: &CorruptionSpec) -> Result<DomainDataset> {
    match spec.kind {
        CorruptionKind::None => Ok(ds.clone()),
        CorruptionKind::Label => {
            corrupt_labels_opts(ds, spec.p_noise, spec.seed, spec.exclude_original)
        }
        CorruptionKind::Feature => corrupt_features(ds, spec.p_noise, spec.seed),
        CorruptionKind::Mixed => {
            corrupt_mixed_opts(ds, spec.p_noise, spec.seed, spec.exclude_original)
        }
    }
}

fn check_p(p_noise: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(Error::Config(format!("p_noise must be in [0, 1], got {p_noise}")));
    }
    Ok(())
}

fn redraw_label(
    current: usize,
    class_count: usize,
    exclude_original: bool,
    rng: &mut ChaCha8Rng,
) -> usize {
    if exclude_original {
        let draw = rng.random_range(0..class_count - 1);
        if draw >= current {
            draw + 1
        } else {
            draw
        }
    } else {
        rng.random_range(0..class_count)
    }
}

/// Per-coordinate statistics of the pristine dataset that drive feature
/// corruption: the additive noise scale (2x std) and the saturation bounds.
struct FeatureStats {
    noise_sigma: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

fn feature_stats(features: &Matrix) -> FeatureStats {
    let (n, d) = features.shape();
    let mut mean = vec![0.0; d];
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (k, &v) in features.row(i).iter().enumerate() {
            mean[k] += v;
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (k, &v) in features.row(i).iter().enumerate() {
            var[k] += (v - mean[k]).powi(2);
        }
    }
    let noise_sigma = var.iter().map(|&v| 2.0 * (v / n as f64).sqrt()).collect();
    FeatureStats {
        noise_sigma,
        min,
        max,
    }
}

/// Rate at which individual coordinates of a feature-corrupted sample get
/// saturated to the global per-coordinate min or max.
const SATURATION_RATE: f64 = 0.1;

fn damage_features(row: &mut [f64], stats: &FeatureStats, rng: &mut ChaCha8Rng) {
    for (k, v) in row.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        *v += stats.noise_sigma[k] * z;
    }
    for (k, v) in row.iter_mut().enumerate() {
        if rng.random::<f64>() < SATURATION_RATE {
            *v = if rng.random::<f64>() < 0.5 {
                stats.min[k]
            } else {
                stats.max[k]
            };
        }
    }
}

fn merged_flags(ds: &DomainDataset, still_clean: Vec<bool>) -> Vec<bool> {
    match &ds.clean_flags {
        Some(prev) => prev.iter().zip(still_clean).map(|(&a, b)| a && b).collect(),
        None => still_clean,
    }
}

/// Redraws each label uniformly with probability `p_noise`; the original
/// class stays in the draw, so the realized change rate is `p (M-1) / M`.
pub fn corrupt_labels(ds: &DomainDataset, p_noise: f64, seed: u64) -> Result<DomainDataset> {
    corrupt_labels_opts(ds, p_noise, seed, false)
}

pub fn corrupt_labels_opts(
    ds: &DomainDataset,
    p_noise: f64,
    seed: u64,
    exclude_original: bool,
) -> Result<DomainDataset> {
    check_p(p_noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = ds.labels.clone();
    let mut still_clean = vec![true; ds.len()];
    for i in 0..ds.len() {
        if rng.random::<f64>() < p_noise {
            let new = redraw_label(labels[i], ds.class_count, exclude_original, &mut rng);
            // A redraw that lands on the original class leaves the sample clean.
            still_clean[i] = new == labels[i];
            labels[i] = new;
        }
    }
    let flags = merged_flags(ds, still_clean);
    DomainDataset::new(
        ds.features.clone(),
        labels,
        Some(flags),
        ds.domain_tag,
        ds.class_count,
    )
}

/// Damages each sample's features with probability `p_noise`: additive
/// zero-mean Gaussian noise at 2x the per-coordinate std, then each
/// coordinate independently saturated to the global per-coordinate min or
/// max (fair coin) at rate 0.1.
pub fn corrupt_features(ds: &DomainDataset, p_noise: f64, seed: u64) -> Result<DomainDataset> {
    check_p(p_noise)?;
    if ds.is_empty() {
        return Err(Error::EmptyBatch("corrupt_features on empty dataset".into()));
    }
    let stats = feature_stats(&ds.features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = ds.features.clone();
    let mut still_clean = vec![true; ds.len()];
    for i in 0..ds.len() {
        if rng.random::<f64>() < p_noise {
            damage_features(features.row_mut(i), &stats, &mut rng);
            still_clean[i] = false;
        }
    }
    let flags = merged_flags(ds, still_clean);
    DomainDataset::new(
        features,
        ds.labels.clone(),
        Some(flags),
        ds.domain_tag,
        ds.class_count,
    )
}

/// Label corruption at rate `p_noise / 2` and feature corruption at rate
/// `p_noise / 2`, drawn independently per sample; a sample hit by both is
/// flagged unclean once.
pub fn corrupt_mixed(ds: &DomainDataset, p_noise: f64, seed: u64) -> Result<DomainDataset> {
    corrupt_mixed_opts(ds, p_noise, seed, false)
}

pub fn corrupt_mixed_opts(
    ds: &DomainDataset,
    p_noise: f64,
    seed: u64,
    exclude_original: bool,
) -> Result<DomainDataset> {
    check_p(p_noise)?;
    if ds.is_empty() {
        return Err(Error::EmptyBatch("corrupt_mixed on empty dataset".into()));
    }
    let half = p_noise / 2.0;
    let stats = feature_stats(&ds.features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits: Vec<(bool, bool)> = (0..ds.len())
        .map(|_| {
            let label_hit = rng.random::<f64>() < half;
            let feature_hit = rng.random::<f64>() < half;
            (label_hit, feature_hit)
        })
        .collect();
    let mut features = ds.features.clone();
    let mut labels = ds.labels.clone();
    let mut still_clean = vec![true; ds.len()];
    for (i, &(label_hit, feature_hit)) in hits.iter().enumerate() {
        if label_hit {
            let new = redraw_label(labels[i], ds.class_count, exclude_original, &mut rng);
            if new != labels[i] {
                still_clean[i] = false;
            }
            labels[i] = new;
        }
        if feature_hit {
            damage_features(features.row_mut(i), &stats, &mut rng);
            still_clean[i] = false;
        }
    }
    let flags = merged_flags(ds, still_clean);
    DomainDataset::new(features, labels, Some(flags), ds.domain_tag, ds.class_count)
}

/// Everything that produced a dataset, recorded in its JSON sidecar.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    schema: String,
    domain: DomainTag,
    class_count: usize,
    input_dim: usize,
    rows: usize,
    has_clean_flags: bool,
    #[serde(default)]
    provenance: Provenance,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes the dataset as CSV (`f0..f{k},label,clean`) plus a JSON sidecar
/// holding the schema, shape, and provenance. Floats are written in shortest
/// round-trip form, so save/load is bit-exact.
pub fn save(path: &Path, ds: &DomainDataset, provenance: &Provenance) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = ds.input_dim();
    let mut header = String::new();
    for k in 0..dim {
        header.push_str(&format!("f{k},"));
    }
    header.push_str("label,clean");
    writeln!(out, "{header}")?;
    for i in 0..ds.len() {
        let mut line = String::new();
        for v in ds.features.row(i) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&ds.labels[i].to_string());
        line.push(',');
        if let Some(flags) = &ds.clean_flags {
            line.push(if flags[i] { '1' } else { '0' });
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;

    let sidecar = DatasetSidecar {
        schema: DATASET_SCHEMA.to_string(),
        domain: ds.domain_tag,
        class_count: ds.class_count,
        input_dim: dim,
        rows: ds.len(),
        has_clean_flags: ds.clean_flags.is_some(),
        provenance: provenance.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Loads a dataset saved by `save`. Any malformed content fails with the
/// offending line number and no partial dataset is returned.
pub fn load(path: &Path) -> Result<DomainDataset> {
    let sidecar_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Config(format!(
            "missing dataset sidecar {}: {e}",
            sidecar_path(path).display()
        ))
    })?;
    let sidecar: DatasetSidecar = serde_json::from_str(&sidecar_text)?;
    if sidecar.schema != DATASET_SCHEMA {
        return Err(Error::Config(format!(
            "unsupported dataset schema {:?}, expected {:?}",
            sidecar.schema, DATASET_SCHEMA
        )));
    }

    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty dataset file"))?;
    let expected_cols = sidecar.input_dim + 2;
    if header.split(',').count() != expected_cols {
        return Err(parse_err(
            1,
            format!(
                "header has {} columns, expected {expected_cols}",
                header.split(',').count()
            ),
        ));
    }

    let mut data = Vec::with_capacity(sidecar.rows * sidecar.input_dim);
    let mut labels = Vec::with_capacity(sidecar.rows);
    let mut flags: Vec<bool> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(parse_err(
                line_no,
                format!("{} fields, expected {expected_cols}", fields.len()),
            ));
        }
        for f in &fields[..sidecar.input_dim] {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(line_no, format!("bad float {f:?}: {e}")))?;
            data.push(v);
        }
        let label: usize = fields[sidecar.input_dim]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad label: {e}")))?;
        if label >= sidecar.class_count {
            return Err(parse_err(
                line_no,
                format!("label {label} out of range for {} classes", sidecar.class_count),
            ));
        }
        labels.push(label);
        let clean_field = fields[sidecar.input_dim + 1];
        match (sidecar.has_clean_flags, clean_field) {
            (true, "1") => flags.push(true),
            (true, "0") => flags.push(false),
            (true, other) => {
                return Err(parse_err(line_no, format!("bad clean flag {other:?}")));
            }
            (false, "") => {}
            (false, other) => {
                return Err(parse_err(
                    line_no,
                    format!("unexpected clean flag {other:?} in flagless dataset"),
                ));
            }
        }
    }
    if labels.len() != sidecar.rows {
        return Err(parse_err(
            labels.len() + 1,
            format!("{} data rows, sidecar declares {}", labels.len(), sidecar.rows),
        ));
    }
    DomainDataset::new(
        Matrix::from_vec(labels.len(), sidecar.input_dim, data)?,
        labels,
        sidecar.has_clean_flags.then_some(flags),
        sidecar.domain,
        sidecar.class_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec(seed: u64) -> BlobSpec {
        BlobSpec {
            classes: 4,
            per_class: 125,
            input_dim: 6,
            class_sep: 10.0,
            seed,
        }
    }

    #[test]
    fn empty_blob_dataset() {
        let spec = BlobSpec {
            per_class: 0,
            ..blob_spec(0)
        };
        let ds = gen_blobs(&spec, DomainTag::Source).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.input_dim(), 6);
    }

    #[test]
    fn well_separated_blobs_are_nearest_centroid_separable() {
        let spec = blob_spec(1);
        let train = gen_blobs(&spec, DomainTag::Source).unwrap();
        let fresh = gen_blobs(&BlobSpec { seed: 2, ..spec }, DomainTag::Source).unwrap();

        // Nearest-centroid oracle fitted on the training draw.
        let mut centroids = vec![vec![0.0; train.input_dim()]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for i in 0..train.len() {
            let y = train.labels()[i];
            counts[y] += 1;
            for (c, v) in centroids[y].iter_mut().zip(train.features().row(i)) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut correct = 0;
        for i in 0..fresh.len() {
            let row = fresh.features().row(i);
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            if best.1 == fresh.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, fresh.len());
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = gen_blobs(&blob_spec(7), DomainTag::Source).unwrap();
        let b = gen_blobs(&blob_spec(7), DomainTag::Source).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn identity_shift_is_noop() {
        let ds = gen_blobs(&blob_spec(3), DomainTag::Target).unwrap();
        let shifted = apply_shift(&ds, &ShiftSpec::identity(6)).unwrap();
        assert_eq!(shifted.features(), ds.features());
        assert_eq!(shifted.labels(), ds.labels());
    }

    #[test]
    fn full_turn_rotation_restores_first_two_coordinates() {
        let ds = gen_blobs(&blob_spec(4), DomainTag::Source).unwrap();
        let shift = ShiftSpec {
            rotation_degrees: 360.0,
            translation: vec![0.0; 6],
            scale: 1.0,
        };
        let shifted = apply_shift(&ds, &shift).unwrap();
        for i in 0..ds.len() {
            for k in 0..2 {
                let (a, b) = (ds.features().get(i, k), shifted.features().get(i, k));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pure_rotation_preserves_norms() {
        let ds = gen_blobs(&blob_spec(5), DomainTag::Source).unwrap();
        let shift = ShiftSpec {
            rotation_degrees: 73.0,
            translation: vec![0.0; 6],
            scale: 1.0,
        };
        let shifted = apply_shift(&ds, &shift).unwrap();
        for i in 0..ds.len() {
            let n0: f64 = ds.features().row(i).iter().map(|v| v * v).sum();
            let n1: f64 = shifted.features().row(i).iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() <= 1e-9);
        }
    }

    #[test]
    fn shift_rejects_bad_translation() {
        let ds = gen_blobs(&blob_spec(6), DomainTag::Source).unwrap();
        let shift = ShiftSpec {
            rotation_degrees: 0.0,
            translation: vec![0.0; 3],
            scale: 1.0,
        };
        assert!(matches!(
            apply_shift(&ds, &shift),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn label_corruption_p0_is_identity_with_flags() {
        let ds = gen_blobs(&blob_spec(8), DomainTag::Source).unwrap();
        let out = corrupt_labels(&ds, 0.0, 9).unwrap();
        assert_eq!(out.labels(), ds.labels());
        assert!(out.clean_flags().unwrap().iter().all(|&f| f));
    }

    #[test]
    fn label_corruption_rate_matches_monte_carlo() {
        let ds = gen_blobs(&blob_spec(10), DomainTag::Source).unwrap();
        let mut changed = 0usize;
        let mut total = 0usize;
        for seed in 0..50 {
            let out = corrupt_labels(&ds, 1.0, seed).unwrap();
            changed += out
                .labels()
                .iter()
                .zip(ds.labels())
                .filter(|(a, b)| a != b)
                .count();
            total += ds.len();
        }
        let rate = changed as f64 / total as f64;
        // p (M-1)/M = 0.75 with the original class kept in the draw.
        assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn label_corruption_flags_exactly_the_changes() {
        let ds = gen_blobs(&blob_spec(11), DomainTag::Source).unwrap();
        let out = corrupt_labels(&ds, 0.5, 12).unwrap();
        let flags = out.clean_flags().unwrap();
        for i in 0..ds.len() {
            assert_eq!(flags[i], out.labels()[i] == ds.labels()[i]);
        }
    }

    #[test]
    fn label_corruption_exclude_original_changes_at_full_rate() {
        let ds = gen_blobs(&blob_spec(13), DomainTag::Source).unwrap();
        let out = corrupt_labels_opts(&ds, 1.0, 14, true).unwrap();
        assert!(out.labels().iter().zip(ds.labels()).all(|(a, b)| a != b));
    }

    #[test]
    fn feature_corruption_p0_is_identity() {
        let ds = gen_blobs(&blob_spec(15), DomainTag::Source).unwrap();
        let out = corrupt_features(&ds, 0.0, 16).unwrap();
        assert_eq!(out.features(), ds.features());
        assert!(out.clean_flags().unwrap().iter().all(|&f| f));
    }

    #[test]
    fn feature_corruption_touches_exactly_the_flagged_rows() {
        let ds = gen_blobs(&blob_spec(17), DomainTag::Source).unwrap();
        let out = corrupt_features(&ds, 0.4, 18).unwrap();
        let flags = out.clean_flags().unwrap();
        let mut corrupted = 0;
        for i in 0..ds.len() {
            let same = out.features().row(i) == ds.features().row(i);
            assert_eq!(same, flags[i], "row {i}");
            if !flags[i] {
                corrupted += 1;
            }
        }
        assert!(corrupted > 0);
        assert_eq!(out.labels(), ds.labels());
    }

    #[test]
    fn feature_corruption_rate_matches_monte_carlo() {
        let ds = gen_blobs(&blob_spec(19), DomainTag::Source).unwrap();
        let mut hit = 0usize;
        let mut total = 0usize;
        for seed in 0..50 {
            let out = corrupt_features(&ds, 0.3, seed).unwrap();
            hit += out.clean_flags().unwrap().iter().filter(|&&f| !f).count();
            total += ds.len();
        }
        let rate = hit as f64 / total as f64;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn mixed_corruption_mechanisms_fire_at_half_rate() {
        let ds = gen_blobs(&blob_spec(20), DomainTag::Source).unwrap();
        let mut label_hits = 0usize;
        let mut feature_hits = 0usize;
        let mut total = 0usize;
        for seed in 0..50 {
            // Exclude the original class so every label hit is observable.
            let out = corrupt_mixed_opts(&ds, 0.4, seed, true).unwrap();
            for i in 0..ds.len() {
                if out.labels()[i] != ds.labels()[i] {
                    label_hits += 1;
                }
                if out.features().row(i) != ds.features().row(i) {
                    feature_hits += 1;
                }
            }
            total += ds.len();
        }
        let label_rate = label_hits as f64 / total as f64;
        let feature_rate = feature_hits as f64 / total as f64;
        assert!((label_rate - 0.2).abs() <= 0.02, "label rate {label_rate}");
        assert!((feature_rate - 0.2).abs() <= 0.02, "feature rate {feature_rate}");
    }

    #[test]
    fn mixed_corruption_double_hits_flag_once() {
        let ds = gen_blobs(&blob_spec(21), DomainTag::Source).unwrap();
        let out = corrupt_mixed_opts(&ds, 1.0, 22, true).unwrap();
        let flags = out.clean_flags().unwrap();
        let mut double = 0;
        for i in 0..ds.len() {
            let label_changed = out.labels()[i] != ds.labels()[i];
            let features_changed = out.features().row(i) != ds.features().row(i);
            if label_changed && features_changed {
                double += 1;
                assert!(!flags[i]);
            }
        }
        // Both mechanisms fire at rate 0.5 over 500 samples, so double hits
        // are effectively certain.
        assert!(double > 0, "no double-hit sample found");
        assert_eq!(flags.len(), ds.len());
    }

    #[test]
    fn corruption_preserves_shape_and_tag() {
        let ds = gen_blobs(&blob_spec(23), DomainTag::Source).unwrap();
        for out in [
            corrupt_labels(&ds, 0.3, 1).unwrap(),
            corrupt_features(&ds, 0.3, 2).unwrap(),
            corrupt_mixed(&ds, 0.3, 3).unwrap(),
        ] {
            assert_eq!(out.len(), ds.len());
            assert_eq!(out.input_dim(), ds.input_dim());
            assert_eq!(out.domain_tag(), ds.domain_tag());
            assert_eq!(out.class_count(), ds.class_count());
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.csv");
        let ds = corrupt_mixed(&gen_blobs(&blob_spec(24), DomainTag::Source).unwrap(), 0.4, 25)
            .unwrap();
        let prov = Provenance {
            blobs: Some(blob_spec(24)),
            shift: None,
            corruption: Some(CorruptionSpec {
                kind: CorruptionKind::Mixed,
                p_noise: 0.4,
                seed: 25,
                exclude_original: false,
            }),
        };
        save(&path, &ds, &prov).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.clean_flags(), ds.clean_flags());
        assert_eq!(back.domain_tag(), ds.domain_tag());
        assert_eq!(back.class_count(), ds.class_count());
    }

    #[test]
    fn load_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let ds = gen_blobs(
            &BlobSpec {
                classes: 2,
                per_class: 3,
                input_dim: 2,
                class_sep: 5.0,
                seed: 0,
            },
            DomainTag::Source,
        )
        .unwrap();
        save(&path, &ds, &Provenance::default()).unwrap();
        // Rewrite one label to the class count.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let fields: Vec<&str> = lines[2].split(',').collect();
        lines[2] = format!("{},{},{}", fields[..2].join(","), 2, fields[3]);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("label"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.csv");
        let ds = gen_blobs(&blob_spec(26), DomainTag::Source).unwrap();
        save(&path, &ds, &Provenance::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(ds.len() / 2).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(load(&path), Err(Error::Parse { .. })));
    }
}
