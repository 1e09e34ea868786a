//! Datasets: the synthetic Gaussian benchmark, precomputed embedding files
//! and the per-epoch candidate batching of the outlier pool.
//!
//! Class labels are `1..=K` everywhere; outlier rows carry label `-1` in
//! embedding files.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// ID feature rows with class labels in `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<u32>,
}

impl LabeledBatch {
    pub fn new(features: Matrix, labels: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Geometry of the synthetic benchmark.
///
/// `K` isotropic ID Gaussians sit on a regular polygon of side
/// `6·id_sigma` centred at the origin. Outliers are small Gaussian
/// micro-clusters whose centres lie in the annulus
/// `[ood_radius, ood_radius + ood_radius_width]`; pool centres are evenly
/// spaced in angle and test centres sit at the interleaved angles.
/// With `dim > 2` the class polygon spans the first two coordinates and
/// outlier directions are drawn uniformly on the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub dim: usize,
    pub classes: usize,
    pub id_sigma: f64,
    pub id_train_per_class: usize,
    pub id_test_per_class: usize,
    pub ood_pool_clusters: usize,
    pub ood_test_clusters: usize,
    pub ood_sigma: f64,
    pub ood_per_cluster: usize,
    pub ood_radius: f64,
    pub ood_radius_width: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 3,
            id_sigma: 1.0,
            id_train_per_class: 500,
            id_test_per_class: 500,
            ood_pool_clusters: 24,
            ood_test_clusters: 24,
            ood_sigma: 0.2,
            ood_per_cluster: 50,
            ood_radius: 16.0,
            ood_radius_width: 8.0,
        }
    }
}

impl ToyConfig {
    /// Distance from the origin to each class mean.
    pub fn class_radius(&self) -> f64 {
        let side = 6.0 * self.id_sigma;
        match self.classes {
            0 | 1 => 0.0,
            k => side / (2.0 * (PI / k as f64).sin()),
        }
    }

    /// Radius that holds essentially all ID mass: class radius plus 3σ.
    pub fn id_extent(&self) -> f64 {
        self.class_radius() + 3.0 * self.id_sigma
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("toy dim {} must be at least 2", self.dim)));
        }
        if self.classes == 0 {
            return Err(Error::Config("toy benchmark needs at least one class".into()));
        }
        if !(self.id_sigma > 0.0) || !(self.ood_sigma > 0.0) {
            return Err(Error::Config("Gaussian sigmas must be positive".into()));
        }
        if !(self.ood_radius > self.id_extent()) {
            return Err(Error::Config(format!(
                "ood_radius {} must exceed the ID extent {:.3}",
                self.ood_radius,
                self.id_extent()
            )));
        }
        if !(self.ood_radius_width >= 0.0) {
            return Err(Error::Config("ood_radius_width must be >= 0".into()));
        }
        if self.ood_pool_clusters == 0 || self.ood_per_cluster == 0 {
            return Err(Error::Config("outlier pool must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBenchmark {
    pub num_classes: usize,
    pub id_train: LabeledBatch,
    pub id_test: LabeledBatch,
    pub ood_pool: Matrix,
    pub ood_test: Matrix,
    pub class_means: Matrix,
    pub pool_centers: Matrix,
    pub test_centers: Matrix,
}

fn gaussian_rows(rng: &mut Rng, center: &[f64], sigma: f64, n: usize, out: &mut Vec<f64>) {
    for _ in 0..n {
        for &c in center {
            out.push(c + sigma * rng.normal());
        }
    }
}

/// In two dimensions centres sit at evenly spaced angles shifted by
/// `offset` steps; in more dimensions directions are uniform on the sphere.
fn ring_centers(rng: &mut Rng, count: usize, offset: f64, cfg: &ToyConfig) -> Matrix {
    let d = cfg.dim;
    let mut data = Vec::with_capacity(count * d);
    for j in 0..count {
        let radius = cfg.ood_radius + cfg.ood_radius_width * rng.uniform();
        if d == 2 {
            let angle = 2.0 * PI * (j as f64 + offset) / count as f64;
            data.push(radius * angle.cos());
            data.push(radius * angle.sin());
        } else {
            let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(dir.iter().map(|v| radius * v / norm));
        }
    }
    Matrix::from_vec(count, d, data).expect("finite centres")
}

/// Deterministic synthetic benchmark.
pub fn generate_toy(seed: u64, cfg: &ToyConfig) -> Result<ToyBenchmark> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let k = cfg.classes;
    let r = cfg.class_radius();
    let d = cfg.dim;
    let mut class_means = Matrix::zeros(k, d);
    for c in 0..k {
        let angle = PI / 2.0 + 2.0 * PI * c as f64 / k as f64;
        class_means.set(c, 0, r * angle.cos());
        class_means.set(c, 1, r * angle.sin());
    }

    let make_id = |stream: u64, per_class: usize| -> Result<LabeledBatch> {
        let mut rng = root.split(stream);
        let mut data = Vec::with_capacity(k * per_class * d);
        let mut labels = Vec::with_capacity(k * per_class);
        for c in 0..k {
            gaussian_rows(&mut rng, class_means.row(c), cfg.id_sigma, per_class, &mut data);
            labels.extend(std::iter::repeat_n(c as u32 + 1, per_class));
        }
        LabeledBatch::new(Matrix::from_vec(k * per_class, d, data)?, labels)
    };
    let id_train = make_id(1, cfg.id_train_per_class)?;
    let id_test = make_id(2, cfg.id_test_per_class)?;

    let mut center_rng = root.split(3);
    let pool_centers = ring_centers(&mut center_rng, cfg.ood_pool_clusters, 0.0, cfg);
    let test_centers = ring_centers(&mut center_rng, cfg.ood_test_clusters, 0.5, cfg);

    let make_ood = |stream: u64, centers: &Matrix| -> Result<Matrix> {
        let mut rng = root.split(stream);
        let mut data = Vec::with_capacity(centers.rows() * cfg.ood_per_cluster * d);
        for c in centers.row_iter() {
            gaussian_rows(&mut rng, c, cfg.ood_sigma, cfg.ood_per_cluster, &mut data);
        }
        Matrix::from_vec(centers.rows() * cfg.ood_per_cluster, d, data)
    };
    let ood_pool = make_ood(4, &pool_centers)?;
    let ood_test = make_ood(5, &test_centers)?;

    Ok(ToyBenchmark {
        num_classes: k,
        id_train,
        id_test,
        ood_pool,
        ood_test,
        class_means,
        pool_centers,
        test_centers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    IdTrain,
    IdTest,
    OodPool,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::IdTrain, Split::IdTest, Split::OodPool, Split::OodTest];

    pub fn tag(self) -> u8 {
        match self {
            Split::IdTrain => 0,
            Split::IdTest => 1,
            Split::OodPool => 2,
            Split::OodTest => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        Split::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::IdTrain => "id-train",
            Split::IdTest => "id-test",
            Split::OodPool => "ood-pool",
            Split::OodTest => "ood-test",
        }
    }

    pub fn is_id(self) -> bool {
        matches!(self, Split::IdTrain | Split::IdTest)
    }

    fn parse(s: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .or_else(|| s.parse::<u8>().ok().and_then(Split::from_tag))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Precomputed feature rows tagged by split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    features: Matrix,
    labels: Vec<i32>,
    splits: Vec<Split>,
}

const EMB_MAGIC: &[u8; 8] = b"DOSEMB1\0";

impl EmbeddingDataset {
    pub fn new(dim: usize, features: Matrix, labels: Vec<i32>, splits: Vec<Split>) -> Result<Self> {
        if features.cols() != dim && features.rows() > 0 {
            return Err(Error::Shape(format!(
                "features have {} columns, dataset dim is {dim}",
                features.cols()
            )));
        }
        if labels.len() != features.rows() || splits.len() != features.rows() {
            return Err(Error::Shape("labels/splits do not match row count".into()));
        }
        for (i, (&l, &s)) in labels.iter().zip(&splits).enumerate() {
            check_label(l, s).map_err(|m| Error::parse(format!("row {i}"), m))?;
        }
        Ok(Self {
            dim,
            features,
            labels,
            splits,
        })
    }

    pub fn from_toy(toy: &ToyBenchmark) -> Self {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (split, batch) in [(Split::IdTrain, &toy.id_train), (Split::IdTest, &toy.id_test)] {
            rows.extend_from_slice(batch.features.as_slice());
            labels.extend(batch.labels.iter().map(|&l| l as i32));
            splits.extend(std::iter::repeat_n(split, batch.len()));
        }
        for (split, m) in [(Split::OodPool, &toy.ood_pool), (Split::OodTest, &toy.ood_test)] {
            rows.extend_from_slice(m.as_slice());
            labels.extend(std::iter::repeat_n(-1, m.rows()));
            splits.extend(std::iter::repeat_n(split, m.rows()));
        }
        let n = labels.len();
        Self {
            dim: toy.class_means.cols(),
            features: Matrix::from_vec(n, toy.class_means.cols(), rows).expect("toy rows are finite"),
            labels,
            splits,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest ID label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0).max(0) as usize
    }

    fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn features_of(&self, split: Split) -> Matrix {
        let m = self.features.select_rows(&self.indices_of(split));
        if m.rows() == 0 {
            Matrix::zeros(0, self.dim)
        } else {
            m
        }
    }

    pub fn labeled(&self, split: Split) -> LabeledBatch {
        let idx = self.indices_of(split);
        LabeledBatch {
            features: self.features_of(split),
            labels: idx.iter().map(|&i| self.labels[i] as u32).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (5 + 8 * self.dim));
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            out.push(self.splits[i].tag());
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in self.features.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::parse(format!("byte offset {offset}"), msg);
        if bytes.len() < 16 || &bytes[..8] != EMB_MAGIC {
            return Err(fail(0, "missing DOSEMB1 header".into()));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let rows = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fail(8, "dimension must be positive".into()));
        }
        let row_len = 5 + 8 * dim;
        let body = bytes.len() - 16;
        if body != rows * row_len {
            return Err(fail(
                16 + (body / row_len) * row_len,
                format!("header promises {rows} rows of dim {dim} but {body} body bytes follow"),
            ));
        }
        let mut data = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut splits = Vec::with_capacity(rows);
        for r in 0..rows {
            let off = 16 + r * row_len;
            let split = Split::from_tag(bytes[off])
                .ok_or_else(|| fail(off, format!("row {r}: unknown split tag {}", bytes[off])))?;
            let label = i32::from_le_bytes(bytes[off + 1..off + 5].try_into().unwrap());
            check_label(label, split).map_err(|m| fail(off + 1, format!("row {r}: {m}")))?;
            for c in 0..dim {
                let p = off + 5 + 8 * c;
                let v = f64::from_le_bytes(bytes[p..p + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(fail(p, format!("row {r}: non-finite value")));
                }
                data.push(v);
            }
            labels.push(label);
            splits.push(split);
        }
        Ok(Self {
            dim,
            features: Matrix::from_vec(rows, dim, data)?,
            labels,
            splits,
        })
    }

    /// CSV with header `split,label,f0..f{d-1}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,label");
        for c in 0..self.dim {
            s.push_str(&format!(",f{c}"));
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&format!("{},{}", self.splits[i], self.labels[i]));
            for v in self.features.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "missing header"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "split" || cols[1] != "label" {
            return Err(Error::parse("line 1", "header must be split,label,f0,..."));
        }
        for (c, name) in cols[2..].iter().enumerate() {
            if *name != format!("f{c}") {
                return Err(Error::parse("line 1", format!("expected column f{c}, found '{name}'")));
            }
        }
        let dim = cols.len() - 2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (ln, line) in lines {
            let at = || format!("line {}", ln + 1);
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(Error::parse(
                    at(),
                    format!("row has {} features, expected {dim}", fields.len().saturating_sub(2)),
                ));
            }
            let split = Split::parse(fields[0])
                .ok_or_else(|| Error::parse(at(), format!("unknown split '{}'", fields[0])))?;
            let label: i32 = fields[1]
                .parse()
                .map_err(|_| Error::parse(at(), format!("bad label '{}'", fields[1])))?;
            check_label(label, split).map_err(|m| Error::parse(at(), m))?;
            for f in &fields[2..] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(at(), format!("bad value '{f}'")))?;
                if !v.is_finite() {
                    return Err(Error::parse(at(), "non-finite value"));
                }
                data.push(v);
            }
            labels.push(label);
            splits.push(split);
        }
        let n = labels.len();
        Ok(Self {
            dim,
            features: Matrix::from_vec(n, dim, data)?,
            labels,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            f.write_all(self.to_csv().as_bytes())?;
        } else {
            f.write_all(&self.to_bytes())?;
        }
        Ok(())
    }

    /// Reads either format: binary when the file starts with the magic,
    /// CSV otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let located = |e: Error| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        };
        if bytes.starts_with(b"DOSEMB") {
            Self::from_bytes(&bytes).map_err(located)
        } else {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::parse(path.display().to_string(), "neither DOSEMB1 nor UTF-8 CSV"))?;
            Self::from_csv(text).map_err(located)
        }
    }
}

fn check_label(label: i32, split: Split) -> std::result::Result<(), String> {
    match (split.is_id(), label) {
        (true, l) if l >= 1 => Ok(()),
        (false, -1) => Ok(()),
        (true, l) => Err(format!("ID row needs a label >= 1, found {l}")),
        (false, l) => Err(format!("outlier row must have label -1, found {l}")),
    }
}

/// One epoch of candidate groups: the pool is shuffled and cut into
/// consecutive groups of `candidate_size`; a trailing group smaller than
/// `min_size` is dropped.
pub fn candidate_batches(
    pool_rows: usize,
    candidate_size: usize,
    min_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if candidate_size == 0 || candidate_size > pool_rows {
        return Err(Error::InvalidRequest(format!(
            "candidate size {candidate_size} does not fit a pool of {pool_rows}"
        )));
    }
    if candidate_size < min_size {
        return Err(Error::InvalidRequest(format!(
            "candidate size {candidate_size} is below the cluster count {min_size}"
        )));
    }
    let mut order: Vec<usize> = (0..pool_rows).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(candidate_size)
        .filter(|c| c.len() >= min_size.max(1))
        .map(<[usize]>::to_vec)
        .collect())
}
