//! Experiment configuration, the outlier-exposure training loop, multi-run
//! comparison and cluster-histogram analysis.
//!
//! Every random draw in a run derives from the run seed through fixed
//! stream ids, so `(config, seed)` determines all artifacts byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{calinski_harabasz, kmeans, ClusterAssignment, KMeansParams, CH_ZERO_DISPERSION};
use crate::data::{candidate_batches, generate_toy, EmbeddingDataset, LabeledBatch, Split, ToyConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_report, id_accuracy, EvalReport, ReportFormat};
use crate::model::{Checkpoint, MlpModel, SgdState};
use crate::numeric::{Matrix, Rng, NORM_EPS};
use crate::sampling::{
    diversity_delta, sample_biased, sample_dos, sample_greedy, sample_random, sample_uniform_clusters,
    CandidateBatch, SelectedOutliers, SelectionRecord,
};
use crate::scoring::{
    absent_category_loss, absent_probabilities, energy_reg_loss, oe_uniform_loss, score_rows, LossOutput,
    ScoreKind,
};

pub use crate::sampling::Strategy;

const STREAM_INIT: u64 = 1;
const STREAM_POOL_CLUSTERS: u64 = 2;
const STREAM_EPOCH: u64 = 1_000;
const STREAM_METRICS: u64 = 1_000_000;
const CH_MAX_CLUSTERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Normalized,
    Raw,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown feature mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AbsentCategory,
    OeUniform,
    Energy,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::AbsentCategory, LossKind::OeUniform, LossKind::Energy];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::AbsentCategory => "absent_category",
            LossKind::OeUniform => "oe_uniform",
            LossKind::Energy => "energy",
        }
    }

    /// Score used both to rank candidates and to evaluate the detector.
    pub fn score_kind(self) -> ScoreKind {
        match self {
            LossKind::AbsentCategory => ScoreKind::Absent,
            LossKind::OeUniform => ScoreKind::Msp,
            LossKind::Energy => ScoreKind::Energy,
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            LossKind::AbsentCategory => 1.0,
            LossKind::OeUniform => 0.5,
            LossKind::Energy => 0.1,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Embedding file; the toy benchmark is generated when absent.
    pub path: Option<PathBuf>,
    /// Toy generation seed; defaults to the run seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub id_batch: usize,
    pub ood_batch: usize,
    pub candidate_size: usize,
    /// Defaults to `id_batch`.
    pub k_clusters: Option<usize>,
    pub strategy: Strategy,
    pub loss: LossKind,
    /// Defaults per loss.
    pub lambda: Option<f64>,
    pub feature_mode: FeatureMode,
    /// Clusters of the whole pool used by the biased and uniform strategies.
    pub pool_clusters: usize,
    pub kmeans_max_iters: usize,
    pub energy_m_in: f64,
    pub energy_m_out: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            id_batch: 64,
            ood_batch: 64,
            candidate_size: 256,
            k_clusters: None,
            strategy: Strategy::Dos,
            loss: LossKind::AbsentCategory,
            lambda: None,
            feature_mode: FeatureMode::Normalized,
            pool_clusters: 6,
            kmeans_max_iters: 100,
            energy_m_in: -7.0,
            energy_m_out: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![75, 90],
            decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub toy: ToyConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optim: OptimSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn k_clusters(&self) -> usize {
        self.train.k_clusters.unwrap_or(self.train.id_batch)
    }

    pub fn lambda(&self) -> f64 {
        self.train.lambda.unwrap_or_else(|| self.train.loss.default_lambda())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.run.seed)
    }

    /// FNV-1a of the config without its output directory.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.run.out_dir = None;
        c.to_toml()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.id_batch == 0 || t.ood_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        let k = self.k_clusters();
        if k == 0 || k > t.candidate_size {
            return bad(format!("k_clusters {k} must be in 1..=candidate_size ({})", t.candidate_size));
        }
        if t.strategy == Strategy::Dos && t.ood_batch != k {
            return bad(format!("strategy dos needs ood_batch ({}) = k_clusters ({k})", t.ood_batch));
        }
        if matches!(t.strategy, Strategy::Random | Strategy::Greedy) && t.ood_batch > t.candidate_size {
            return bad(format!(
                "ood_batch {} exceeds candidate_size {}",
                t.ood_batch, t.candidate_size
            ));
        }
        if t.pool_clusters == 0 || t.kmeans_max_iters == 0 {
            return bad("pool_clusters and kmeans_max_iters must be positive".into());
        }
        if !(self.lambda() >= 0.0 && self.lambda().is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda()));
        }
        if !(t.energy_m_in.is_finite() && t.energy_m_out.is_finite()) {
            return bad("energy margins must be finite".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        let o = &self.optim;
        if !(o.decay > 0.0 && o.decay.is_finite()) {
            return bad(format!("lr decay {} must be positive", o.decay));
        }
        if self.data.path.is_none() {
            self.toy.validate()?;
        }
        Ok(())
    }
}

/// Toy benchmark or embedding file named by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<EmbeddingDataset> {
    match &cfg.data.path {
        Some(p) => EmbeddingDataset::load(p),
        None => Ok(EmbeddingDataset::from_toy(&generate_toy(cfg.data_seed(), &cfg.toy)?)),
    }
}

/// Per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    /// Mean diversity of the selections (input space).
    pub delta: Option<f64>,
    /// Mean Calinski-Harabasz index of the selections (input space).
    pub ch: Option<f64>,
    /// Mean `p(K+1|x)` of the selected outliers.
    pub uncertainty: f64,
    pub selected: f64,
    pub fallbacks: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss,id_loss,ood_loss,delta,ch,uncertainty,selected,fallbacks";
}

/// Per-iteration diversity and uncertainty trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    pub selected: usize,
    pub delta: Option<f64>,
    pub ch: Option<f64>,
    pub uncertainty: f64,
}

impl IterationTrace {
    pub const CSV_HEADER: &'static str = "epoch,iteration,loss,id_loss,ood_loss,selected,delta,ch,uncertainty";
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochLog>,
    pub traces: Vec<IterationTrace>,
    /// First selection of every epoch, tagged with its epoch.
    pub selections: Vec<(usize, SelectionRecord)>,
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RunArtifacts {
    pub fn model(&self) -> &MlpModel {
        &self.checkpoint.model
    }

    pub fn mean_delta(&self) -> Option<f64> {
        mean_of(self.epochs.iter().filter_map(|e| e.delta))
    }

    pub fn mean_ch(&self) -> Option<f64> {
        mean_of(self.epochs.iter().filter_map(|e| e.ch))
    }

    pub fn mean_uncertainty(&self) -> Option<f64> {
        mean_of(self.epochs.iter().map(|e| e.uncertainty))
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{}\n", EpochLog::CSV_HEADER);
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.loss,
                e.id_loss,
                e.ood_loss,
                opt(e.delta),
                opt(e.ch),
                e.uncertainty,
                e.selected,
                e.fallbacks
            )
            .unwrap();
        }
        s
    }

    pub fn traces_csv(&self) -> String {
        let mut s = format!("{}\n", IterationTrace::CSV_HEADER);
        for t in &self.traces {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                t.epoch,
                t.iteration,
                t.loss,
                t.id_loss,
                t.ood_loss,
                t.selected,
                opt(t.delta),
                opt(t.ch),
                t.uncertainty
            )
            .unwrap();
        }
        s
    }

    pub fn selections_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", SelectionRecord::CSV_HEADER);
        for (epoch, r) in &self.selections {
            writeln!(s, "{epoch},{}", r.to_csv()).unwrap();
        }
        s
    }

    /// Writes `report.json`, `report.csv`, `epochs.csv`, `traces.csv`,
    /// `selections.csv`, `model.ckpt` and `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        export_report(&self.report, &dir.join("report.json"), ReportFormat::Json)?;
        export_report(&self.report, &dir.join("report.csv"), ReportFormat::Csv)?;
        fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        fs::write(dir.join("traces.csv"), self.traces_csv())?;
        fs::write(dir.join("selections.csv"), self.selections_csv())?;
        self.checkpoint.save(&dir.join("model.ckpt"))?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        Ok(())
    }
}

/// Detector report for a model on the `id-test` and `ood-test` splits.
pub fn evaluate_model(model: &MlpModel, data: &EmbeddingDataset, kind: ScoreKind) -> Result<EvalReport> {
    let k = model.num_classes();
    let id_test = data.labeled(Split::IdTest);
    let ood_test = data.features_of(Split::OodTest);
    if id_test.is_empty() || ood_test.rows() == 0 {
        return Err(Error::InvalidInput(format!(
            "evaluation needs id-test and ood-test rows (got {} and {})",
            id_test.len(),
            ood_test.rows()
        )));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "data dim {} does not match model input {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let id_scores = score_rows(kind, &model.forward(&id_test.features)?.logits, k)?;
    let ood_scores = score_rows(kind, &model.forward(&ood_test)?.logits, k)?;
    evaluate(&id_scores, &ood_scores, id_accuracy(model, &id_test)?)
}

/// Rows with a norm above `NORM_EPS` are scaled to unit length; the rest are
/// kept as they are.
fn normalize_lenient(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > NORM_EPS {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn cluster_features(features: &Matrix, mode: FeatureMode, params: &KMeansParams, rng: &mut Rng) -> Result<ClusterAssignment> {
    match mode {
        FeatureMode::Normalized => crate::clustering::kmeans_normalized(features, params, rng),
        FeatureMode::Raw => kmeans(features, params, rng),
    }
}

fn compute_loss(cfg: &ExperimentConfig, id_logits: &Matrix, labels: &[u32], ood_logits: &Matrix) -> Result<LossOutput> {
    let lambda = cfg.lambda();
    match cfg.train.loss {
        LossKind::AbsentCategory => absent_category_loss(id_logits, labels, ood_logits, lambda),
        LossKind::OeUniform => oe_uniform_loss(id_logits, labels, ood_logits, lambda),
        LossKind::Energy => energy_reg_loss(
            id_logits,
            labels,
            ood_logits,
            cfg.train.energy_m_in,
            cfg.train.energy_m_out,
            lambda,
        ),
    }
}

struct Selection {
    candidates: CandidateBatch,
    chosen: SelectedOutliers,
    uncertainty: f64,
    fallback: bool,
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    pool: Matrix,
    k: usize,
    pool_clusters: Option<ClusterAssignment>,
}

impl Trainer<'_> {
    fn uses_candidates(&self) -> bool {
        matches!(self.cfg.train.strategy, Strategy::Random | Strategy::Greedy | Strategy::Dos)
    }

    fn select(&self, model: &MlpModel, group: Option<&[usize]>, rng: &mut Rng) -> Result<Selection> {
        let t = &self.cfg.train;
        let (features, source) = match group {
            Some(g) => (self.pool.select_rows(g), g.to_vec()),
            None => (self.pool.clone(), (0..self.pool.rows()).collect()),
        };
        let out = model.forward(&features)?;
        if !out.logits.is_finite() {
            return Err(Error::Divergence {
                at: String::new(),
                detail: "non-finite candidate logits".into(),
            });
        }
        let scores = score_rows(t.loss.score_kind(), &out.logits, self.k)?;
        let candidates = CandidateBatch::new(features, source, scores)?;
        let mut fallback = false;
        let chosen = match t.strategy {
            Strategy::Random => sample_random(&candidates, t.ood_batch, rng)?,
            Strategy::Greedy => sample_greedy(&candidates, t.ood_batch)?,
            Strategy::Biased => sample_biased(&candidates, self.pool_clusters.as_ref().unwrap(), t.ood_batch, None, rng)?,
            Strategy::Uniform => {
                sample_uniform_clusters(&candidates, self.pool_clusters.as_ref().unwrap(), t.ood_batch, rng)?
            }
            Strategy::Dos => {
                let params = KMeansParams::new(self.cfg.k_clusters()).with_max_iters(t.kmeans_max_iters);
                match cluster_features(&out.penultimate, t.feature_mode, &params, rng) {
                    Ok(clusters) => sample_dos(&candidates, &clusters)?,
                    Err(e) => {
                        warn!("clustering failed ({e}); sampling uniformly over clusters for this iteration");
                        fallback = true;
                        let m = t.ood_batch.min(candidates.len());
                        match kmeans(&normalize_lenient(&out.penultimate), &params, rng) {
                            Ok(clusters) => sample_uniform_clusters(&candidates, &clusters, m, rng)?,
                            Err(_) => sample_random(&candidates, m, rng)?,
                        }
                    }
                }
            }
        };
        let p_absent = absent_probabilities(&out.logits);
        let uncertainty = mean_of(chosen.indices.iter().map(|&i| p_absent[i])).unwrap_or(0.0);
        Ok(Selection {
            candidates,
            chosen,
            uncertainty,
            fallback,
        })
    }
}

/// δ and CH of the selection in input space.
fn selection_quality(sel: &Selection, rng: &mut Rng) -> (Option<f64>, Option<f64>) {
    let points = sel.candidates.features.select_rows(&sel.chosen.indices);
    let delta = diversity_delta(&points).ok();
    let n = points.rows();
    let ch = if n >= 3 {
        let k = CH_MAX_CLUSTERS.min(n - 1);
        kmeans(&points, &KMeansParams::new(k), rng)
            .and_then(|c| calinski_harabasz(&points, &c.assignments))
            .ok()
            .filter(|v| *v != CH_ZERO_DISPERSION)
    } else {
        None
    };
    (delta, ch)
}

/// Loads the configured dataset and trains from scratch.
pub fn train(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = load_dataset(cfg)?;
    train_on(cfg, &data, None)
}

/// Trains on `data`, optionally continuing from a checkpoint written by a
/// run with the same config.
pub fn train_on(cfg: &ExperimentConfig, data: &EmbeddingDataset, resume: Option<Checkpoint>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let t = &cfg.train;
    let k = data.num_classes();
    if k == 0 {
        return Err(Error::InvalidInput("dataset has no labelled ID rows".into()));
    }
    let id_train = data.labeled(Split::IdTrain);
    let pool = data.features_of(Split::OodPool);

    let base = Rng::new(cfg.run.seed);
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(k + 1);
    let mut model = MlpModel::new(&dims, &mut base.split(STREAM_INIT))?;
    let o = &cfg.optim;
    let mut sgd = SgdState::new(&model, o.lr, o.momentum, o.weight_decay, o.milestones.clone(), o.decay)?;
    let config_hash = cfg.hash();
    let mut start = 0;
    if let Some(ckpt) = resume {
        if ckpt.config_hash != config_hash || ckpt.seed != cfg.run.seed {
            return Err(Error::Config("checkpoint was written by a different config or seed".into()));
        }
        if ckpt.model.layer_dims() != dims.as_slice() {
            return Err(Error::Config("checkpoint model shape does not match the data".into()));
        }
        start = ckpt.epoch as usize;
        model = ckpt.model;
        sgd.set_velocity(ckpt.velocity)?;
    }

    let mut trainer = Trainer {
        cfg,
        pool,
        k,
        pool_clusters: None,
    };
    if start < t.epochs {
        if id_train.is_empty() {
            return Err(Error::InvalidInput("id-train split is empty".into()));
        }
        if trainer.uses_candidates() && t.candidate_size > trainer.pool.rows() {
            return Err(Error::Config(format!(
                "candidate_size {} exceeds the outlier pool ({} rows)",
                t.candidate_size,
                trainer.pool.rows()
            )));
        }
        if !trainer.uses_candidates() {
            let params = KMeansParams::new(t.pool_clusters).with_max_iters(t.kmeans_max_iters);
            trainer.pool_clusters = Some(kmeans(&trainer.pool, &params, &mut base.split(STREAM_POOL_CLUSTERS))?);
        }
    }

    let mut epochs = Vec::new();
    let mut traces = Vec::new();
    let mut selections = Vec::new();
    for epoch in start..t.epochs {
        let mut rng = base.split(STREAM_EPOCH + epoch as u64);
        let mut metric_rng = base.split(STREAM_METRICS + epoch as u64);
        let lr = sgd.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..id_train.len()).collect();
        rng.shuffle(&mut order);
        let id_batches: Vec<&[usize]> = order.chunks(t.id_batch).collect();
        let mut groups = Vec::new();
        if trainer.uses_candidates() {
            while groups.len() < id_batches.len() {
                groups.extend(candidate_batches(trainer.pool.rows(), t.candidate_size, cfg.k_clusters(), &mut rng)?);
            }
            groups.truncate(id_batches.len());
        }

        let first_trace = traces.len();
        let mut fallbacks = 0;
        for (it, batch) in id_batches.iter().enumerate() {
            let at = || format!("epoch {epoch}, iteration {it}");
            let id: LabeledBatch = id_train.select(batch);
            let relocate = |e: Error| match e {
                Error::Divergence { detail, .. } => Error::Divergence { at: at(), detail },
                other => other,
            };
            let sel = trainer
                .select(&model, groups.get(it).map(Vec::as_slice), &mut rng)
                .map_err(relocate)?;
            fallbacks += usize::from(sel.fallback);
            let ood = sel.candidates.features.select_rows(&sel.chosen.indices);
            let n_id = id.len();
            let n_ood = ood.rows();
            let x = if n_ood == 0 { id.features.clone() } else { id.features.vstack(&ood)? };
            let (out, cache) = model.forward_cached(&x)?;
            if !out.logits.is_finite() {
                return Err(relocate(Error::Divergence {
                    at: String::new(),
                    detail: "non-finite logits".into(),
                }));
            }
            let id_logits = out.logits.select_rows(&(0..n_id).collect::<Vec<_>>());
            let ood_logits = if n_ood == 0 {
                Matrix::zeros(0, k + 1)
            } else {
                out.logits.select_rows(&(n_id..n_id + n_ood).collect::<Vec<_>>())
            };
            let loss = compute_loss(cfg, &id_logits, &id.labels, &ood_logits)?;
            if !loss.value.total.is_finite() {
                return Err(Error::Divergence {
                    at: at(),
                    detail: format!("non-finite loss {}", loss.value.total),
                });
            }
            let grad = if n_ood == 0 { loss.id_grad } else { loss.id_grad.vstack(&loss.ood_grad)? };
            let grads = model.backward(&cache, &grad)?;
            sgd.step(&mut model, &grads, lr).map_err(relocate)?;

            let (delta, ch) = selection_quality(&sel, &mut metric_rng);
            if it == 0 {
                selections.extend(sel.chosen.records(&sel.candidates).into_iter().map(|r| (epoch, r)));
            }
            traces.push(IterationTrace {
                epoch,
                iteration: it,
                loss: loss.value.total,
                id_loss: loss.value.id_term,
                ood_loss: loss.value.ood_term,
                selected: sel.chosen.len(),
                delta,
                ch,
                uncertainty: sel.uncertainty,
            });
        }
        let ep = &traces[first_trace..];
        let log = EpochLog {
            epoch,
            lr,
            loss: mean_of(ep.iter().map(|x| x.loss)).unwrap_or(0.0),
            id_loss: mean_of(ep.iter().map(|x| x.id_loss)).unwrap_or(0.0),
            ood_loss: mean_of(ep.iter().map(|x| x.ood_loss)).unwrap_or(0.0),
            delta: mean_of(ep.iter().filter_map(|x| x.delta)),
            ch: mean_of(ep.iter().filter_map(|x| x.ch)),
            uncertainty: mean_of(ep.iter().map(|x| x.uncertainty)).unwrap_or(0.0),
            selected: mean_of(ep.iter().map(|x| x.selected as f64)).unwrap_or(0.0),
            fallbacks,
        };
        info!(
            "epoch {epoch}: loss {:.4} (id {:.4}, ood {:.4}) p_absent {:.3}",
            log.loss, log.id_loss, log.ood_loss, log.uncertainty
        );
        epochs.push(log);
    }

    let report = evaluate_model(&model, data, t.loss.score_kind())?;
    let checkpoint = Checkpoint {
        velocity: sgd.velocity().to_vec(),
        model,
        epoch: t.epochs.max(start) as u64,
        seed: cfg.run.seed,
        config_hash,
    };
    Ok(RunArtifacts {
        config: cfg.clone(),
        epochs,
        traces,
        selections,
        report,
        checkpoint,
    })
}

/// A compare grid: a base config and the axes to sweep. Empty axes keep
/// the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub grid: GridAxes,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub strategies: Vec<Strategy>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: GridConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.base.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Strategy-major, then loss, then seed.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let b = &self.base;
        fn or<T: Copy>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let strategies = or(&self.grid.strategies, b.train.strategy);
        let losses = or(&self.grid.losses, b.train.loss);
        let seeds = or(&self.grid.seeds, b.run.seed);
        let mut out = Vec::new();
        for &s in &strategies {
            for &l in &losses {
                for &seed in &seeds {
                    let mut c = b.clone();
                    c.train.strategy = s;
                    c.train.loss = l;
                    c.run.seed = seed;
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub seed: u64,
    pub fpr95: f64,
    pub auroc: f64,
    pub acc: f64,
    pub mean_delta: Option<f64>,
    pub mean_ch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub runs: usize,
    pub fpr95_mean: f64,
    pub fpr95_std: Option<f64>,
    pub auroc_mean: f64,
    pub auroc_std: Option<f64>,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
    pub delta_mean: Option<f64>,
    pub ch_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Sample mean and standard deviation (`n − 1`); the deviation is absent
/// for a single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl Comparison {
    pub fn from_rows(rows: Vec<CompareRow>) -> Self {
        let mut keys: Vec<(Strategy, LossKind)> = Vec::new();
        for r in &rows {
            if !keys.contains(&(r.strategy, r.loss)) {
                keys.push((r.strategy, r.loss));
            }
        }
        let aggregates = keys
            .into_iter()
            .map(|(strategy, loss)| {
                let group: Vec<&CompareRow> = rows.iter().filter(|r| r.strategy == strategy && r.loss == loss).collect();
                let col = |f: fn(&CompareRow) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
                let (fpr95_mean, fpr95_std) = mean_std(&col(|r| r.fpr95));
                let (auroc_mean, auroc_std) = mean_std(&col(|r| r.auroc));
                let (acc_mean, acc_std) = mean_std(&col(|r| r.acc));
                AggregateRow {
                    strategy,
                    loss,
                    runs: group.len(),
                    fpr95_mean,
                    fpr95_std,
                    auroc_mean,
                    auroc_std,
                    acc_mean,
                    acc_std,
                    delta_mean: mean_of(group.iter().filter_map(|r| r.mean_delta)),
                    ch_mean: mean_of(group.iter().filter_map(|r| r.mean_ch)),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, strategy: Strategy, loss: LossKind) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.strategy == strategy && a.loss == loss)
    }

    pub const ROWS_HEADER: &'static str = "strategy,loss,seed,fpr95,auroc,acc,mean_delta,mean_ch";
    pub const AGGREGATE_HEADER: &'static str =
        "strategy,loss,runs,fpr95_mean,fpr95_std,auroc_mean,auroc_std,acc_mean,acc_std,delta_mean,ch_mean";

    pub fn rows_csv(&self) -> String {
        let mut s = format!("{}\n", Self::ROWS_HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.strategy,
                r.loss,
                r.seed,
                r.fpr95,
                r.auroc,
                r.acc,
                opt(r.mean_delta),
                opt(r.mean_ch)
            )
            .unwrap();
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = format!("{}\n", Self::AGGREGATE_HEADER);
        for a in &self.aggregates {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                a.strategy,
                a.loss,
                a.runs,
                a.fpr95_mean,
                opt(a.fpr95_std),
                a.auroc_mean,
                opt(a.auroc_std),
                a.acc_mean,
                opt(a.acc_std),
                opt(a.delta_mean),
                opt(a.ch_mean)
            )
            .unwrap();
        }
        s
    }

    /// Writes `compare.csv`, `aggregate.csv` and `compare.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("compare.csv"), self.rows_csv())?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv())?;
        fs::write(dir.join("compare.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.train.strategy = Strategy::Dos;
        c.train.loss = LossKind::AbsentCategory;
        c.run = RunSection::default();
        c
    };
    let Some(first) = configs.first() else {
        return Err(Error::Config("compare needs at least one config".into()));
    };
    let reference = strip(first);
    for (i, c) in configs.iter().enumerate() {
        if strip(c) != reference {
            return Err(Error::Config(format!(
                "config {i} differs from config 0 outside strategy/loss/seed"
            )));
        }
    }
    Ok(())
}

/// Runs every config (concurrently, each in its own output subdirectory
/// when `out` is given) and tabulates the results in input order.
pub fn compare(configs: &[ExperimentConfig], out: Option<&Path>) -> Result<Comparison> {
    check_comparable(configs)?;
    for c in configs {
        c.validate()?;
    }
    let results: Vec<Result<CompareRow>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let run = train(c)?;
            if let Some(dir) = out {
                let sub = dir.join(format!("run{i:03}_{}_{}_s{}", c.train.strategy, c.train.loss, c.run.seed));
                run.write(&sub)?;
            }
            Ok(CompareRow {
                strategy: c.train.strategy,
                loss: c.train.loss,
                seed: c.run.seed,
                fpr95: run.report.fpr95,
                auroc: run.report.auroc,
                acc: run.report.id_accuracy,
                mean_delta: run.mean_delta(),
                mean_ch: run.mean_ch(),
            })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::from_rows(rows);
    if let Some(dir) = out {
        cmp.write(dir)?;
    }
    Ok(cmp)
}

/// Per-cluster selection counts of every strategy drawing `m` outliers from
/// the whole pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterHistogram {
    pub k: usize,
    pub m: usize,
    pub cluster_sizes: Vec<usize>,
    pub counts: Vec<(Strategy, Vec<usize>)>,
}

/// `max / min` over all clusters; infinite when a cluster is never chosen.
pub fn imbalance_ratio(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        if max == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        max as f64 / min as f64
    }
}

impl ClusterHistogram {
    pub fn counts_of(&self, strategy: Strategy) -> Option<&[usize]> {
        self.counts.iter().find(|(s, _)| *s == strategy).map(|(_, c)| c.as_slice())
    }

    pub fn ratio(&self, strategy: Strategy) -> Option<f64> {
        self.counts_of(strategy).map(imbalance_ratio)
    }

    /// `strategy,cluster,count` rows followed by `strategy,ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,cluster,count\n");
        for (strategy, counts) in &self.counts {
            for (c, n) in counts.iter().enumerate() {
                writeln!(s, "{strategy},{c},{n}").unwrap();
            }
        }
        s.push_str("strategy,ratio\n");
        for (strategy, counts) in &self.counts {
            writeln!(s, "{strategy},{}", imbalance_ratio(counts)).unwrap();
        }
        s
    }
}

/// Clusters the pool into `k` groups (on the model's normalized penultimate
/// features when a model is given, otherwise on the raw rows) and counts
/// where each strategy's `m` picks land.
pub fn cluster_histogram(
    pool: &Matrix,
    k: usize,
    m: usize,
    model: Option<(&MlpModel, ScoreKind)>,
    seed: u64,
) -> Result<ClusterHistogram> {
    let base = Rng::new(seed);
    let (features, scores) = match model {
        Some((model, kind)) => {
            let out = model.forward(pool)?;
            let scores = score_rows(kind, &out.logits, model.num_classes())?;
            (normalize_lenient(&out.penultimate), scores)
        }
        None => (pool.clone(), vec![0.0; pool.rows()]),
    };
    let clusters = kmeans(&features, &KMeansParams::new(k), &mut base.split(1))?;
    let candidates = CandidateBatch::new(pool.clone(), (0..pool.rows()).collect(), scores)?;
    let largest = clusters.sizes().into_iter().max().unwrap_or(0);
    let mut rng = base.split(2);
    let mut counts = Vec::new();
    for strategy in Strategy::ALL {
        let sel = match strategy {
            Strategy::Random => sample_random(&candidates, m, &mut rng)?,
            Strategy::Greedy => sample_greedy(&candidates, m)?,
            Strategy::Biased => sample_biased(&candidates, &clusters, m.min(largest), None, &mut rng)?,
            Strategy::Uniform => sample_uniform_clusters(&candidates, &clusters, m, &mut rng)?,
            Strategy::Dos => sample_dos(&candidates, &clusters)?,
        };
        let mut c = vec![0usize; k];
        for &i in &sel.indices {
            c[clusters.assignments[i]] += 1;
        }
        counts.push((strategy, c));
    }
    Ok(ClusterHistogram {
        k,
        m,
        cluster_sizes: clusters.sizes(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.toy.id_train_per_class = 40;
        c.toy.id_test_per_class = 30;
        c.toy.ood_per_cluster = 12;
        c.model.hidden = vec![16];
        c.train.epochs = 2;
        c.train.id_batch = 32;
        c.train.ood_batch = 16;
        c.train.k_clusters = Some(16);
        c.train.candidate_size = 64;
        c
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.k_clusters(), 64);
        assert_eq!(c.optim.milestones, vec![75, 90]);
        assert_eq!(ExperimentConfig::from_toml(&small_config().to_toml()).unwrap(), small_config());
    }

    #[test]
    fn config_rejects_unknown_keys_and_violations() {
        assert!(matches!(ExperimentConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[bogus]\n"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nood_batch = 32\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nk_clusters = 300\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_toml("[toy]\nid_sigma = 0.0\n"), Err(Error::Config(_))));
        let parsed = ExperimentConfig::from_toml("[train]\nstrategy = \"greedy\"\nloss = \"energy\"\n").unwrap();
        assert_eq!(parsed.train.strategy, Strategy::Greedy);
        assert_eq!(parsed.lambda(), 0.1);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = small_config();
        let mut b = a.clone();
        b.run.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn zero_epochs_reports_initial_model() {
        let mut c = small_config();
        c.train.epochs = 0;
        let run = train(&c).unwrap();
        assert!(run.epochs.is_empty());
        assert_eq!(run.report.n_id, 90);
        assert_eq!(run.report.n_ood, 24 * 12);
        let data = load_dataset(&c).unwrap();
        let init = MlpModel::new(&[2, 16, 4], &mut Rng::new(0).split(STREAM_INIT)).unwrap();
        assert_eq!(run.model(), &init);
        assert_eq!(evaluate_model(&init, &data, ScoreKind::Absent).unwrap(), run.report);
    }

    #[test]
    fn training_is_deterministic_for_every_strategy() {
        for strategy in Strategy::ALL {
            let mut c = small_config();
            c.train.strategy = strategy;
            let a = train(&c).unwrap();
            let b = train(&c).unwrap();
            assert_eq!(a, b, "{strategy}");
            assert_eq!(a.epochs.len(), 2);
            assert!(a.traces.iter().all(|t| t.loss.is_finite()));
            assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
            assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        }
    }

    #[test]
    fn dos_selects_one_per_nonempty_cluster() {
        let run = train(&small_config()).unwrap();
        assert!(run.traces.iter().all(|t| t.selected <= 16 && t.selected > 0));
        let first: Vec<_> = run.selections.iter().filter(|(e, _)| *e == 0).collect();
        let mut ids: Vec<_> = first.iter().map(|(_, r)| r.cluster_id.unwrap()).collect();
        ids.dedup();
        assert_eq!(ids.len(), first.len());
    }

    #[test]
    fn feature_mode_does_not_change_first_id_loss() {
        let a = train(&small_config()).unwrap();
        let mut c = small_config();
        c.train.feature_mode = FeatureMode::Raw;
        let b = train(&c).unwrap();
        assert_eq!(a.traces[0].id_loss, b.traces[0].id_loss);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = small_config();
        let full = train(&c).unwrap();
        let mut short = c.clone();
        short.train.epochs = 1;
        let partial = train(&short).unwrap();
        let data = load_dataset(&c).unwrap();
        let mut ckpt = partial.checkpoint.clone();
        ckpt.config_hash = c.hash();
        let resumed = train_on(&c, &data, Some(ckpt)).unwrap();
        assert_eq!(resumed.checkpoint, full.checkpoint);
        assert_eq!(resumed.epochs[..], full.epochs[1..]);

        let mut other = partial.checkpoint;
        other.config_hash ^= 1;
        assert!(matches!(train_on(&c, &data, Some(other)), Err(Error::Config(_))));
    }

    #[test]
    fn pool_too_small_is_config_error() {
        let mut c = small_config();
        c.train.candidate_size = 10_000;
        c.train.k_clusters = Some(16);
        assert!(matches!(train(&c), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let mut c = small_config();
        c.optim.lr = 1e200;
        c.optim.momentum = 0.0;
        match train(&c) {
            Err(Error::Divergence { at, .. }) => assert!(at.starts_with("epoch 0, iteration")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn artifacts_are_written() {
        let run = train(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write(dir.path()).unwrap();
        for f in ["report.json", "report.csv", "epochs.csv", "traces.csv", "selections.csv", "model.ckpt", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let epochs = fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
        assert_eq!(epochs.lines().count(), 3);
        let back = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(back, run.checkpoint);
    }

    #[test]
    fn compare_grid_arithmetic() {
        let mut g = GridConfig {
            base: small_config(),
            grid: GridAxes::default(),
        };
        g.base.train.epochs = 1;
        let single = compare(&g.expand(), None).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.aggregates.len(), 1);
        assert_eq!(single.aggregates[0].fpr95_std, None);

        g.grid.strategies = vec![Strategy::Dos, Strategy::Random];
        g.grid.seeds = vec![0, 1, 2];
        let cmp = compare(&g.expand(), None).unwrap();
        assert_eq!(cmp.rows.len(), 6);
        assert_eq!(cmp.aggregates.len(), 2);
        let dos: Vec<f64> = cmp.rows.iter().filter(|r| r.strategy == Strategy::Dos).map(|r| r.fpr95).collect();
        assert_eq!(cmp.aggregates[0].fpr95_mean, dos.iter().sum::<f64>() / 3.0);
    }

    #[test]
    fn compare_rejects_mixed_datasets() {
        let a = small_config();
        let mut b = a.clone();
        b.toy.ood_radius = 13.0;
        assert!(matches!(compare(&[a, b], None), Err(Error::Config(_))));
    }

    #[test]
    fn histogram_examples() {
        let toy = generate_toy(3, &small_config().toy).unwrap();
        let h = cluster_histogram(&toy.ood_pool, 6, 24, None, 0).unwrap();
        assert_eq!(h.counts_of(Strategy::Uniform).unwrap(), &[4; 6]);
        let biased = h.counts_of(Strategy::Biased).unwrap();
        assert_eq!(biased.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(biased.iter().sum::<usize>(), 24);
        assert_eq!(h.counts_of(Strategy::Dos).unwrap(), &[1; 6]);
        assert_eq!(h.ratio(Strategy::Uniform), Some(1.0));
        assert!(h.to_csv().starts_with("strategy,cluster,count\n"));
    }

    #[test]
    fn imbalance_ratio_cases() {
        assert_eq!(imbalance_ratio(&[3, 3, 2]), 1.5);
        assert_eq!(imbalance_ratio(&[3, 0]), f64::INFINITY);
        assert_eq!(imbalance_ratio(&[0, 0]), 1.0);
    }
}
