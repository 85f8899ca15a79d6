//! Bilinear classification on a synthetic Gaussian-mixture catalog.
//!
//! Queries are frozen and only the class embeddings train, so differences
//! between runs come from the sampler alone. Evaluation always uses the exact
//! full softmax loss.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{dot_unchecked, EmbeddingMatrix, Logits, Matrix, QueryVector};
use crate::quantization::{IndexConfig, MultiIndex, QuantizerKind};
use crate::rng::{split, SeedRng};
use crate::sampled_softmax::{full_grad_logits, full_loss, GradEstimator};
use crate::samplers::{SamplerKind, SamplerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub n_queries: usize,
    pub clusters: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    /// The standard clustered task.
    fn default() -> Self {
        Self {
            n_classes: 256,
            dim: 16,
            n_queries: 1024,
            clusters: 16,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub queries: Matrix,
    pub catalog: EmbeddingMatrix,
    pub labels: Vec<usize>,
    /// Generator settings, when the task was synthesized.
    pub config: Option<TaskConfig>,
}

impl ToyTask {
    /// Task from loaded data; labels must index the catalog.
    pub fn from_parts(
        queries: Matrix,
        catalog: EmbeddingMatrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        check_dim(catalog.dim(), queries.cols())?;
        check_dim(queries.rows(), labels.len())?;
        if labels.is_empty() {
            return Err(Error::Config("task needs at least one query".into()));
        }
        if !queries.is_finite() {
            return Err(Error::Numerical("queries contain non-finite values".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= catalog.n_classes()) {
            return Err(Error::OutOfRange {
                index: bad,
                len: catalog.n_classes(),
            });
        }
        Ok(Self {
            queries,
            catalog,
            labels,
            config: None,
        })
    }

    pub fn query(&self, j: usize) -> QueryVector {
        QueryVector::new(self.queries.row(j).to_vec()).expect("generated queries are finite")
    }

    /// Mean exact full softmax loss of the queries against `catalog`.
    pub fn full_loss(&self, catalog: &EmbeddingMatrix) -> Result<f64> {
        check_dim(self.queries.cols(), catalog.dim())?;
        let mut total = 0.0;
        for (j, &y) in self.labels.iter().enumerate() {
            total += full_loss(&catalog.logits(&self.query(j))?, y)?;
        }
        Ok(total / self.labels.len() as f64)
    }

    /// Frobenius norm of the gradient of [`ToyTask::full_loss`] w.r.t. the catalog.
    pub fn full_grad_norm(&self, catalog: &EmbeddingMatrix) -> Result<f64> {
        let (n, d) = (catalog.n_classes(), catalog.dim());
        let mut grad = vec![0.0; n * d];
        let scale = 1.0 / self.labels.len() as f64;
        for (j, &y) in self.labels.iter().enumerate() {
            let z = self.queries.row(j);
            let g = full_grad_logits(&catalog.logits(&self.query(j))?, y)?;
            for (i, gi) in g.iter().enumerate() {
                for (acc, zv) in grad[i * d..(i + 1) * d].iter_mut().zip(z) {
                    *acc += scale * gi * zv;
                }
            }
        }
        Ok(grad.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Label counts plus one, so every class stays reachable.
    pub fn label_frequencies(&self) -> Vec<f64> {
        let mut f = vec![1.0; self.catalog.n_classes()];
        for &y in &self.labels {
            f[y] += 1.0;
        }
        f
    }
}

fn gaussian(rng: &mut SeedRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian-mixture catalog with queries near their labelled class.
pub fn gen_task(cfg: &TaskConfig) -> Result<ToyTask> {
    if cfg.n_classes == 0 || cfg.dim == 0 || cfg.n_queries == 0 {
        return Err(Error::Config("task sizes must be >= 1".into()));
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.n_classes {
        return Err(Error::Config(format!(
            "clusters must be in 1..={}, got {}",
            cfg.n_classes, cfg.clusters
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be >= 0, got {}",
            cfg.noise
        )));
    }
    let (n, d) = (cfg.n_classes, cfg.dim);
    let mut rng = split(cfg.seed, 0);
    let centers: Vec<f64> = (0..cfg.clusters * d).map(|_| gaussian(&mut rng)).collect();
    let mut emb = Vec::with_capacity(n * d);
    for i in 0..n {
        let c = i % cfg.clusters;
        for t in 0..d {
            emb.push(centers[c * d + t] + cfg.noise * gaussian(&mut rng));
        }
    }
    let mut labels = Vec::with_capacity(cfg.n_queries);
    let mut queries = Vec::with_capacity(cfg.n_queries * d);
    for _ in 0..cfg.n_queries {
        let y = rng.random_range(0..n);
        labels.push(y);
        for t in 0..d {
            queries.push(emb[y * d + t] + cfg.noise * gaussian(&mut rng));
        }
    }
    Ok(ToyTask {
        queries: Matrix::new(cfg.n_queries, d, queries)?,
        catalog: EmbeddingMatrix::new(Matrix::new(n, d, emb)?)?,
        labels,
        config: Some(*cfg),
    })
}

/// Where training gradients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Exact full softmax gradient.
    Full,
    Sampled(SamplerKind),
}

impl GradientSource {
    pub fn label(self) -> &'static str {
        match self {
            GradientSource::Full => "full",
            GradientSource::Sampled(k) => k.as_str(),
        }
    }
}

impl std::str::FromStr for GradientSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            Ok(GradientSource::Full)
        } else {
            s.parse().map(GradientSource::Sampled)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub source: GradientSource,
    pub m: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs between index rebuilds for the index-based samplers.
    pub rebuild_every: usize,
    pub seed: u64,
    pub k: usize,
    pub quantizer: QuantizerKind,
    pub estimator: GradEstimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source: GradientSource::Sampled(SamplerKind::MidxFast),
            m: 8,
            epochs: 30,
            lr: 0.05,
            rebuild_every: 1,
            seed: 0,
            k: 8,
            quantizer: QuantizerKind::Residual,
            estimator: GradEstimator::SampledSoftmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub full_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub sampler: String,
    pub m: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epoch 0 is the untrained catalog.
    pub records: Vec<EpochRecord>,
    /// Set when a non-finite loss stopped training early.
    pub aborted: bool,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.records[0].full_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().expect("never empty").full_loss
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.full_loss).collect()
    }

    /// `epoch,full_loss,grad_norm` rows with a header.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn build_spec(
    task: &ToyTask,
    catalog: &EmbeddingMatrix,
    kind: SamplerKind,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<SamplerSpec> {
    match kind {
        SamplerKind::Uniform => SamplerSpec::uniform(catalog.n_classes()),
        SamplerKind::Unigram => SamplerSpec::unigram(&task.label_frequencies()),
        _ => {
            let ic = IndexConfig::new(cfg.k, cfg.quantizer, cfg.seed.wrapping_add(epoch as u64));
            SamplerSpec::midx(kind, Arc::new(MultiIndex::build(catalog, &ic)?))
        }
    }
}

fn record(task: &ToyTask, catalog: &EmbeddingMatrix, epoch: usize) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        full_loss: task.full_loss(catalog)?,
        grad_norm: task.full_grad_norm(catalog)?,
    })
}

/// SGD over the class embeddings, one query per step.
pub fn train(task: &ToyTask, cfg: &TrainConfig) -> Result<TrainReport> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {}",
            cfg.lr
        )));
    }
    if let GradientSource::Sampled(kind) = cfg.source {
        if cfg.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if kind.is_midx() && cfg.rebuild_every == 0 {
            return Err(Error::Config("rebuild_every must be >= 1".into()));
        }
    }
    let mut catalog = task.catalog.matrix().clone();
    let current = |m: &Matrix| EmbeddingMatrix::new(m.clone());
    let mut report = TrainReport {
        sampler: cfg.source.label().to_string(),
        m: cfg.m,
        lr: cfg.lr,
        seed: cfg.seed,
        records: vec![record(task, &task.catalog, 0)?],
        aborted: false,
    };
    let d = catalog.cols();
    let mut order: Vec<usize> = (0..task.labels.len()).collect();
    let mut spec: Option<SamplerSpec> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = split(cfg.seed, 1000 + epoch as u64);
        order.shuffle(&mut rng);
        if let GradientSource::Sampled(kind) = cfg.source {
            let rebuild =
                spec.is_none() || (kind.is_midx() && (epoch - 1) % cfg.rebuild_every == 0);
            if rebuild {
                spec = Some(build_spec(task, &current(&catalog)?, kind, cfg, epoch)?);
            }
        }
        for &j in &order {
            let z = task.queries.row(j);
            let y = task.labels[j];
            let o = Logits(catalog.iter_rows().map(|q| dot_unchecked(q, z)).collect());
            if !o.0.iter().all(|x| x.is_finite()) {
                report.aborted = true;
                return Ok(report);
            }
            let g = match (&cfg.source, &spec) {
                (GradientSource::Full, _) => full_grad_logits(&o, y)?,
                (GradientSource::Sampled(_), Some(spec)) => {
                    let pq = spec.prepare(&task.query(j))?;
                    let batch = pq.draw(cfg.m, &mut rng);
                    cfg.estimator.estimate(&o, y, &batch)?
                }
                (GradientSource::Sampled(_), None) => unreachable!("spec built at epoch start"),
            };
            for (i, &gi) in g.iter().enumerate() {
                if gi != 0.0 {
                    let row = catalog.row_mut(i);
                    for t in 0..d {
                        row[t] -= cfg.lr * gi * z[t];
                    }
                }
            }
        }
        if !catalog.is_finite() {
            report.aborted = true;
            break;
        }
        let rec = record(task, &current(&catalog)?, epoch)?;
        if !rec.full_loss.is_finite() {
            report.aborted = true;
            break;
        }
        report.records.push(rec);
    }
    Ok(report)
}
