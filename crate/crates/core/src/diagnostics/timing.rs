//! Wall-clock profile of per-query preparation and per-draw cost.

use std::hint::black_box;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{EmbeddingMatrix, Matrix, QueryVector};
use crate::quantization::{IndexConfig, MultiIndex, QuantizerKind};
use crate::rng::{split, SeedRng};
use crate::samplers::{SamplerKind, SamplerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub kinds: Vec<SamplerKind>,
    pub n_values: Vec<usize>,
    pub k: usize,
    pub dim: usize,
    /// Draws per timed call when measuring draw cost.
    pub m: usize,
    pub repeats: usize,
    pub seed: u64,
    pub quantizer: QuantizerKind,
    /// K-means iterations for the index; sampling cost does not depend on it.
    pub kmeans_iters: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            kinds: SamplerKind::ALL.to_vec(),
            n_values: vec![1_000, 10_000, 100_000],
            k: 32,
            dim: 16,
            m: 1000,
            repeats: 5,
            seed: 0,
            quantizer: QuantizerKind::Product,
            kmeans_iters: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub kind: SamplerKind,
    pub n: usize,
    /// Median seconds per `prepare` call.
    pub prepare_secs: f64,
    /// Median seconds per single draw.
    pub draw_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    fn pick(&self, kind: SamplerKind, n: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.kind == kind && r.n == n)
    }

    fn extreme_ns(&self, kind: SamplerKind) -> Option<(usize, usize)> {
        let ns = self.rows.iter().filter(|r| r.kind == kind).map(|r| r.n);
        Some((ns.clone().min()?, ns.max()?))
    }

    /// Prepare time at the largest `N` over prepare time at the smallest `N`.
    pub fn prepare_growth(&self, kind: SamplerKind) -> Option<f64> {
        let (lo, hi) = self.extreme_ns(kind)?;
        Some(self.pick(kind, hi)?.prepare_secs / self.pick(kind, lo)?.prepare_secs)
    }

    /// Same ratio for per-draw time.
    pub fn draw_growth(&self, kind: SamplerKind) -> Option<f64> {
        let (lo, hi) = self.extreme_ns(kind)?;
        Some(self.pick(kind, hi)?.draw_secs / self.pick(kind, lo)?.draw_secs)
    }

    /// Largest over smallest per-draw time across all `N`.
    pub fn draw_spread(&self, kind: SamplerKind) -> Option<f64> {
        let t: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.draw_secs)
            .collect();
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(0.0, f64::max);
        (!t.is_empty()).then(|| hi / lo)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

const MIN_SAMPLE: Duration = Duration::from_millis(2);

/// Median seconds per call of `f`, with the inner loop count calibrated so
/// each timed sample lasts at least [`MIN_SAMPLE`].
fn time_per_call(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        if t.elapsed() >= MIN_SAMPLE || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let samples = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    median(samples)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeedRng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::new(rows, cols, data).expect("sized")
}

/// Median prepare and per-draw time per (sampler kind, N).
pub fn timing_profile(cfg: &TimingConfig) -> Result<TimingTable> {
    if cfg.repeats < 5 {
        return Err(Error::Config("timing needs at least 5 repeats".into()));
    }
    if cfg.m == 0 || cfg.n_values.is_empty() {
        return Err(Error::Config(
            "timing needs m >= 1 and at least one N".into(),
        ));
    }
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_values.iter().enumerate() {
        let mut rng = split(cfg.seed, ni as u64);
        let emb = EmbeddingMatrix::new(gaussian_matrix(n, cfg.dim, &mut rng))?;
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let queries: Vec<QueryVector> = (0..8)
            .map(|_| {
                QueryVector::new(
                    (0..cfg.dim)
                        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect(),
                )
            })
            .collect::<Result<_>>()?;
        let index = if cfg.kinds.iter().any(|k| k.is_midx()) {
            let mut ic = IndexConfig::new(cfg.k, cfg.quantizer, cfg.seed);
            ic.iters = cfg.kmeans_iters.max(1);
            Some(Arc::new(MultiIndex::build(&emb, &ic)?))
        } else {
            None
        };
        let freqs: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();

        for &kind in &cfg.kinds {
            let spec = match kind {
                SamplerKind::Uniform => SamplerSpec::uniform(n)?,
                SamplerKind::Unigram => SamplerSpec::unigram(&freqs)?,
                _ => SamplerSpec::midx(kind, index.clone().expect("built above"))?,
            };
            let mut qi = 0;
            let prepare_secs = time_per_call(cfg.repeats, || {
                let pq = spec
                    .prepare(&queries[qi % queries.len()])
                    .expect("valid query");
                black_box(&pq);
                qi += 1;
            });
            let pq = spec.prepare(&queries[0])?;
            let mut draw_rng = split(cfg.seed, 1000 + ni as u64);
            let per_call = time_per_call(cfg.repeats, || {
                let mut acc = 0usize;
                for _ in 0..cfg.m {
                    acc = acc.wrapping_add(pq.draw_one(&mut draw_rng));
                }
                black_box(acc);
            });
            let draw_secs = per_call / cfg.m as f64;
            rows.push(TimingRow {
                kind,
                n,
                prepare_secs,
                draw_secs,
            });
        }
    }
    Ok(TimingTable { rows })
}
