//! Monte-Carlo gradient bias of a sampled estimator against the full gradient.

use serde::{Deserialize, Serialize};

use super::{bias_bound, d2_bias_bound, renyi_d2};
use crate::error::{Error, Result};
use crate::numeric::{softmax, EmbeddingMatrix, Logits, QueryVector};
use crate::rng::split;
use crate::sampled_softmax::{full_grad_logits, GradEstimator};
use crate::samplers::{PreparedQuery, SamplerKind, SamplerSpec};

/// Trials per rng stream. Fixed so results do not depend on the thread count.
const BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradBiasConfig {
    pub m: usize,
    pub trials: usize,
    pub estimator: GradEstimator,
    pub seed: u64,
    pub threads: usize,
}

impl GradBiasConfig {
    pub fn new(m: usize, trials: usize, estimator: GradEstimator, seed: u64) -> Self {
        Self {
            m,
            trials,
            estimator,
            seed,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBiasReport {
    /// `‖mean(ĝ) − ∇ℓ‖∞`
    pub measured_bias: f64,
    /// Largest per-coordinate standard error of the mean.
    pub standard_error: f64,
    pub d2: f64,
    /// `min{2, sqrt((d₂−1)/(M+1))}` with `d₂` computed exactly.
    pub d2_bound: f64,
    /// Kind-specific closed form, when the sampler spec was available.
    pub closed_form_bound: Option<f64>,
    pub m: usize,
    pub trials: usize,
    pub estimator: GradEstimator,
}

impl GradBiasReport {
    /// `measured ≤ bound + 3·SE` against the tighter available bound.
    pub fn within(&self, bound: f64) -> bool {
        self.measured_bias <= bound + 3.0 * self.standard_error
    }

    pub fn within_d2_bound(&self) -> bool {
        self.within(self.d2_bound)
    }
}

struct Moments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

fn run_block(
    pq: &PreparedQuery<'_>,
    o: &Logits,
    positive: usize,
    cfg: &GradBiasConfig,
    block: usize,
) -> Result<Moments> {
    let n = o.len();
    let mut rng = split(cfg.seed, block as u64);
    let start = block * BLOCK;
    let end = (start + BLOCK).min(cfg.trials);
    let mut acc = Moments {
        sum: vec![0.0; n],
        sumsq: vec![0.0; n],
    };
    for _ in start..end {
        let batch = pq.draw(cfg.m, &mut rng);
        let g = cfg.estimator.estimate(o, positive, &batch)?;
        for ((s, q), x) in acc.sum.iter_mut().zip(acc.sumsq.iter_mut()).zip(&g) {
            *s += x;
            *q += x * x;
        }
    }
    Ok(acc)
}

/// Monte-Carlo bias for an already prepared query with logits `o`.
pub fn grad_bias_mc_prepared(
    pq: &PreparedQuery<'_>,
    o: &Logits,
    positive: usize,
    cfg: &GradBiasConfig,
) -> Result<GradBiasReport> {
    if cfg.trials < 2 {
        return Err(Error::Config(
            "gradient bias needs at least two trials".into(),
        ));
    }
    if cfg.m == 0 {
        return Err(Error::Config("gradient bias needs m >= 1".into()));
    }
    pq.spec_check(o.len())?;
    let full = full_grad_logits(o, positive)?;
    let n = o.len();
    let blocks = cfg.trials.div_ceil(BLOCK);
    let threads = cfg.threads.max(1).min(blocks);

    let mut results: Vec<Option<Result<Moments>>> = (0..blocks).map(|_| None).collect();
    if threads == 1 {
        for (b, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_block(pq, o, positive, cfg, b));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    scope.spawn(move || {
                        (t..blocks)
                            .step_by(threads)
                            .map(|b| (b, run_block(pq, o, positive, cfg, b)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (b, r) in h.join().expect("bias worker panicked") {
                    results[b] = Some(r);
                }
            }
        });
    }

    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    for r in results {
        let m = r.expect("every block ran")?;
        for j in 0..n {
            sum[j] += m.sum[j];
            sumsq[j] += m.sumsq[j];
        }
    }

    let t = cfg.trials as f64;
    let mut measured_bias = 0.0_f64;
    let mut standard_error = 0.0_f64;
    for j in 0..n {
        let mean = sum[j] / t;
        let var = ((sumsq[j] / t - mean * mean) * t / (t - 1.0)).max(0.0);
        measured_bias = measured_bias.max((mean - full[j]).abs());
        standard_error = standard_error.max((var / t).sqrt());
    }

    let p = softmax(o);
    let d2 = renyi_d2(p.as_slice(), &pq.proposal())?;
    Ok(GradBiasReport {
        measured_bias,
        standard_error,
        d2,
        d2_bound: d2_bias_bound(d2, cfg.m),
        closed_form_bound: None,
        m: cfg.m,
        trials: cfg.trials,
        estimator: cfg.estimator,
    })
}

/// Monte-Carlo bias of the sampled gradient for query `z` with label `positive`.
pub fn grad_bias_mc(
    spec: &SamplerSpec,
    z: &QueryVector,
    emb: &EmbeddingMatrix,
    positive: usize,
    cfg: &GradBiasConfig,
) -> Result<GradBiasReport> {
    spec.check_catalog(emb.n_classes())?;
    let o = emb.logits(z)?;
    let pq = spec.prepare(z)?;
    let mut report = grad_bias_mc_prepared(&pq, &o, positive, cfg)?;
    let residual = match spec.index() {
        Some(index) => Some(index.residual_scores(z)?),
        None => None,
    };
    let freqs = match spec.kind() {
        SamplerKind::Unigram => spec.static_probabilities(),
        _ => None,
    };
    report.closed_form_bound = Some(bias_bound(
        spec.kind(),
        &o,
        residual.as_deref(),
        freqs.as_deref(),
        cfg.m,
    )?);
    Ok(report)
}

impl PreparedQuery<'_> {
    fn spec_check(&self, n: usize) -> Result<()> {
        if self.n_classes() != n {
            return Err(Error::Config(format!(
                "prepared query covers {} classes, logits have {n}",
                self.n_classes()
            )));
        }
        Ok(())
    }
}
