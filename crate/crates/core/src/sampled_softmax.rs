//! Full and sampled softmax losses with gradients taken with respect to the
//! logit vector itself (`∇o_j = e_j`).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{log_sum_exp, softmax, softmax_slice, Logits};
use crate::samplers::SampleBatch;

fn check_class(i: usize, n: usize) -> Result<()> {
    if i < n {
        Ok(())
    } else {
        Err(Error::OutOfRange { index: i, len: n })
    }
}

/// `log Σ_j exp(o_j) − o_positive`
pub fn full_loss(o: &Logits, positive: usize) -> Result<f64> {
    check_class(positive, o.len())?;
    let (m, rest) = crate::numeric::lse_parts(&o.0);
    Ok(((m - o.0[positive]) + rest.ln_1p()).max(0.0))
}

/// `softmax(o) − e_positive`
pub fn full_grad_logits(o: &Logits, positive: usize) -> Result<Vec<f64>> {
    check_class(positive, o.len())?;
    let mut g = softmax(o).into_vec();
    g[positive] -= 1.0;
    Ok(g)
}

/// Positive plus `M` importance-corrected sampled logits.
///
/// Entry 0 is always the positive and the only labelled position. A draw
/// that hits the positive class keeps its raw logit and acts as a negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedBatch {
    pub corrected_logits: Vec<f64>,
    pub source_indices: Vec<usize>,
    pub accidental_hits: usize,
}

impl CorrectedBatch {
    /// Number of sampled entries, excluding the positive.
    pub fn m(&self) -> usize {
        self.corrected_logits.len() - 1
    }

    pub fn positive(&self) -> usize {
        self.source_indices[0]
    }
}

/// Apply `o' = o_s − ln(M·q_s)` to every sampled negative.
pub fn correct_logits(o: &Logits, positive: usize, batch: &SampleBatch) -> Result<CorrectedBatch> {
    let n = o.len();
    check_class(positive, n)?;
    check_dim(batch.indices.len(), batch.probs.len())?;
    let m = batch.m() as f64;
    let mut corrected_logits = Vec::with_capacity(batch.m() + 1);
    let mut source_indices = Vec::with_capacity(batch.m() + 1);
    corrected_logits.push(o.0[positive]);
    source_indices.push(positive);
    let mut accidental_hits = 0;
    for (&s, &q) in batch.indices.iter().zip(&batch.probs) {
        check_class(s, n)?;
        if s == positive {
            accidental_hits += 1;
            corrected_logits.push(o.0[s]);
        } else {
            if !(q > 0.0) {
                return Err(Error::Domain(format!(
                    "sampled class {s} has proposal probability {q}"
                )));
            }
            corrected_logits.push(o.0[s] - (m * q).ln());
        }
        source_indices.push(s);
    }
    Ok(CorrectedBatch {
        corrected_logits,
        source_indices,
        accidental_hits,
    })
}

/// `log Σ_j exp(o'_j) − o'_0`
pub fn sampled_loss(cb: &CorrectedBatch) -> f64 {
    let lse = log_sum_exp(&cb.corrected_logits).expect("positive entry always present");
    (lse - cb.corrected_logits[0]).max(0.0)
}

/// `softmax(o') − y'` scattered onto the catalog, duplicates accumulated.
pub fn sampled_grad_scatter(cb: &CorrectedBatch, n: usize) -> Vec<f64> {
    let p = softmax_slice(&cb.corrected_logits);
    let mut g = vec![0.0; n];
    for (&i, &pj) in cb.source_indices.iter().zip(&p) {
        g[i] += pj;
    }
    g[cb.source_indices[0]] -= 1.0;
    g
}

/// Self-normalized importance weights `w̃_k ∝ p_{s_k} / q_{s_k}` over the draws.
pub fn self_normalized_weights(o: &Logits, batch: &SampleBatch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Domain(
            "self-normalized weights need at least one draw".into(),
        ));
    }
    let mut logw = Vec::with_capacity(batch.m());
    for (&s, &q) in batch.indices.iter().zip(&batch.probs) {
        check_class(s, o.len())?;
        if !(q > 0.0) {
            return Err(Error::Domain(format!(
                "draw {s} has proposal probability {q}"
            )));
        }
        logw.push(o.0[s] - q.ln());
    }
    Ok(softmax_slice(&logw))
}

/// Self-normalized importance-sampling estimate of the full gradient:
/// `−e_positive + Σ_k w̃_k e_{s_k}`.
///
/// The positive term is exact and only the softmax expectation is estimated
/// from the draws. With `q = softmax(o)` every weight equals `1/M` and the
/// estimate is unbiased.
pub fn self_normalized_grad(o: &Logits, positive: usize, batch: &SampleBatch) -> Result<Vec<f64>> {
    check_class(positive, o.len())?;
    let w = self_normalized_weights(o, batch)?;
    let mut g = vec![0.0; o.len()];
    for (&s, &wk) in batch.indices.iter().zip(&w) {
        g[s] += wk;
    }
    g[positive] -= 1.0;
    Ok(g)
}

/// Which sampled estimator to use where a caller can choose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradEstimator {
    /// Gradient of the corrected sampled softmax loss.
    #[default]
    SampledSoftmax,
    /// Self-normalized importance sampling over the draws only.
    SelfNormalized,
}

impl std::str::FromStr for GradEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled_softmax" | "sampled-softmax" => Ok(GradEstimator::SampledSoftmax),
            "self_normalized" | "self-normalized" | "snis" => Ok(GradEstimator::SelfNormalized),
            other => Err(Error::Config(format!(
                "unknown gradient estimator `{other}`"
            ))),
        }
    }
}

impl GradEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            GradEstimator::SampledSoftmax => "sampled_softmax",
            GradEstimator::SelfNormalized => "self_normalized",
        }
    }

    /// Logit-gradient estimate for one query and one batch of draws.
    pub fn estimate(self, o: &Logits, positive: usize, batch: &SampleBatch) -> Result<Vec<f64>> {
        match self {
            GradEstimator::SampledSoftmax => {
                let cb = correct_logits(o, positive, batch)?;
                Ok(sampled_grad_scatter(&cb, o.len()))
            }
            GradEstimator::SelfNormalized => self_normalized_grad(o, positive, batch),
        }
    }
}
