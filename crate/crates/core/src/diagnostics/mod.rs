//! Divergences between a proposal and the softmax target, the closed-form
//! bounds on them, Monte-Carlo gradient bias, frequency checks and timing.

mod bias;
mod gof;
mod timing;

pub use bias::{grad_bias_mc, grad_bias_mc_prepared, GradBiasConfig, GradBiasReport};
pub use gof::{chi_square_gof, chi_square_quantile, histogram, MIN_EXPECTED};
pub use timing::{timing_profile, TimingConfig, TimingRow, TimingTable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{inf_norm, softmax, EmbeddingMatrix, Logits, ProbabilityVector, QueryVector};
use crate::samplers::{PreparedQuery, SamplerKind, SamplerSpec};

/// `KL(q‖p) = Σ q_i ln(q_i/p_i)` with `0 ln 0 = 0`.
///
/// Returns `+inf` when `q` puts mass where `p` has none.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    check_dim(q.len(), p.len())?;
    let mut kl = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += qi * (qi / pi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// `d₂(p‖q) = Σ p_i² / q_i`, the exponentiated order-2 Rényi divergence.
///
/// Returns `+inf` when `p` puts mass where `q` has none.
pub fn renyi_d2(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(p.len(), q.len())?;
    let mut d2 = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            d2 += pi * pi / qi;
        }
    }
    Ok(d2)
}

/// Largest and smallest strictly positive normalized frequency.
pub fn unigram_extremes(frequencies: &[f64]) -> Result<(f64, f64)> {
    let total: f64 = frequencies.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Weights(
            "frequencies must have a positive sum".into(),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for &f in frequencies.iter().filter(|&&f| f > 0.0) {
        lo = lo.min(f / total);
        hi = hi.max(f / total);
    }
    Ok((lo, hi))
}

fn need<'a>(v: Option<&'a [f64]>, what: &str, kind: SamplerKind) -> Result<&'a [f64]> {
    v.ok_or_else(|| Error::Config(format!("`{kind}` bound needs {what}")))
}

/// Closed-form upper bound on `KL(Q‖P)` for each sampler kind.
///
/// uniform `2‖o‖∞`, unigram `2‖o‖∞ + ln(N·q_max)`, MIDX `2‖õ‖∞`.
pub fn kl_bound(
    kind: SamplerKind,
    o: &Logits,
    residual_scores: Option<&[f64]>,
    frequencies: Option<&[f64]>,
) -> Result<f64> {
    Ok(match kind {
        SamplerKind::Uniform => 2.0 * o.inf_norm(),
        SamplerKind::Unigram => {
            let f = need(frequencies, "frequencies", kind)?;
            check_dim(o.len(), f.len())?;
            let (_, q_max) = unigram_extremes(f)?;
            2.0 * o.inf_norm() + (o.len() as f64 * q_max).ln()
        }
        SamplerKind::MidxExact | SamplerKind::MidxFast => {
            let r = need(residual_scores, "residual scores", kind)?;
            check_dim(o.len(), r.len())?;
            2.0 * inf_norm(r)
        }
    })
}

/// `min{2, sqrt((d₂ − 1)/(M + 1))}`, the bias bound for a given `d₂(P‖Q)`.
pub fn d2_bias_bound(d2: f64, m: usize) -> f64 {
    let v = ((d2 - 1.0).max(0.0) / (m as f64 + 1.0)).sqrt();
    v.min(2.0)
}

/// Closed-form gradient-bias bound per sampler kind with `U = 1`.
pub fn bias_bound(
    kind: SamplerKind,
    o: &Logits,
    residual_scores: Option<&[f64]>,
    frequencies: Option<&[f64]>,
    m: usize,
) -> Result<f64> {
    let log_d2_cap = match kind {
        SamplerKind::Uniform => 2.0 * o.inf_norm(),
        SamplerKind::Unigram => {
            let f = need(frequencies, "frequencies", kind)?;
            check_dim(o.len(), f.len())?;
            let (q_min, _) = unigram_extremes(f)?;
            2.0 * o.inf_norm() - q_min.ln()
        }
        SamplerKind::MidxExact | SamplerKind::MidxFast => {
            let r = need(residual_scores, "residual scores", kind)?;
            check_dim(o.len(), r.len())?;
            2.0 * inf_norm(r)
        }
    };
    // exp(x) - 1 without losing precision near 0; saturates at the clamp
    let v = (log_d2_cap.exp_m1() / (m as f64 + 1.0)).sqrt();
    Ok(if v.is_finite() { v.min(2.0) } else { 2.0 })
}

/// One row of exact divergence diagnostics for a (sampler, query) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub sampler: SamplerKind,
    pub n: usize,
    pub m: usize,
    pub kl: f64,
    pub d2: f64,
    pub kl_bound: f64,
    pub grad_bias_bound: f64,
    pub d2_bias_bound: f64,
    pub o_inf_norm: f64,
    pub residual_inf_norm: Option<f64>,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub kl_within_bound: bool,
}

/// Exact `KL(Q‖P)`, `d₂(P‖Q)` and both bounds for one query.
pub fn divergence_report(
    spec: &SamplerSpec,
    emb: &EmbeddingMatrix,
    z: &QueryVector,
    m: usize,
) -> Result<DivergenceReport> {
    spec.check_catalog(emb.n_classes())?;
    let o = emb.logits(z)?;
    let p = softmax(&o);
    let pq = spec.prepare(z)?;
    let q = pq.proposal();
    let kl = kl_divergence(&q, p.as_slice())?;
    let d2 = renyi_d2(p.as_slice(), &q)?;
    let residual = match spec.index() {
        Some(index) => Some(index.residual_scores(z)?),
        None => None,
    };
    let freqs = match spec.kind() {
        SamplerKind::Unigram => spec.static_probabilities(),
        _ => None,
    };
    let kb = kl_bound(spec.kind(), &o, residual.as_deref(), freqs.as_deref())?;
    let gb = bias_bound(spec.kind(), &o, residual.as_deref(), freqs.as_deref(), m)?;
    let extremes = freqs.as_deref().map(unigram_extremes).transpose()?;
    Ok(DivergenceReport {
        sampler: spec.kind(),
        n: emb.n_classes(),
        m,
        kl,
        d2,
        kl_bound: kb,
        grad_bias_bound: gb,
        d2_bias_bound: d2_bias_bound(d2, m),
        o_inf_norm: o.inf_norm(),
        residual_inf_norm: residual.as_deref().map(inf_norm),
        q_min: extremes.map(|e| e.0),
        q_max: extremes.map(|e| e.1),
        // relative slack for rounding when the bound is tight at 0
        kl_within_bound: kl <= kb + 1e-12 * (1.0 + kb),
    })
}

/// Normalized draw frequencies over the catalog from `m_total` draws.
pub fn empirical_frequency<R: Rng + ?Sized>(
    pq: &PreparedQuery<'_>,
    m_total: usize,
    rng: &mut R,
) -> Result<ProbabilityVector> {
    if m_total == 0 {
        return Err(Error::Domain("need at least one draw".into()));
    }
    let mut counts = vec![0u64; pq.n_classes()];
    for _ in 0..m_total {
        counts[pq.draw_one(rng)] += 1;
    }
    let total = m_total as f64;
    ProbabilityVector::new(counts.iter().map(|&c| c as f64 / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;
    use crate::quantization::{IndexConfig, MultiIndex, QuantizerKind};
    use crate::rng::seeded;
    use std::sync::Arc;

    fn random_dist(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn kl_cases() {
        let p = random_dist(16, 1);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0])
            .unwrap()
            .is_infinite());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());

        let q = random_dist(16, 2);
        let mut naive = 0.0;
        for i in 0..16 {
            naive += q[i] * (q[i].ln() - p[i].ln());
        }
        assert!((kl_divergence(&q, &p).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn d2_cases() {
        assert!((renyi_d2(&[0.25; 4], &[0.25; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!((renyi_d2(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-15);
        assert!(renyi_d2(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_infinite());
        let p = random_dist(32, 3);
        let q = random_dist(32, 4);
        let mut naive = 0.0;
        for i in 0..32 {
            naive += p[i] * (p[i] / q[i]);
        }
        let d2 = renyi_d2(&p, &q).unwrap();
        assert!((d2 - naive).abs() < 1e-12);
        assert!(d2 >= 1.0);
    }

    #[test]
    fn kl_bound_cases() {
        let o = Logits(vec![1.0, -1.0]);
        assert_eq!(kl_bound(SamplerKind::Uniform, &o, None, None).unwrap(), 2.0);
        let o = Logits(vec![0.0, 0.0]);
        let b = kl_bound(SamplerKind::Unigram, &o, None, Some(&[1.0, 3.0])).unwrap();
        assert!((b - 1.5f64.ln()).abs() < 1e-15);
        assert!(kl_bound(SamplerKind::Unigram, &o, None, None).is_err());
        assert!(kl_bound(SamplerKind::MidxFast, &o, None, None).is_err());
    }

    #[test]
    fn zero_residual_catalog_is_tight() {
        let emb = EmbeddingMatrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        let idx = MultiIndex::build(&emb, &IndexConfig::new(2, QuantizerKind::Product, 0)).unwrap();
        let spec = SamplerSpec::midx_fast(Arc::new(idx));
        let z = QueryVector::new(vec![0.9, -0.4]).unwrap();
        let r = divergence_report(&spec, &emb, &z, 4).unwrap();
        assert_eq!(r.kl_bound, 0.0);
        assert!(r.kl.abs() < 1e-12);
        assert!(r.kl_within_bound);
        assert_eq!(r.grad_bias_bound, 0.0);
    }

    #[test]
    fn bias_bound_cases() {
        let zero = Logits(vec![0.0; 6]);
        assert_eq!(
            bias_bound(SamplerKind::Uniform, &zero, None, None, 10).unwrap(),
            0.0
        );
        assert_eq!(
            bias_bound(SamplerKind::MidxFast, &zero, Some(&[0.0; 6]), None, 10).unwrap(),
            0.0
        );
        let o = Logits(vec![1.0, -0.5, 0.2]);
        let b = bias_bound(SamplerKind::Uniform, &o, None, None, 99).unwrap();
        let expected = ((1f64).exp().powi(2) - 1.0).sqrt() / 10.0;
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 0.2527).abs() < 1e-4);
        let big = Logits(vec![400.0, 0.0]);
        assert_eq!(
            bias_bound(SamplerKind::Uniform, &big, None, None, 1).unwrap(),
            2.0
        );
        assert!(d2_bias_bound(1e300, 1) <= 2.0);
        assert_eq!(d2_bias_bound(1.0, 5), 0.0);
    }

    #[test]
    fn unigram_bounds_use_positive_support() {
        let (lo, hi) = unigram_extremes(&[0.0, 1.0, 3.0]).unwrap();
        assert_eq!((lo, hi), (0.25, 0.75));
    }

    #[test]
    fn empirical_frequency_cases() {
        let spec = SamplerSpec::uniform(4).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        let f = empirical_frequency(&pq, 1_000_000, &mut seeded(5)).unwrap();
        for &x in f.as_slice() {
            assert!((0.247..=0.253).contains(&x));
        }
        let spec = SamplerSpec::uniform(1).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        assert_eq!(
            empirical_frequency(&pq, 10_000, &mut seeded(5))
                .unwrap()
                .as_slice(),
            &[1.0]
        );
    }

    #[test]
    fn exact_midx_empirical_frequency_passes_chi_square() {
        let mut rng = seeded(6);
        let data: Vec<f64> = (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let emb = EmbeddingMatrix::new(Matrix::new(16, 4, data).unwrap()).unwrap();
        let z = QueryVector::new(vec![1.5, -0.5, 0.8, 2.0]).unwrap();
        let idx = MultiIndex::build(&emb, &IndexConfig::new(2, QuantizerKind::Product, 1)).unwrap();
        let spec = SamplerSpec::midx_exact(Arc::new(idx));
        let pq = spec.prepare(&z).unwrap();
        let f = empirical_frequency(&pq, 1_000_000, &mut rng).unwrap();
        let counts: Vec<u64> = f
            .as_slice()
            .iter()
            .map(|x| (x * 1e6).round() as u64)
            .collect();
        let p = softmax(&emb.logits(&z).unwrap());
        let (s, dof) = chi_square_gof(&counts, p.as_slice()).unwrap();
        assert!(s < chi_square_quantile(0.999, dof));
    }
}
