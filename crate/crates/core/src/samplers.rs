//! Proposal distributions for sampled softmax.
//!
//! Four samplers share one contract: [`SamplerSpec::prepare`] builds the
//! per-query state, after which [`PreparedQuery::draw`] produces i.i.d. class
//! draws and [`PreparedQuery::proposal_prob`] reports the exact `Q(i|z)`.
//!
//! The MIDX samplers draw in three stages: a first-level codeword `k1`, a
//! second-level codeword `k2` conditioned on `k1`, then a class inside the cell
//! `Ω[k1][k2]`. The exact kind weights classes inside a cell by their residual
//! score and reproduces the full softmax; the fast kind draws uniformly inside
//! the cell and never touches residuals.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alias::AliasTable;
use crate::error::{check_dim, Error, Result};
use crate::numeric::{max_value, Matrix, QueryVector};
use crate::quantization::MultiIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Unigram,
    MidxExact,
    MidxFast,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Uniform,
        SamplerKind::Unigram,
        SamplerKind::MidxExact,
        SamplerKind::MidxFast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Unigram => "unigram",
            SamplerKind::MidxExact => "midx_exact",
            SamplerKind::MidxFast => "midx_fast",
        }
    }

    pub fn is_midx(self) -> bool {
        matches!(self, SamplerKind::MidxExact | SamplerKind::MidxFast)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "unigram" => Ok(SamplerKind::Unigram),
            "midx_exact" | "midx-exact" => Ok(SamplerKind::MidxExact),
            "midx_fast" | "midx-fast" | "midx" => Ok(SamplerKind::MidxFast),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// A configured sampler over a catalog of `n_classes`.
#[derive(Debug, Clone)]
pub struct SamplerSpec {
    kind: SamplerKind,
    n_classes: usize,
    index: Option<Arc<MultiIndex>>,
    table: Option<AliasTable>,
}

impl SamplerSpec {
    /// Uniform or unigram sampler. Unigram needs `frequencies` of length `n`
    /// with a positive sum; zero-frequency classes are never drawn.
    pub fn make_static(kind: SamplerKind, n: usize, frequencies: Option<&[f64]>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("sampler needs at least one class".into()));
        }
        let table = match kind {
            SamplerKind::Uniform => AliasTable::uniform(n)?,
            SamplerKind::Unigram => {
                let f = frequencies
                    .ok_or_else(|| Error::Config("unigram sampler needs frequencies".into()))?;
                check_dim(n, f.len())?;
                AliasTable::new(f)?
            }
            other => return Err(Error::Config(format!("`{other}` is not a static sampler"))),
        };
        Ok(Self {
            kind,
            n_classes: n,
            index: None,
            table: Some(table),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::make_static(SamplerKind::Uniform, n, None)
    }

    pub fn unigram(frequencies: &[f64]) -> Result<Self> {
        Self::make_static(SamplerKind::Unigram, frequencies.len(), Some(frequencies))
    }

    pub fn midx(kind: SamplerKind, index: Arc<MultiIndex>) -> Result<Self> {
        if !kind.is_midx() {
            return Err(Error::Config(format!("`{kind}` does not use an index")));
        }
        Ok(Self {
            kind,
            n_classes: index.n_classes(),
            index: Some(index),
            table: None,
        })
    }

    pub fn midx_exact(index: Arc<MultiIndex>) -> Self {
        Self::midx(SamplerKind::MidxExact, index).expect("midx kind")
    }

    pub fn midx_fast(index: Arc<MultiIndex>) -> Self {
        Self::midx(SamplerKind::MidxFast, index).expect("midx kind")
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn index(&self) -> Option<&MultiIndex> {
        self.index.as_deref()
    }

    /// Normalized unigram frequencies, when this is a static sampler.
    pub fn static_probabilities(&self) -> Option<Vec<f64>> {
        self.table
            .as_ref()
            .map(|t| (0..t.len()).map(|i| t.probability(i)).collect())
    }

    /// Check the sampler indexes a catalog of `n` classes.
    pub fn check_catalog(&self, n: usize) -> Result<()> {
        if self.n_classes != n {
            return Err(Error::Config(format!(
                "sampler covers {} classes, catalog has {n}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Build the per-query sampling state.
    pub fn prepare(&self, z: &QueryVector) -> Result<PreparedQuery<'_>> {
        let state = match (self.kind, &self.index, &self.table) {
            (SamplerKind::Uniform | SamplerKind::Unigram, _, Some(table)) => State::Static(table),
            (SamplerKind::MidxExact, Some(index), _) => State::Midx(MidxState::exact(index, z)?),
            (SamplerKind::MidxFast, Some(index), _) => State::Midx(MidxState::fast(index, z)?),
            _ => unreachable!("constructors keep kind and payload consistent"),
        };
        Ok(PreparedQuery { spec: self, state })
    }

    /// Prepare every row of `queries` independently.
    pub fn prepare_batch(&self, queries: &Matrix) -> Result<Vec<PreparedQuery<'_>>> {
        queries
            .iter_rows()
            .map(|row| self.prepare(&QueryVector::new(row.to_vec())?))
            .collect()
    }
}

/// Query-specific sampling state; discard after use.
#[derive(Debug)]
pub struct PreparedQuery<'a> {
    spec: &'a SamplerSpec,
    state: State<'a>,
}

#[derive(Debug)]
enum State<'a> {
    Static(&'a AliasTable),
    Midx(MidxState<'a>),
}

#[derive(Debug)]
struct MidxState<'a> {
    index: &'a MultiIndex,
    exact: bool,
    stage1: AliasTable,
    stage2: Vec<Option<AliasTable>>,
    /// Exact kind only: per-cell tables over the cell list, `None` for empty cells.
    stage3: Vec<Option<AliasTable>>,
    log_psi: Vec<f64>,
    log_omega: Vec<f64>,
    shift: f64,
}

/// Shifted exponentials of log-weights; `-inf` maps to exactly zero.
fn exp_shifted(logw: &[f64]) -> (Vec<f64>, f64) {
    let m = max_value(logw);
    let w = logw
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                (l - m).exp()
            }
        })
        .collect();
    (w, m)
}

impl<'a> MidxState<'a> {
    fn exact(index: &'a MultiIndex, z: &QueryVector) -> Result<Self> {
        let residual = index.residual_scores(z)?;
        let shift = max_value(&residual);
        let mut log_omega = vec![f64::NEG_INFINITY; index.cells().len()];
        let mut stage3 = Vec::with_capacity(index.cells().len());
        for (cell, members) in index.cells().iter().enumerate() {
            if members.is_empty() {
                stage3.push(None);
                continue;
            }
            let scores: Vec<f64> = members.iter().map(|&j| residual[j as usize]).collect();
            // A per-cell shift cancels inside P³ and keeps every cell table buildable.
            let (w, local) = exp_shifted(&scores);
            log_omega[cell] = local + w.iter().sum::<f64>().ln();
            stage3.push(Some(AliasTable::from_vec(w)?));
        }
        Self::assemble(index, z, true, log_omega, stage3, shift)
    }

    fn fast(index: &'a MultiIndex, z: &QueryVector) -> Result<Self> {
        check_dim(index.dim(), z.dim())?;
        let log_omega = index.log_cell_sizes().to_vec();
        Self::assemble(index, z, false, log_omega, Vec::new(), 0.0)
    }

    fn assemble(
        index: &'a MultiIndex,
        z: &QueryVector,
        exact: bool,
        log_omega: Vec<f64>,
        stage3: Vec<Option<AliasTable>>,
        residual_shift: f64,
    ) -> Result<Self> {
        let (s1, s2) = index.stage_scores(z)?;
        let k = index.k();
        let mut log_psi = vec![f64::NEG_INFINITY; k];
        let mut stage2 = Vec::with_capacity(k);
        for k1 in 0..k {
            let row: Vec<f64> = (0..k)
                .map(|k2| log_omega[index.cell_id(k1, k2)] + s2[k2])
                .collect();
            let m = max_value(&row);
            if m == f64::NEG_INFINITY {
                stage2.push(None);
                continue;
            }
            let (w, _) = exp_shifted(&row);
            log_psi[k1] = m + w.iter().sum::<f64>().ln();
            stage2.push(Some(AliasTable::from_vec(w)?));
        }
        let first: Vec<f64> = (0..k).map(|k1| log_psi[k1] + s1[k1]).collect();
        let (w, shift) = exp_shifted(&first);
        let stage1 = AliasTable::from_vec(w)?;
        Ok(Self {
            index,
            exact,
            stage1,
            stage2,
            stage3,
            log_psi,
            log_omega,
            shift: if exact { residual_shift } else { shift },
        })
    }

    #[inline]
    fn stage_probs(&self, i: usize) -> (f64, f64, f64) {
        let (k1, k2) = self.index.codes(i);
        let cell = self.index.cell_id(k1, k2);
        let p1 = self.stage1.probability(k1);
        let p2 = self.stage2[k1].as_ref().map_or(0.0, |t| t.probability(k2));
        let p3 = if self.exact {
            self.stage3[cell]
                .as_ref()
                .map_or(0.0, |t| t.probability(self.index.slot(i)))
        } else {
            1.0 / self.index.cells()[cell].len() as f64
        };
        (p1, p2, p3)
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let k1 = self.stage1.draw(rng);
        let k2 = self.stage2[k1]
            .as_ref()
            .expect("stage 1 never selects an empty row")
            .draw(rng);
        let cell = self.index.cell_id(k1, k2);
        let members = &self.index.cells()[cell];
        let slot = if self.exact {
            self.stage3[cell]
                .as_ref()
                .expect("stage 2 never selects an empty cell")
                .draw(rng)
        } else {
            rng.random_range(0..members.len())
        };
        members[slot] as usize
    }
}

/// `M` draws with replacement and their proposal probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
}

impl SampleBatch {
    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// A batch with no draws.
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            probs: Vec::new(),
        }
    }
}

impl<'a> PreparedQuery<'a> {
    pub fn kind(&self) -> SamplerKind {
        self.spec.kind
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    /// `Q(i|z)`
    pub fn proposal_prob(&self, i: usize) -> Result<f64> {
        let n = self.spec.n_classes;
        if i >= n {
            return Err(Error::OutOfRange { index: i, len: n });
        }
        Ok(self.prob_unchecked(i))
    }

    #[inline]
    fn prob_unchecked(&self, i: usize) -> f64 {
        match &self.state {
            State::Static(t) => t.probability(i),
            State::Midx(s) => {
                let (p1, p2, p3) = s.stage_probs(i);
                p1 * p2 * p3
            }
        }
    }

    /// The full proposal vector `Q(·|z)`.
    pub fn proposal(&self) -> Vec<f64> {
        (0..self.spec.n_classes)
            .map(|i| self.prob_unchecked(i))
            .collect()
    }

    /// `(P¹(k1), P²(k2|k1), P³(i|k1,k2))` for class `i` under a MIDX sampler.
    pub fn stage_probabilities(&self, i: usize) -> Option<(f64, f64, f64)> {
        match &self.state {
            State::Midx(s) if i < self.spec.n_classes => Some(s.stage_probs(i)),
            _ => None,
        }
    }

    /// `log ψ_k1` per first-level codeword (MIDX only).
    pub fn log_psi(&self) -> Option<&[f64]> {
        match &self.state {
            State::Midx(s) => Some(&s.log_psi),
            State::Static(_) => None,
        }
    }

    /// `log ω` per flat cell id (MIDX only); `-inf` for empty cells.
    pub fn log_omega(&self) -> Option<&[f64]> {
        match &self.state {
            State::Midx(s) => Some(&s.log_omega),
            State::Static(_) => None,
        }
    }

    /// Stabilization constant: max residual score (exact) or max stage-1 log-weight (fast).
    pub fn shift(&self) -> Option<f64> {
        match &self.state {
            State::Midx(s) => Some(s.shift),
            State::Static(_) => None,
        }
    }

    #[inline]
    pub fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.state {
            State::Static(t) => t.draw(rng),
            State::Midx(s) => s.draw(rng),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> SampleBatch {
        let mut indices = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m);
        for _ in 0..m {
            let i = self.draw_one(rng);
            indices.push(i);
            probs.push(self.prob_unchecked(i));
        }
        SampleBatch { indices, probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{chi_square_gof, chi_square_quantile};
    use crate::numeric::{softmax, EmbeddingMatrix};
    use crate::quantization::{IndexConfig, QuantizerKind};
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut crate::rng::SeedRng, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    }

    fn instance(n: usize, d: usize, seed: u64) -> (EmbeddingMatrix, QueryVector) {
        let mut rng = seeded(seed);
        let emb = EmbeddingMatrix::new(Matrix::new(n, d, gaussian(&mut rng, n * d, 1.0)).unwrap())
            .unwrap();
        let z = QueryVector::new(gaussian(&mut rng, d, 0.7)).unwrap();
        (emb, z)
    }

    fn index(emb: &EmbeddingMatrix, k: usize, kind: QuantizerKind) -> Arc<MultiIndex> {
        Arc::new(MultiIndex::build(emb, &IndexConfig::new(k, kind, 11)).unwrap())
    }

    #[test]
    fn fast_single_cell_is_uniform() {
        let (emb, z) = instance(20, 4, 1);
        let spec = SamplerSpec::midx_fast(index(&emb, 1, QuantizerKind::Product));
        let pq = spec.prepare(&z).unwrap();
        for i in 0..20 {
            let (p1, p2, p3) = pq.stage_probabilities(i).unwrap();
            assert_eq!((p1, p2), (1.0, 1.0));
            assert!((p3 - 0.05).abs() < 1e-15);
            assert!((pq.proposal_prob(i).unwrap() - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_matches_softmax() {
        for kind in [QuantizerKind::Product, QuantizerKind::Residual] {
            let (emb, z) = instance(64, 8, 2);
            let spec = SamplerSpec::midx_exact(index(&emb, 4, kind));
            let pq = spec.prepare(&z).unwrap();
            let p = softmax(&emb.logits(&z).unwrap());
            for i in 0..64 {
                assert!((pq.proposal_prob(i).unwrap() - p[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fast_equals_softmax_when_quantization_is_exact() {
        let emb = EmbeddingMatrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let idx = index(&emb, 2, QuantizerKind::Product);
        assert_eq!(idx.distortion(), 0.0);
        let z = QueryVector::new(vec![0.8, -1.7]).unwrap();
        let pq_spec = SamplerSpec::midx_fast(idx);
        let pq = pq_spec.prepare(&z).unwrap();
        let p = softmax(&emb.logits(&z).unwrap());
        for i in 0..5 {
            assert!((pq.proposal_prob(i).unwrap() - p[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn fast_matches_residual_corrected_softmax() {
        let (emb, z) = instance(64, 8, 3);
        let idx = index(&emb, 4, QuantizerKind::Product);
        let pq_spec = SamplerSpec::midx_fast(idx.clone());
        let pq = pq_spec.prepare(&z).unwrap();
        let o = emb.logits(&z).unwrap();
        let r = idx.residual_scores(&z).unwrap();
        let direct: Vec<f64> = o.0.iter().zip(&r).map(|(a, b)| (a - b).exp()).collect();
        let total: f64 = direct.iter().sum();
        for i in 0..64 {
            assert!((pq.proposal_prob(i).unwrap() - direct[i] / total).abs() < 1e-10);
        }
    }

    #[test]
    fn static_samplers() {
        let spec = SamplerSpec::uniform(10).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        for i in 0..10 {
            assert!((pq.proposal_prob(i).unwrap() - 0.1).abs() < 1e-15);
        }
        assert!(pq.proposal_prob(10).is_err());

        let spec = SamplerSpec::unigram(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        for (i, e) in [0.1, 0.2, 0.3, 0.4].iter().enumerate() {
            assert!((pq.proposal_prob(i).unwrap() - e).abs() < 1e-15);
        }

        let spec = SamplerSpec::make_static(SamplerKind::Uniform, 5, None).unwrap();
        let q = spec
            .prepare(&QueryVector::new(vec![]).unwrap())
            .unwrap()
            .proposal();
        assert_eq!(q, vec![0.2; 5]);

        assert!(SamplerSpec::make_static(SamplerKind::Unigram, 3, None).is_err());
        assert!(SamplerSpec::make_static(SamplerKind::Unigram, 2, Some(&[0.0, 0.0])).is_err());
        assert!(SamplerSpec::make_static(SamplerKind::Unigram, 3, Some(&[1.0])).is_err());
        assert!(SamplerSpec::make_static(SamplerKind::MidxFast, 3, None).is_err());
    }

    #[test]
    fn unigram_zero_frequency_excluded() {
        let spec = SamplerSpec::unigram(&[0.0, 1.0, 1.0]).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        assert_eq!(pq.proposal(), vec![0.0, 0.5, 0.5]);
        let b = pq.draw(100_000, &mut seeded(4));
        assert!(b.indices.iter().all(|&i| i != 0));
    }

    #[test]
    fn unigram_binomial_frequency() {
        let spec = SamplerSpec::unigram(&[3.0, 1.0]).unwrap();
        let pq = spec.prepare(&QueryVector::new(vec![]).unwrap()).unwrap();
        let b = pq.draw(1_000_000, &mut seeded(5));
        let f = b.indices.iter().filter(|&&i| i == 0).count() as f64 / 1e6;
        assert!((f - 0.75).abs() <= 0.0015, "{f}");
    }

    #[test]
    fn fast_k1_draws_pass_chi_square() {
        let (emb, z) = instance(4, 2, 6);
        let spec = SamplerSpec::midx_fast(index(&emb, 1, QuantizerKind::Product));
        let pq = spec.prepare(&z).unwrap();
        let b = pq.draw(1_000_000, &mut seeded(6));
        let mut c = vec![0u64; 4];
        for &i in &b.indices {
            c[i] += 1;
        }
        let (stat, dof) = chi_square_gof(&c, &[0.25; 4]).unwrap();
        assert!(stat < chi_square_quantile(0.999, dof));
    }

    #[test]
    fn exact_draws_pass_chi_square_against_softmax() {
        let (emb, z) = instance(16, 4, 7);
        let spec = SamplerSpec::midx_exact(index(&emb, 2, QuantizerKind::Residual));
        let pq = spec.prepare(&z).unwrap();
        let b = pq.draw(1_000_000, &mut seeded(7));
        let mut c = vec![0u64; 16];
        for &i in &b.indices {
            c[i] += 1;
        }
        let p = softmax(&emb.logits(&z).unwrap());
        let (stat, dof) = chi_square_gof(&c, p.as_slice()).unwrap();
        assert!(stat < chi_square_quantile(0.999, dof), "{stat} dof {dof}");
    }

    #[test]
    fn singleton_catalog_always_drawn() {
        let emb = EmbeddingMatrix::from_rows(&[vec![0.5, 2.0]]).unwrap();
        for kind in [SamplerKind::MidxExact, SamplerKind::MidxFast] {
            let spec = SamplerSpec::midx(kind, index(&emb, 3, QuantizerKind::Product)).unwrap();
            let pq = spec
                .prepare(&QueryVector::new(vec![3.0, -1.0]).unwrap())
                .unwrap();
            let b = pq.draw(50, &mut seeded(8));
            assert!(b.indices.iter().all(|&i| i == 0));
            assert!(b.probs.iter().all(|&p| p == 1.0));
        }
    }

    #[test]
    fn batch_probs_consistent_and_deterministic() {
        let (emb, z) = instance(50, 6, 9);
        let idx = index(&emb, 4, QuantizerKind::Product);
        let specs = [
            SamplerSpec::uniform(50).unwrap(),
            SamplerSpec::unigram(&(1..=50).map(f64::from).collect::<Vec<_>>()).unwrap(),
            SamplerSpec::midx_exact(idx.clone()),
            SamplerSpec::midx_fast(idx),
        ];
        for spec in &specs {
            let pq = spec.prepare(&z).unwrap();
            let a = pq.draw(200, &mut seeded(10));
            let b = pq.draw(200, &mut seeded(10));
            assert_eq!(a, b);
            for (&i, &p) in a.indices.iter().zip(&a.probs) {
                assert_eq!(p, pq.proposal_prob(i).unwrap());
                assert!(p > 0.0 && p <= 1.0);
            }
            let total: f64 = pq.proposal().iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "{} {total}", spec.kind());
        }
    }

    #[test]
    fn empty_cells_have_zero_weight() {
        let (emb, z) = instance(30, 4, 12);
        let idx = index(&emb, 8, QuantizerKind::Product);
        assert!(idx.nonempty_cells() < 64);
        for kind in [SamplerKind::MidxExact, SamplerKind::MidxFast] {
            let spec = SamplerSpec::midx(kind, idx.clone()).unwrap();
            let pq = spec.prepare(&z).unwrap();
            let log_omega = pq.log_omega().unwrap();
            for (cell, members) in idx.cells().iter().enumerate() {
                assert_eq!(members.is_empty(), log_omega[cell] == f64::NEG_INFINITY);
            }
            let b = pq.draw(20_000, &mut seeded(13));
            for &i in &b.indices {
                let (k1, k2) = idx.codes(i);
                assert!(idx.cell_size(k1, k2) > 0);
            }
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let (emb, _) = instance(40, 4, 14);
        let z = QueryVector::new(vec![400.0, -350.0, 500.0, 300.0]).unwrap();
        let idx = index(&emb, 3, QuantizerKind::Residual);
        let p = softmax(&emb.logits(&z).unwrap());
        let pq_spec = SamplerSpec::midx_exact(idx.clone());
        let pq = pq_spec.prepare(&z).unwrap();
        for i in 0..40 {
            assert!((pq.proposal_prob(i).unwrap() - p[i]).abs() < 1e-10);
        }
        let fast_spec = SamplerSpec::midx_fast(idx);
        let fast = fast_spec.prepare(&z).unwrap();
        assert!((fast.proposal().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (emb, _) = instance(10, 4, 15);
        let spec = SamplerSpec::midx_fast(index(&emb, 2, QuantizerKind::Product));
        assert!(spec
            .prepare(&QueryVector::new(vec![1.0; 3]).unwrap())
            .is_err());
        let spec = SamplerSpec::midx_exact(index(&emb, 2, QuantizerKind::Product));
        assert!(spec
            .prepare(&QueryVector::new(vec![1.0; 5]).unwrap())
            .is_err());
    }
}
