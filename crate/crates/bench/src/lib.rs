//! Shared fixtures for the sampling benchmarks.

use std::sync::Arc;

use midx_core::toy_trainer::gen_task;
use midx_core::{
    EmbeddingMatrix, IndexConfig, MultiIndex, QuantizerKind, QueryVector, Result, SamplerKind,
    SamplerSpec, TaskConfig,
};

/// A clustered catalog of `n` classes with one query and a built index.
pub struct Fixture {
    pub catalog: EmbeddingMatrix,
    pub query: QueryVector,
    pub index: Arc<MultiIndex>,
    pub frequencies: Vec<f64>,
}

impl Fixture {
    pub fn new(n: usize, dim: usize, k: usize, kind: QuantizerKind, seed: u64) -> Result<Self> {
        let task = gen_task(&TaskConfig {
            n_classes: n,
            dim,
            n_queries: 1,
            clusters: 16.min(n),
            noise: 0.5,
            seed,
        })?;
        let mut cfg = IndexConfig::new(k, kind, seed);
        cfg.iters = 5;
        let index = Arc::new(MultiIndex::build(&task.catalog, &cfg)?);
        let frequencies = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
        Ok(Self {
            query: task.query(0),
            catalog: task.catalog,
            index,
            frequencies,
        })
    }

    pub fn spec(&self, kind: SamplerKind) -> Result<SamplerSpec> {
        match kind {
            SamplerKind::Uniform => SamplerSpec::uniform(self.catalog.n_classes()),
            SamplerKind::Unigram => SamplerSpec::unigram(&self.frequencies),
            _ => SamplerSpec::midx(kind, self.index.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_supports_every_kind() {
        let fx = Fixture::new(300, 8, 4, QuantizerKind::Residual, 1).unwrap();
        for kind in SamplerKind::ALL {
            let spec = fx.spec(kind).unwrap();
            let pq = spec.prepare(&fx.query).unwrap();
            assert_eq!(pq.proposal().len(), 300);
        }
    }
}
