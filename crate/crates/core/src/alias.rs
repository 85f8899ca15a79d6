//! Vose alias tables: O(K) construction, O(1) categorical draws.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
    weights: Vec<f64>,
    total_weight: f64,
}

impl AliasTable {
    /// Build a table whose draws follow `weights / Σ weights`.
    pub fn new(weights: &[f64]) -> Result<Self> {
        Self::from_vec(weights.to_vec())
    }

    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Weights(
                "alias table needs at least one outcome".into(),
            ));
        }
        if k > u32::MAX as usize {
            return Err(Error::Weights("too many outcomes".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::Weights(format!(
                "weight {w} is negative or non-finite"
            )));
        }
        let total_weight: f64 = weights.iter().sum();
        if !(total_weight > 0.0) || !total_weight.is_finite() {
            return Err(Error::Weights(
                "weights must have a positive finite sum".into(),
            ));
        }

        let scale = k as f64 / total_weight;
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let mut prob = vec![0.0; k];
        let mut alias: Vec<u32> = (0..k as u32).collect();

        let mut small = Vec::with_capacity(k);
        let mut large = Vec::with_capacity(k);
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }

        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }

        // Leftovers are within rounding of 1.
        let fallback = weights
            .iter()
            .enumerate()
            .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
        for i in large.into_iter().chain(small) {
            if weights[i] > 0.0 {
                prob[i] = 1.0;
                alias[i] = i as u32;
            } else {
                prob[i] = 0.0;
                alias[i] = fallback as u32;
            }
        }

        Ok(Self {
            prob,
            alias,
            weights,
            total_weight,
        })
    }

    /// A table over `k` equally likely outcomes.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_vec(vec![1.0; k])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.prob.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prob_column(&self) -> &[f64] {
        &self.prob
    }

    pub fn alias_column(&self) -> &[u32] {
        &self.alias
    }

    /// Draw probability of outcome `i`, from the weights.
    #[inline]
    pub fn probability(&self, i: usize) -> f64 {
        self.weights[i] / self.total_weight
    }

    /// Per-outcome probabilities implied by the prob/alias columns.
    pub fn reconstructed_probabilities(&self) -> Vec<f64> {
        let k = self.len();
        let mut out = self.prob.clone();
        for (j, &a) in self.alias.iter().enumerate() {
            out[a as usize] += 1.0 - self.prob[j];
        }
        for p in &mut out {
            *p /= k as f64;
        }
        out
    }

    /// One uniform column draw, one Bernoulli comparison.
    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let column = rng.random_range(0..self.prob.len());
        let u: f64 = rng.random();
        if u < self.prob[column] {
            column
        } else {
            self.alias[column] as usize
        }
    }
}
