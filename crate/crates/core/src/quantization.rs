//! K-means codebooks and the two-level inverted multi-index.
//!
//! A [`MultiIndex`] stores two codebooks, the codeword pair assigned to every
//! class, the residual left after reconstruction, and the inverted cell lists
//! `Ω[k1][k2]`. Cells are addressed by the flat id `k1 * k + k2`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{dot_unchecked, inf_norm, EmbeddingMatrix, Matrix, QueryVector};
use crate::rng::{split, SeedRng};

pub const DEFAULT_KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    /// Split `D` into two halves, quantize each half independently.
    Product,
    /// Quantize, then quantize what is left; codewords are full-width and summed.
    Residual,
}

impl QuantizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::Product => "product",
            QuantizerKind::Residual => "residual",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            QuantizerKind::Product => 0,
            QuantizerKind::Residual => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(QuantizerKind::Product),
            1 => Ok(QuantizerKind::Residual),
            t => Err(Error::Format(format!("unknown quantizer kind tag {t}"))),
        }
    }

    /// Codeword width for a catalog of dimension `dim`.
    pub fn codeword_dim(self, dim: usize) -> usize {
        match self {
            QuantizerKind::Product => dim / 2,
            QuantizerKind::Residual => dim,
        }
    }

    pub fn check_dim(self, dim: usize) -> Result<()> {
        match self {
            QuantizerKind::Product if dim < 2 || dim % 2 != 0 => Err(Error::Config(format!(
                "product quantization needs an even dimension >= 2, got {dim}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" | "pq" => Ok(QuantizerKind::Product),
            "residual" | "rq" => Ok(QuantizerKind::Residual),
            other => Err(Error::Config(format!("unknown quantizer kind `{other}`"))),
        }
    }
}

/// `K` codewords of equal width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    codewords: Matrix,
}

impl Codebook {
    pub fn new(codewords: Matrix) -> Result<Self> {
        if codewords.rows() == 0 {
            return Err(Error::Config("codebook needs at least one codeword".into()));
        }
        if !codewords.is_finite() {
            return Err(Error::Numerical(
                "codebook contains non-finite values".into(),
            ));
        }
        Ok(Self { codewords })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.codewords.rows()
    }

    #[inline]
    pub fn cw_dim(&self) -> usize {
        self.codewords.cols()
    }

    #[inline]
    pub fn codeword(&self, j: usize) -> &[f64] {
        self.codewords.row(j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.codewords
    }

    /// Index of the closest codeword by squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest_row(&self.codewords, x).0
    }

    /// `x · c_j` for every codeword.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.codewords
            .iter_rows()
            .map(|c| dot_unchecked(c, x))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_trace: Vec<f64>,
    /// Set when `k` exceeded the number of points and was reduced.
    pub reduced_k: bool,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn wcss(&self) -> f64 {
        *self.wcss_trace.last().unwrap_or(&0.0)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_row(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(points: &Matrix, k: usize, rng: &mut SeedRng) -> Matrix {
    let m = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            let d = sq_dist(p, centroids.row(c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn assign_all(points: &Matrix, centroids: &Matrix, out: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut wcss = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let (j, d) = nearest_row(centroids, p);
        out[i] = j;
        dists[i] = d;
        wcss += d;
    }
    wcss
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `iters` update steps or as soon as an assignment step leaves
/// every point where it was. A cluster that empties out is re-seeded with the
/// point currently farthest from its centroid.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, rng: &mut SeedRng) -> Result<KMeansResult> {
    let m = points.rows();
    if m == 0 {
        return Err(Error::Config("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if iters == 0 {
        return Err(Error::Config("k-means needs at least one iteration".into()));
    }
    let reduced_k = k > m;
    let k = k.min(m);
    let d = points.cols();

    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignments = vec![0usize; m];
    let mut dists = vec![0.0; m];
    let mut wcss_trace = vec![assign_all(points, &centroids, &mut assignments, &mut dists)];
    let mut next = assignments.clone();
    let mut iterations = 0;

    for _ in 0..iters {
        iterations += 1;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            let j = assignments[i];
            counts[j] += 1;
            for (s, x) in sums.row_mut(j).iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            }
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..m).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
            centroids.row_mut(j).copy_from_slice(points.row(far));
            dists[far] = 0.0;
        }

        let wcss = assign_all(points, &centroids, &mut next, &mut dists);
        wcss_trace.push(wcss);
        let unchanged = next == assignments;
        std::mem::swap(&mut assignments, &mut next);
        if unchanged {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        wcss_trace,
        reduced_k,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub k: usize,
    pub kind: QuantizerKind,
    pub iters: usize,
    pub seed: u64,
}

impl IndexConfig {
    pub fn new(k: usize, kind: QuantizerKind, seed: u64) -> Self {
        Self {
            k,
            kind,
            iters: DEFAULT_KMEANS_ITERS,
            seed,
        }
    }
}

/// Two-codebook inverted multi-index over a class catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndex {
    kind: QuantizerKind,
    dim: usize,
    books: [Codebook; 2],
    assign: [Vec<u32>; 2],
    residuals: Matrix,
    cells: Vec<Vec<u32>>,
    /// `ln |Ω|` per cell, `-inf` when empty.
    log_sizes: Vec<f64>,
    slot: Vec<u32>,
}

impl MultiIndex {
    /// Assemble an index from codebooks and per-class assignments; residuals
    /// and cell lists are recomputed from the catalog.
    pub fn from_parts(
        emb: &EmbeddingMatrix,
        kind: QuantizerKind,
        books: [Codebook; 2],
        assign1: Vec<u32>,
        assign2: Vec<u32>,
    ) -> Result<Self> {
        let n = emb.n_classes();
        let dim = emb.dim();
        kind.check_dim(dim)?;
        let cw = kind.codeword_dim(dim);
        for b in &books {
            check_dim(cw, b.cw_dim())?;
        }
        if books[0].k() != books[1].k() {
            return Err(Error::Config(format!(
                "codebooks differ in size: {} vs {}",
                books[0].k(),
                books[1].k()
            )));
        }
        check_dim(n, assign1.len())?;
        check_dim(n, assign2.len())?;
        let k = books[0].k();
        for &a in assign1.iter().chain(&assign2) {
            if a as usize >= k {
                return Err(Error::OutOfRange {
                    index: a as usize,
                    len: k,
                });
            }
        }

        let mut residuals = emb.matrix().clone();
        let mut cells = vec![Vec::new(); k * k];
        let mut slot = vec![0u32; n];
        for i in 0..n {
            let (k1, k2) = (assign1[i] as usize, assign2[i] as usize);
            let r = residuals.row_mut(i);
            match kind {
                QuantizerKind::Product => {
                    let (lo, hi) = r.split_at_mut(cw);
                    sub_assign(lo, books[0].codeword(k1));
                    sub_assign(hi, books[1].codeword(k2));
                }
                QuantizerKind::Residual => {
                    sub_assign(r, books[0].codeword(k1));
                    sub_assign(r, books[1].codeword(k2));
                }
            }
            let cell = &mut cells[k1 * k + k2];
            slot[i] = cell.len() as u32;
            cell.push(i as u32);
        }

        Ok(Self {
            kind,
            dim,
            books,
            assign: [assign1, assign2],
            residuals,
            log_sizes: cells
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        (c.len() as f64).ln()
                    }
                })
                .collect(),
            cells,
            slot,
        })
    }

    /// Learn both codebooks with k-means and index the catalog.
    pub fn build(emb: &EmbeddingMatrix, config: &IndexConfig) -> Result<Self> {
        let kind = config.kind;
        kind.check_dim(emb.dim())?;
        if config.k == 0 {
            return Err(Error::Config("codebook size must be >= 1".into()));
        }
        let mut rng1 = split(config.seed, 1);
        let mut rng2 = split(config.seed, 2);
        let (first, second) = match kind {
            QuantizerKind::Product => {
                let h = emb.dim() / 2;
                let lo = emb.matrix().column_block(0, h);
                let hi = emb.matrix().column_block(h, emb.dim());
                (
                    kmeans(&lo, config.k, config.iters, &mut rng1)?,
                    kmeans(&hi, config.k, config.iters, &mut rng2)?,
                )
            }
            QuantizerKind::Residual => {
                let first = kmeans(emb.matrix(), config.k, config.iters, &mut rng1)?;
                let mut left = emb.matrix().clone();
                for i in 0..left.rows() {
                    sub_assign(left.row_mut(i), first.centroids.row(first.assignments[i]));
                }
                let second = kmeans(&left, config.k, config.iters, &mut rng2)?;
                (first, second)
            }
        };
        let to_u32 = |a: Vec<usize>| a.into_iter().map(|x| x as u32).collect::<Vec<_>>();
        Self::from_parts(
            emb,
            kind,
            [
                Codebook::new(first.centroids)?,
                Codebook::new(second.centroids)?,
            ],
            to_u32(first.assignments),
            to_u32(second.assignments),
        )
    }

    /// Index the catalog under fixed codebooks, assigning each class to its
    /// nearest codeword (greedily, level by level, for the residual kind).
    pub fn with_codebooks(
        emb: &EmbeddingMatrix,
        kind: QuantizerKind,
        books: [Codebook; 2],
    ) -> Result<Self> {
        kind.check_dim(emb.dim())?;
        let cw = kind.codeword_dim(emb.dim());
        for b in &books {
            check_dim(cw, b.cw_dim())?;
        }
        let n = emb.n_classes();
        let mut a1 = Vec::with_capacity(n);
        let mut a2 = Vec::with_capacity(n);
        for i in 0..n {
            let q = emb.row(i);
            match kind {
                QuantizerKind::Product => {
                    a1.push(books[0].nearest(&q[..cw]) as u32);
                    a2.push(books[1].nearest(&q[cw..]) as u32);
                }
                QuantizerKind::Residual => {
                    let k1 = books[0].nearest(q);
                    let mut r = q.to_vec();
                    sub_assign(&mut r, books[0].codeword(k1));
                    a1.push(k1 as u32);
                    a2.push(books[1].nearest(&r) as u32);
                }
            }
        }
        Self::from_parts(emb, kind, books, a1, a2)
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.residuals.rows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Codewords per codebook.
    pub fn k(&self) -> usize {
        self.books[0].k()
    }

    pub fn codebook(&self, level: usize) -> &Codebook {
        &self.books[level]
    }

    pub fn codebooks(&self) -> &[Codebook; 2] {
        &self.books
    }

    pub fn assignments(&self, level: usize) -> &[u32] {
        &self.assign[level]
    }

    /// Codeword pair of class `i`.
    #[inline]
    pub fn codes(&self, i: usize) -> (usize, usize) {
        (self.assign[0][i] as usize, self.assign[1][i] as usize)
    }

    #[inline]
    pub fn cell_id(&self, k1: usize, k2: usize) -> usize {
        k1 * self.k() + k2
    }

    pub fn cell(&self, k1: usize, k2: usize) -> &[u32] {
        &self.cells[self.cell_id(k1, k2)]
    }

    pub fn cells(&self) -> &[Vec<u32>] {
        &self.cells
    }

    pub fn cell_size(&self, k1: usize, k2: usize) -> usize {
        self.cell(k1, k2).len()
    }

    /// Position of class `i` inside its cell list.
    #[inline]
    pub fn slot(&self, i: usize) -> usize {
        self.slot[i] as usize
    }

    /// `ln |Ω_{k₁,k₂}|` for every cell id, `-inf` for empty cells.
    pub fn log_cell_sizes(&self) -> &[f64] {
        &self.log_sizes
    }

    pub fn nonempty_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }

    pub fn residuals(&self) -> &Matrix {
        &self.residuals
    }

    pub fn residual(&self, i: usize) -> &[f64] {
        self.residuals.row(i)
    }

    /// Quantized reconstruction of class `i` (embedding minus residual).
    pub fn reconstruction(&self, i: usize) -> Vec<f64> {
        let (k1, k2) = self.codes(i);
        let (c1, c2) = (self.books[0].codeword(k1), self.books[1].codeword(k2));
        match self.kind {
            QuantizerKind::Product => c1.iter().chain(c2).copied().collect(),
            QuantizerKind::Residual => c1.iter().zip(c2).map(|(a, b)| a + b).collect(),
        }
    }

    /// Codeword scores used by the two sampling stages: half-queries for the
    /// product kind, the full query for the residual kind.
    pub fn stage_scores(&self, z: &QueryVector) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim, z.dim())?;
        Ok(match self.kind {
            QuantizerKind::Product => {
                let h = self.dim / 2;
                (self.books[0].scores(&z[..h]), self.books[1].scores(&z[h..]))
            }
            QuantizerKind::Residual => (self.books[0].scores(z), self.books[1].scores(z)),
        })
    }

    /// `Σ_i ‖q̃_i‖²`
    pub fn distortion(&self) -> f64 {
        self.residuals
            .iter_rows()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// `õ_i = z · q̃_i` for every class.
    pub fn residual_scores(&self, z: &QueryVector) -> Result<Vec<f64>> {
        check_dim(self.dim, z.dim())?;
        Ok(self
            .residuals
            .iter_rows()
            .map(|r| dot_unchecked(r, z))
            .collect())
    }
}

/// `‖õ‖∞` for a residual score vector.
pub fn residual_inf_norm(scores: &[f64]) -> f64 {
    inf_norm(scores)
}

fn sub_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x -= y;
    }
}
