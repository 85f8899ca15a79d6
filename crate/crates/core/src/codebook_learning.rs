//! Gradient-based refinement of the two codebooks.
//!
//! Each class gets soft weights per book, `w_k = softmax_k(x · c_k)`, where `x`
//! is the matching half of the embedding (product kind) or the embedding and
//! then the leftover after the first soft encoding (residual kind). The encoded
//! embedding is the concatenation or sum of the per-book convex combinations.
//! The objective is `λ·L_recon + L_KL` with
//!
//! * `L_recon = Σ_i ‖q̂_i − q_i‖²`
//! * `L_KL = log Σ_i p_i² / p'_i`, averaged over queries, with `p` the softmax
//!   over true logits and `p'` the softmax over encoded logits.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{dot_unchecked, softmax_slice, EmbeddingMatrix, Matrix};
use crate::quantization::{Codebook, MultiIndex, QuantizerKind};
use crate::rng::seeded;

/// Two learnable codebooks (rows are codewords).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCodebooks {
    pub kind: QuantizerKind,
    pub books: [Matrix; 2],
}

/// Per-class soft weights (`N×K` per book) and the encoded vectors they give.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub weights: [Matrix; 2],
    /// Per-book encodings `Σ_k w_k c_k` (`N×cw_dim` each).
    pub parts: [Matrix; 2],
    /// Encoded embeddings `q̂` (`N×D`).
    pub encoded: Matrix,
}

impl SoftCodebooks {
    pub fn new(kind: QuantizerKind, books: [Matrix; 2]) -> Result<Self> {
        if books[0].rows() == 0 || books[0].rows() != books[1].rows() {
            return Err(Error::Config(
                "both codebooks need the same, nonzero number of codewords".into(),
            ));
        }
        check_dim(books[0].cols(), books[1].cols())?;
        if !books[0].is_finite() || !books[1].is_finite() {
            return Err(Error::Numerical(
                "codebook contains non-finite values".into(),
            ));
        }
        Ok(Self { kind, books })
    }

    /// Start from the codebooks of an existing index.
    pub fn from_index(index: &MultiIndex) -> Self {
        Self {
            kind: index.kind(),
            books: [
                index.codebook(0).matrix().clone(),
                index.codebook(1).matrix().clone(),
            ],
        }
    }

    pub fn k(&self) -> usize {
        self.books[0].rows()
    }

    fn check(&self, emb: &EmbeddingMatrix) -> Result<()> {
        self.kind.check_dim(emb.dim())?;
        check_dim(self.kind.codeword_dim(emb.dim()), self.books[0].cols())
    }

    /// Hard re-assignment to the nearest codewords, giving a searchable index.
    pub fn harden(&self, emb: &EmbeddingMatrix) -> Result<MultiIndex> {
        let books = [
            Codebook::new(self.books[0].clone())?,
            Codebook::new(self.books[1].clone())?,
        ];
        MultiIndex::with_codebooks(emb, self.kind, books)
    }
}

fn soft_row(book: &Matrix, x: &[f64], w: &mut [f64], part: &mut [f64]) {
    let scores: Vec<f64> = book.iter_rows().map(|c| dot_unchecked(c, x)).collect();
    w.copy_from_slice(&softmax_slice(&scores));
    part.fill(0.0);
    for (c, &wk) in book.iter_rows().zip(w.iter()) {
        for (p, cv) in part.iter_mut().zip(c) {
            *p += wk * cv;
        }
    }
}

/// Soft weights for both books and the resulting encodings.
pub fn soft_assign(emb: &EmbeddingMatrix, books: &SoftCodebooks) -> Result<SoftAssignment> {
    books.check(emb)?;
    let (n, d, k) = (emb.n_classes(), emb.dim(), books.k());
    let cw = books.books[0].cols();
    let mut weights = [Matrix::zeros(n, k), Matrix::zeros(n, k)];
    let mut parts = [Matrix::zeros(n, cw), Matrix::zeros(n, cw)];
    let [w1, w2] = &mut weights;
    let [p1, p2] = &mut parts;
    for i in 0..n {
        let q = emb.row(i);
        match books.kind {
            QuantizerKind::Product => {
                soft_row(&books.books[0], &q[..cw], w1.row_mut(i), p1.row_mut(i));
                soft_row(&books.books[1], &q[cw..], w2.row_mut(i), p2.row_mut(i));
            }
            QuantizerKind::Residual => {
                soft_row(&books.books[0], q, w1.row_mut(i), p1.row_mut(i));
                let r: Vec<f64> = q.iter().zip(p1.row(i)).map(|(a, b)| a - b).collect();
                soft_row(&books.books[1], &r, w2.row_mut(i), p2.row_mut(i));
            }
        }
    }
    let encoded = combine(books.kind, &parts, d);
    Ok(SoftAssignment {
        weights,
        parts,
        encoded,
    })
}

fn combine(kind: QuantizerKind, parts: &[Matrix; 2], d: usize) -> Matrix {
    let n = parts[0].rows();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let (a, b) = (parts[0].row(i), parts[1].row(i));
        let row = out.row_mut(i);
        match kind {
            QuantizerKind::Product => {
                row[..a.len()].copy_from_slice(a);
                row[a.len()..].copy_from_slice(b);
            }
            QuantizerKind::Residual => {
                for ((o, x), y) in row.iter_mut().zip(a).zip(b) {
                    *o = x + y;
                }
            }
        }
    }
    out
}

/// Encoded embeddings from explicit weights (rows of each `N×K` matrix).
pub fn encode(books: &SoftCodebooks, weights: &[Matrix; 2]) -> Result<Matrix> {
    let k = books.k();
    check_dim(k, weights[0].cols())?;
    check_dim(k, weights[1].cols())?;
    check_dim(weights[0].rows(), weights[1].rows())?;
    let n = weights[0].rows();
    let cw = books.books[0].cols();
    let d = match books.kind {
        QuantizerKind::Product => 2 * cw,
        QuantizerKind::Residual => cw,
    };
    let mut parts = [Matrix::zeros(n, cw), Matrix::zeros(n, cw)];
    for (l, part) in parts.iter_mut().enumerate() {
        for i in 0..n {
            let row = part.row_mut(i);
            for (c, &wk) in books.books[l].iter_rows().zip(weights[l].row(i)) {
                for (p, cv) in row.iter_mut().zip(c) {
                    *p += wk * cv;
                }
            }
        }
    }
    Ok(combine(books.kind, &parts, d))
}

fn check_shape(emb: &EmbeddingMatrix, encoded: &Matrix) -> Result<()> {
    check_dim(emb.n_classes(), encoded.rows())?;
    check_dim(emb.dim(), encoded.cols())
}

/// `Σ_i ‖q̂_i − q_i‖²`
pub fn recon_loss(emb: &EmbeddingMatrix, encoded: &Matrix) -> Result<f64> {
    check_shape(emb, encoded)?;
    Ok(emb
        .matrix()
        .as_slice()
        .iter()
        .zip(encoded.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

struct KlTerms {
    loss: f64,
    /// `∂L/∂o'_j`
    grad: Vec<f64>,
}

fn kl_terms(z: &[f64], emb: &EmbeddingMatrix, encoded: &Matrix) -> KlTerms {
    let o: Vec<f64> = emb
        .matrix()
        .iter_rows()
        .map(|q| dot_unchecked(q, z))
        .collect();
    let oe: Vec<f64> = encoded.iter_rows().map(|q| dot_unchecked(q, z)).collect();
    let p = softmax_slice(&o);
    let pe = softmax_slice(&oe);
    // p_i² / p'_i = p_i · exp(log p_i − log p'_i), evaluated in the log domain
    // so small p'_i cannot overflow the ratio.
    let lp = log_softmax(&o);
    let lpe = log_softmax(&oe);
    let ratio: Vec<f64> = (0..p.len()).map(|i| (2.0 * lp[i] - lpe[i]).exp()).collect();
    let d2: f64 = ratio.iter().sum();
    let grad = (0..p.len()).map(|j| pe[j] - ratio[j] / d2).collect();
    KlTerms {
        loss: d2.ln().max(0.0),
        grad,
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let (m, rest) = crate::numeric::lse_parts(v);
    let lse = m + rest.ln_1p();
    v.iter().map(|x| x - lse).collect()
}

/// `log Σ_i p_i² / p'_i` for one query.
pub fn kl_loss(z: &[f64], emb: &EmbeddingMatrix, encoded: &Matrix) -> Result<f64> {
    check_shape(emb, encoded)?;
    check_dim(emb.dim(), z.len())?;
    Ok(kl_terms(z, emb, encoded).loss)
}

/// Mean of [`kl_loss`] over the rows of `queries`.
pub fn kl_loss_batch(queries: &Matrix, emb: &EmbeddingMatrix, encoded: &Matrix) -> Result<f64> {
    check_shape(emb, encoded)?;
    check_dim(emb.dim(), queries.cols())?;
    if queries.rows() == 0 {
        return Err(Error::Config("need at least one query".into()));
    }
    let total: f64 = queries
        .iter_rows()
        .map(|z| kl_terms(z, emb, encoded).loss)
        .sum();
    Ok(total / queries.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookGrad {
    pub books: [Matrix; 2],
    pub loss: LossPoint,
}

/// Loss over the given queries without gradients.
pub fn codebook_loss(
    queries: &Matrix,
    emb: &EmbeddingMatrix,
    books: &SoftCodebooks,
    lambda: f64,
) -> Result<LossPoint> {
    let sa = soft_assign(emb, books)?;
    let recon = recon_loss(emb, &sa.encoded)?;
    let kl = kl_loss_batch(queries, emb, &sa.encoded)?;
    Ok(LossPoint {
        recon,
        kl,
        total: lambda * recon + kl,
    })
}

/// Backpropagate `g` (gradient w.r.t. each class's encoding for one book)
/// into that book's codewords. Returns `Σ_k (∂L/∂s_ik) c_k` per class, the
/// gradient reaching the book's input `x_i`.
fn backprop_book(
    book: &Matrix,
    weights: &Matrix,
    part: &Matrix,
    inputs: &[&[f64]],
    g: &Matrix,
    out: &mut Matrix,
) -> Matrix {
    let (n, k, cw) = (weights.rows(), book.rows(), book.cols());
    let mut to_input = Matrix::zeros(n, cw);
    for i in 0..n {
        let gi = g.row(i);
        let ge = dot_unchecked(gi, part.row(i));
        for kk in 0..k {
            let w = weights.row(i)[kk];
            let c = book.row(kk);
            let ds = w * (dot_unchecked(gi, c) - ge);
            let x = inputs[i];
            let row = out.row_mut(kk);
            for t in 0..cw {
                row[t] += w * gi[t] + ds * x[t];
            }
            let ti = to_input.row_mut(i);
            for t in 0..cw {
                ti[t] += ds * c[t];
            }
        }
    }
    to_input
}

/// Analytic gradient of `λ·L_recon + mean_z L_KL` w.r.t. every codeword entry.
pub fn codebook_grad(
    queries: &Matrix,
    emb: &EmbeddingMatrix,
    books: &SoftCodebooks,
    lambda: f64,
) -> Result<CodebookGrad> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "recon weight must be >= 0, got {lambda}"
        )));
    }
    check_dim(emb.dim(), queries.cols())?;
    if queries.rows() == 0 {
        return Err(Error::Config("need at least one query".into()));
    }
    let sa = soft_assign(emb, books)?;
    let (n, d) = (emb.n_classes(), emb.dim());
    let cw = books.books[0].cols();

    // Gradient w.r.t. the encoded embeddings.
    let mut ge = Matrix::zeros(n, d);
    for i in 0..n {
        let (q, e) = (emb.row(i), sa.encoded.row(i));
        for (g, (a, b)) in ge.row_mut(i).iter_mut().zip(q.iter().zip(e)) {
            *g = 2.0 * lambda * (b - a);
        }
    }
    let nq = queries.rows() as f64;
    let mut kl = 0.0;
    for z in queries.iter_rows() {
        let t = kl_terms(z, emb, &sa.encoded);
        kl += t.loss;
        for (i, &gj) in t.grad.iter().enumerate() {
            for (g, zv) in ge.row_mut(i).iter_mut().zip(z) {
                *g += gj * zv / nq;
            }
        }
    }
    kl /= nq;
    let recon = recon_loss(emb, &sa.encoded)?;

    let k = books.k();
    let mut out = [Matrix::zeros(k, cw), Matrix::zeros(k, cw)];
    match books.kind {
        QuantizerKind::Product => {
            let inputs: [Vec<&[f64]>; 2] = [
                (0..n).map(|i| &emb.row(i)[..cw]).collect(),
                (0..n).map(|i| &emb.row(i)[cw..]).collect(),
            ];
            for l in 0..2 {
                let g = ge.column_block(l * cw, (l + 1) * cw);
                let [o1, o2] = &mut out;
                let target = if l == 0 { o1 } else { o2 };
                backprop_book(
                    &books.books[l],
                    &sa.weights[l],
                    &sa.parts[l],
                    &inputs[l],
                    &g,
                    target,
                );
            }
        }
        QuantizerKind::Residual => {
            let resid: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    emb.row(i)
                        .iter()
                        .zip(sa.parts[0].row(i))
                        .map(|(a, b)| a - b)
                        .collect()
                })
                .collect();
            let inputs2: Vec<&[f64]> = resid.iter().map(Vec::as_slice).collect();
            let [o1, o2] = &mut out;
            let back = backprop_book(
                &books.books[1],
                &sa.weights[1],
                &sa.parts[1],
                &inputs2,
                &ge,
                o2,
            );
            // The second book's input is q − ê¹, so its score gradient flows
            // back into ê¹ with a negative sign.
            let mut g1 = ge.clone();
            for (a, b) in g1.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *a -= b;
            }
            let inputs1: Vec<&[f64]> = (0..n).map(|i| emb.row(i)).collect();
            backprop_book(
                &books.books[0],
                &sa.weights[0],
                &sa.parts[0],
                &inputs1,
                &g1,
                o1,
            );
        }
    }
    Ok(CodebookGrad {
        books: out,
        loss: LossPoint {
            recon,
            kl,
            total: lambda * recon + kl,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub lambda: f64,
    /// Queries sampled per step for the KL term.
    pub batch: usize,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            steps: 200,
            lambda: 1.0,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    /// Loss over all queries before the first step and after every step.
    pub trajectory: Vec<LossPoint>,
    /// Set when a step produced a non-finite loss; the codebooks then hold the
    /// last finite state.
    pub diverged: bool,
}

impl LearnReport {
    pub fn initial(&self) -> LossPoint {
        self.trajectory[0]
    }

    pub fn last(&self) -> LossPoint {
        *self.trajectory.last().expect("trajectory is never empty")
    }
}

fn finite(p: &LossPoint) -> bool {
    p.recon.is_finite() && p.kl.is_finite()
}

/// Plain gradient descent on the codebooks.
pub fn codebook_step(
    state: &mut SoftCodebooks,
    emb: &EmbeddingMatrix,
    queries: &Matrix,
    cfg: &LearnConfig,
) -> Result<LearnReport> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("query batch must be >= 1".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut trajectory = vec![codebook_loss(queries, emb, state, cfg.lambda)?];
    let nq = queries.rows();
    for _ in 0..cfg.steps {
        let picked = sample_indices(&mut rng, nq, cfg.batch.min(nq));
        let rows: Vec<Vec<f64>> = picked.iter().map(|j| queries.row(j).to_vec()).collect();
        let mini = Matrix::from_rows(&rows)?;
        let g = codebook_grad(&mini, emb, state, cfg.lambda)?;
        let mut next = state.clone();
        for (book, grad) in next.books.iter_mut().zip(&g.books) {
            for (c, gv) in book.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *c -= cfg.learning_rate * gv;
            }
        }
        if !next.books[0].is_finite() || !next.books[1].is_finite() {
            return Ok(LearnReport {
                trajectory,
                diverged: true,
            });
        }
        let point = codebook_loss(queries, emb, &next, cfg.lambda)?;
        if !finite(&point) {
            return Ok(LearnReport {
                trajectory,
                diverged: true,
            });
        }
        *state = next;
        trajectory.push(point);
    }
    Ok(LearnReport {
        trajectory,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::IndexConfig;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    fn instance(
        kind: QuantizerKind,
        n: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> (EmbeddingMatrix, SoftCodebooks, Matrix) {
        let emb = EmbeddingMatrix::new(random_matrix(n, d, seed, 1.0)).unwrap();
        let cw = kind.codeword_dim(d);
        let books = SoftCodebooks::new(
            kind,
            [
                random_matrix(k, cw, seed + 100, 1.0),
                random_matrix(k, cw, seed + 200, 1.0),
            ],
        )
        .unwrap();
        let queries = random_matrix(3, d, seed + 300, 1.0);
        (emb, books, queries)
    }

    #[test]
    fn identical_codewords_give_uniform_weights() {
        let emb = EmbeddingMatrix::new(random_matrix(5, 4, 1, 1.0)).unwrap();
        let books = SoftCodebooks::new(
            QuantizerKind::Product,
            [
                Matrix::from_rows(&vec![vec![0.3, -0.2]; 3]).unwrap(),
                Matrix::from_rows(&vec![vec![1.0, 0.5]; 3]).unwrap(),
            ],
        )
        .unwrap();
        let sa = soft_assign(&emb, &books).unwrap();
        for w in &sa.weights {
            for x in w.as_slice() {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dominant_score_saturates() {
        let emb = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        let books = SoftCodebooks::new(
            QuantizerKind::Product,
            [
                Matrix::from_rows(&[vec![0.0, 0.0], vec![50.0, 0.0]]).unwrap(),
                Matrix::from_rows(&[vec![0.0, 0.0], vec![50.0, 0.0]]).unwrap(),
            ],
        )
        .unwrap();
        let sa = soft_assign(&emb, &books).unwrap();
        assert!((sa.weights[0].row(0)[1] - 1.0).abs() < 1e-15);
        assert!(sa.weights[0].row(0)[0] < 1e-21);
    }

    #[test]
    fn weights_match_softmax_oracle() {
        for kind in [QuantizerKind::Product, QuantizerKind::Residual] {
            let (emb, books, _) = instance(kind, 12, 6, 3, 2);
            let sa = soft_assign(&emb, &books).unwrap();
            let cw = books.books[0].cols();
            for i in 0..12 {
                let x = &emb.row(i)[..cw];
                let s: Vec<f64> = books.books[0]
                    .iter_rows()
                    .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for k in 0..3 {
                    assert!((sa.weights[0].row(i)[k] - (s[k] - m).exp() / z).abs() < 1e-12);
                }
                assert!((sa.weights[1].row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_codeword_encodes_to_it() {
        let (emb, _, _) = instance(QuantizerKind::Product, 6, 4, 1, 3);
        let books = SoftCodebooks::new(
            QuantizerKind::Product,
            [
                Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap(),
                Matrix::from_rows(&[vec![2.0, 0.25]]).unwrap(),
            ],
        )
        .unwrap();
        let sa = soft_assign(&emb, &books).unwrap();
        for i in 0..6 {
            assert_eq!(sa.encoded.row(i), &[0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn one_hot_weights_give_hard_reconstruction() {
        for kind in [QuantizerKind::Product, QuantizerKind::Residual] {
            let emb = EmbeddingMatrix::new(random_matrix(20, 4, 4, 1.0)).unwrap();
            let idx = MultiIndex::build(&emb, &IndexConfig::new(3, kind, 4)).unwrap();
            let books = SoftCodebooks::from_index(&idx);
            let mut w = [Matrix::zeros(20, 3), Matrix::zeros(20, 3)];
            for i in 0..20 {
                let (a, b) = idx.codes(i);
                w[0].row_mut(i)[a] = 1.0;
                w[1].row_mut(i)[b] = 1.0;
            }
            let enc = encode(&books, &w).unwrap();
            for i in 0..20 {
                let hard: Vec<f64> = emb
                    .row(i)
                    .iter()
                    .zip(idx.residual(i))
                    .map(|(q, r)| q - r)
                    .collect();
                for (a, b) in enc.row(i).iter().zip(&hard) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_matches_loop() {
        let (emb, books, _) = instance(QuantizerKind::Product, 9, 6, 4, 5);
        let sa = soft_assign(&emb, &books).unwrap();
        let enc = encode(&books, &sa.weights).unwrap();
        for i in 0..9 {
            for t in 0..3 {
                let mut a = 0.0;
                let mut b = 0.0;
                for k in 0..4 {
                    a += sa.weights[0].row(i)[k] * books.books[0].row(k)[t];
                    b += sa.weights[1].row(i)[k] * books.books[1].row(k)[t];
                }
                assert!((enc.row(i)[t] - a).abs() < 1e-12);
                assert!((enc.row(i)[t + 3] - b).abs() < 1e-12);
            }
        }
        for (a, b) in enc.as_slice().iter().zip(sa.encoded.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_loss_cases() {
        let emb = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(recon_loss(&emb, emb.matrix()).unwrap(), 0.0);
        let enc = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(recon_loss(&emb, &enc).unwrap(), 2.0);
        let (emb, books, _) = instance(QuantizerKind::Residual, 7, 4, 2, 6);
        let sa = soft_assign(&emb, &books).unwrap();
        let mut want = 0.0;
        for i in 0..7 {
            for t in 0..4 {
                want += (emb.row(i)[t] - sa.encoded.row(i)[t]).powi(2);
            }
        }
        assert!((recon_loss(&emb, &sa.encoded).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_loss_cases() {
        let (emb, _, q) = instance(QuantizerKind::Product, 10, 4, 2, 7);
        assert!(kl_loss(q.row(0), &emb, emb.matrix()).unwrap().abs() < 1e-12);

        // p = [0.5, 0.5], p' = [0.25, 0.75].
        let emb = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let enc = Matrix::from_rows(&[vec![0.0, 0.0], vec![3f64.ln(), 0.0]]).unwrap();
        let l = kl_loss(&[1.0, 0.0], &emb, &enc).unwrap();
        assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        let (emb, books, q) = instance(QuantizerKind::Residual, 16, 4, 3, 8);
        let enc = soft_assign(&emb, &books).unwrap().encoded;
        let z = q.row(1);
        let o: Vec<f64> = (0..16)
            .map(|i| emb.row(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let oe: Vec<f64> = (0..16)
            .map(|i| enc.row(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let p = softmax_slice(&o);
        let pe = softmax_slice(&oe);
        let direct: f64 = p.iter().zip(&pe).map(|(a, b)| a * a / b).sum::<f64>().ln();
        assert!((kl_loss(z, &emb, &enc).unwrap() - direct).abs() < 1e-10);
        assert!(direct >= 0.0);
    }

    fn fd_check(kind: QuantizerKind, seed: u64, lambda: f64) {
        let (emb, books, queries) = instance(kind, 16, 4, 2, seed);
        let g = codebook_grad(&queries, &emb, &books, lambda).unwrap();
        let h = 1e-5;
        for l in 0..2 {
            for e in 0..books.books[l].as_slice().len() {
                let mut plus = books.clone();
                plus.books[l].as_mut_slice()[e] += h;
                let mut minus = books.clone();
                minus.books[l].as_mut_slice()[e] -= h;
                let fp = codebook_loss(&queries, &emb, &plus, lambda).unwrap().total;
                let fm = codebook_loss(&queries, &emb, &minus, lambda).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let an = g.books[l].as_slice()[e];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    rel < 1e-4,
                    "{kind:?} seed {seed} book {l} entry {e}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            fd_check(QuantizerKind::Product, seed, 1.0);
            fd_check(QuantizerKind::Residual, seed, 1.0);
        }
        fd_check(QuantizerKind::Product, 42, 0.0);
        fd_check(QuantizerKind::Residual, 43, 0.0);
    }

    #[test]
    fn dead_codeword_is_insensitive() {
        let emb = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.9, 0.1, 1.1, 0.0]])
            .unwrap();
        let books = SoftCodebooks::new(
            QuantizerKind::Product,
            [
                Matrix::from_rows(&[vec![40.0, 0.0], vec![-40.0, 0.0]]).unwrap(),
                Matrix::from_rows(&[vec![40.0, 0.0], vec![-40.0, 0.0]]).unwrap(),
            ],
        )
        .unwrap();
        let q = Matrix::from_rows(&[vec![0.3, 0.1, -0.2, 0.4]]).unwrap();
        let sa = soft_assign(&emb, &books).unwrap();
        assert!(sa.weights[0].row(0)[1] < 1e-12);
        let base = codebook_loss(&q, &emb, &books, 1.0).unwrap().total;
        let mut moved = books.clone();
        moved.books[0].row_mut(1)[1] += 0.5;
        let after = codebook_loss(&q, &emb, &moved, 1.0).unwrap().total;
        assert!((after - base).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_losses() {
        let (emb, mut books, q) = instance(QuantizerKind::Product, 8, 4, 2, 9);
        let cfg = LearnConfig {
            learning_rate: 0.0,
            steps: 5,
            ..LearnConfig::default()
        };
        let r = codebook_step(&mut books, &emb, &q, &cfg).unwrap();
        assert_eq!(r.trajectory.len(), 6);
        assert!(r.trajectory.iter().all(|p| *p == r.initial()));
    }

    #[test]
    fn descent_lowers_tiny_instance() {
        for kind in [QuantizerKind::Product, QuantizerKind::Residual] {
            let (emb, mut books, q) = instance(kind, 8, 4, 2, 10);
            let cfg = LearnConfig {
                learning_rate: 0.01,
                steps: 200,
                ..LearnConfig::default()
            };
            let r = codebook_step(&mut books, &emb, &q, &cfg).unwrap();
            assert!(!r.diverged);
            assert!(
                r.last().total <= r.initial().total,
                "{kind:?}: {:?}",
                r.last()
            );
        }
    }

    #[test]
    fn small_step_lowers_recon() {
        let (emb, mut books, q) = instance(QuantizerKind::Residual, 16, 4, 3, 11);
        let cfg = LearnConfig {
            learning_rate: 1e-3,
            steps: 1,
            lambda: 1.0,
            ..LearnConfig::default()
        };
        let r = codebook_step(&mut books, &emb, &q, &cfg).unwrap();
        assert!(r.trajectory[1].recon < r.trajectory[0].recon);
    }

    #[test]
    fn divergence_is_reported() {
        let (emb, mut books, q) = instance(QuantizerKind::Product, 8, 4, 2, 12);
        let cfg = LearnConfig {
            learning_rate: 1e150,
            steps: 10,
            ..LearnConfig::default()
        };
        let r = codebook_step(&mut books, &emb, &q, &cfg).unwrap();
        assert!(r.diverged);
        assert!(r.trajectory.iter().all(finite));
        assert!(books.books[0].is_finite());
    }

    #[test]
    fn harden_builds_index() {
        let (emb, mut books, q) = instance(QuantizerKind::Product, 16, 4, 2, 13);
        codebook_step(
            &mut books,
            &emb,
            &q,
            &LearnConfig {
                steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let idx = books.harden(&emb).unwrap();
        assert_eq!(idx.n_classes(), 16);
        assert_eq!(idx.k(), 2);
    }
}
