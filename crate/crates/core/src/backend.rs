//! Embedding back-ends: cosine, LDA, centering with length normalisation
//! and two-covariance PLDA.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde_json::json;

use crate::container::{Container, Section, Tensor};
use crate::embedding::Embedding;
use crate::error::{invalid, Error, Result};
use crate::nn::Mat;

pub const LDA_TAG: [u8; 4] = *b"LDAP";
pub const PLDA_TAG: [u8; 4] = *b"PLDA";
const NORM_EPS: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("cosine: dimensions {} and {} differ", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Degenerate("cosine: zero-length vector".into()));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

pub fn mean_vector(embs: &[Embedding]) -> Result<Vec<f64>> {
    let d = embs.first().map(Embedding::dim).ok_or_else(|| invalid!("mean of an empty set"))?;
    let mut m = vec![0.0; d];
    for e in embs {
        if e.dim() != d {
            return Err(invalid!("{}: dimension {} but others have {d}", e.utterance_id, e.dim()));
        }
        m.iter_mut().zip(&e.vector).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= embs.len() as f64);
    Ok(m)
}

/// `(x - mean) / |x - mean|` with a mean estimated elsewhere.
pub fn center_lengthnorm(embs: &[Embedding], mean: &[f64]) -> Result<Vec<Embedding>> {
    embs.iter()
        .map(|e| {
            if e.dim() != mean.len() {
                return Err(invalid!("{}: dimension {} but mean has {}", e.utterance_id, e.dim(), mean.len()));
            }
            let c: Vec<f64> = e.vector.iter().zip(mean).map(|(x, m)| x - m).collect();
            let n = norm(&c);
            if n <= NORM_EPS {
                return Err(Error::Degenerate(format!("{}: vector equals the centering mean", e.utterance_id)));
            }
            Ok(e.with_vector(c.iter().map(|x| x / n).collect()))
        })
        .collect()
}

/// Group row indices by class label, in label order.
fn classes(labels: &[String]) -> Vec<Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        m.entry(l.as_str()).or_default().push(i);
    }
    m.into_values().collect()
}

fn to_matrix(embs: &[Embedding]) -> Result<DMatrix<f64>> {
    let d = embs.first().map(Embedding::dim).ok_or_else(|| invalid!("empty training set"))?;
    if let Some(e) = embs.iter().find(|e| e.dim() != d) {
        return Err(invalid!("{}: dimension {} but others have {d}", e.utterance_id, e.dim()));
    }
    if let Some(e) = embs.iter().find(|e| e.vector.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric(format!("{}: non-finite embedding", e.utterance_id)));
    }
    Ok(DMatrix::from_fn(embs.len(), d, |i, j| embs[i].vector[j]))
}

fn speaker_labels(embs: &[Embedding]) -> Vec<String> {
    embs.iter().map(|e| e.speaker_id.clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaProjection {
    pub mean: Vec<f64>,
    /// D x K.
    pub w: Mat<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Scatter matrices (both divided by the sample count).
fn scatters(x: &DMatrix<f64>, groups: &[Vec<usize>]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean = x.row_mean().transpose();
    let mut sw = DMatrix::zeros(d, d);
    let mut sb = DMatrix::zeros(d, d);
    for g in groups {
        let mut m = DVector::zeros(d);
        for &i in g {
            m += x.row(i).transpose();
        }
        m /= g.len() as f64;
        for &i in g {
            let c = x.row(i).transpose() - &m;
            sw.ger(1.0, &c, &c, 1.0);
        }
        let c = &m - &mean;
        sb.ger(g.len() as f64, &c, &c, 1.0);
    }
    (mean, sw / n as f64, sb / n as f64)
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(e.eigenvectors.nrows(), order.len(), |r, c| e.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn chol_with_ridge(m: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let d = m.nrows();
    let ridge = 1e-8 * m.trace() / d as f64;
    log::warn!("{what}: singular matrix, adding ridge {ridge:.3e}");
    (m + DMatrix::identity(d, d) * ridge.max(1e-300))
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what}: matrix not positive definite after ridge")))
}

/// Fisher LDA whitened so that the projected within-class covariance is
/// the identity.
pub fn train_lda(embs: &[Embedding], k: usize) -> Result<LdaProjection> {
    train_lda_labels(embs, &speaker_labels(embs), k)
}

pub fn train_lda_labels(embs: &[Embedding], labels: &[String], k: usize) -> Result<LdaProjection> {
    let x = to_matrix(embs)?;
    let groups = classes(labels);
    let d = x.ncols();
    if groups.len() < 2 {
        return Err(invalid!("train_lda: need at least 2 classes, got {}", groups.len()));
    }
    let kmax = d.min(groups.len() - 1);
    if k == 0 || k > kmax {
        return Err(invalid!("train_lda: K = {k} outside 1..={kmax}"));
    }
    let (mean, sw, sb) = scatters(&x, &groups);
    let ch = chol_with_ridge(sw, "train_lda")?;
    let linv = ch.l().try_inverse().ok_or_else(|| Error::Numeric("train_lda: singular Cholesky factor".into()))?;
    let mut m = &linv * sb * linv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let (vals, vecs) = sorted_eigen(m);
    let v = linv.transpose() * vecs.columns(0, k);
    Ok(LdaProjection {
        mean: mean.iter().copied().collect(),
        w: Mat::from_vec(d, k, (0..d).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| v[(i, j)]).collect()),
        eigenvalues: vals[..k].to_vec(),
    })
}

impl LdaProjection {
    pub fn dim_in(&self) -> usize {
        self.w.rows
    }

    pub fn dim_out(&self) -> usize {
        self.w.cols
    }

    pub fn project(&self, e: &Embedding) -> Result<Embedding> {
        if e.dim() != self.dim_in() {
            return Err(invalid!("{}: dimension {} but LDA expects {}", e.utterance_id, e.dim(), self.dim_in()));
        }
        let mut y = vec![0.0; self.dim_out()];
        for (i, (x, m)) in e.vector.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            for (a, w) in y.iter_mut().zip(self.w.row(i)) {
                *a += c * w;
            }
        }
        Ok(e.with_vector(y))
    }

    pub fn project_all(&self, embs: &[Embedding]) -> Result<Vec<Embedding>> {
        embs.iter().map(|e| self.project(e)).collect()
    }

    pub fn section(&self) -> Section {
        let mut s = Section::new(LDA_TAG);
        s.push(Tensor::from_slice("mean", &self.mean));
        s.push(Tensor::from_mat("W", &self.w));
        s.push(Tensor::from_slice("eigenvalues", &self.eigenvalues));
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let l = LdaProjection { mean: s.get("mean")?.to_vec64(), w: s.get("W")?.to_mat(), eigenvalues: s.get("eigenvalues")?.to_vec64() };
        if l.mean.len() != l.w.rows {
            return Err(Error::Format { offset: 0, msg: "LDAP section: inconsistent shapes".into() });
        }
        Ok(l)
    }
}

/// Two-covariance PLDA: `x = mu + y + e`, `y ~ N(0, B)`, `e ~ N(0, W)`.
#[derive(Clone, Debug)]
pub struct PldaModel {
    pub mean: Vec<f64>,
    pub phi_b: DMatrix<f64>,
    pub phi_w: DMatrix<f64>,
    /// `A` with `A^T W A = I`, `A^T B A = diag(psi)`.
    transform: DMatrix<f64>,
    psi: Vec<f64>,
}

impl PartialEq for PldaModel {
    fn eq(&self, o: &Self) -> bool {
        self.mean == o.mean && self.phi_b == o.phi_b && self.phi_w == o.phi_w
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Floor eigenvalues of a symmetric matrix at `floor`.
fn floor_eigen(m: &DMatrix<f64>, floor: f64, what: &str) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    if e.eigenvalues.iter().all(|&v| v >= floor) {
        return symmetrize(m);
    }
    log::debug!("{what}: flooring eigenvalues at {floor:e}");
    let vals = e.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()))
}

struct ClassStats {
    n: usize,
    /// Centred class mean `xbar - mu`.
    mean: DVector<f64>,
}

struct TrainStats {
    classes: Vec<ClassStats>,
    /// Pooled within-class scatter `sum_i sum_j (x_ij - xbar_i)(x_ij - xbar_i)^T`.
    scatter: DMatrix<f64>,
}

impl PldaModel {
    pub fn new(mean: Vec<f64>, phi_b: DMatrix<f64>, phi_w: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if phi_b.shape() != (d, d) || phi_w.shape() != (d, d) {
            return Err(invalid!("plda: covariance shapes do not match dimension {d}"));
        }
        let phi_w = floor_eigen(&phi_w, 1e-8, "plda within-class covariance");
        let phi_b = floor_eigen(&phi_b, 0.0, "plda between-class covariance");
        let ch = phi_w.clone().cholesky().ok_or_else(|| Error::Numeric("plda: within-class covariance not PD".into()))?;
        let linv = ch.l().try_inverse().ok_or_else(|| Error::Numeric("plda: singular Cholesky factor".into()))?;
        let (psi, q) = sorted_eigen(symmetrize(&(&linv * &phi_b * linv.transpose())));
        let transform = linv.transpose() * q;
        Ok(PldaModel { mean, phi_b, phi_w, transform, psi: psi.into_iter().map(|p| p.max(0.0)).collect() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// Coordinates in the basis where `W = I` and `B = diag(psi)`.
    pub fn diagonal_coordinates(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.diag_coords(x)?.iter().copied().collect())
    }

    fn diag_coords(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(invalid!("plda: dimension {} but model has {}", x.len(), self.dim()));
        }
        let c = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok(self.transform.tr_mul(&c))
    }

    /// Same-speaker versus different-speaker log-likelihood ratio.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let u1 = self.diag_coords(enroll)?;
        let u2 = self.diag_coords(test)?;
        let s = pair_llr(&self.psi, u1.as_slice(), u2.as_slice());
        if !s.is_finite() {
            return Err(Error::Numeric("plda: non-finite score".into()));
        }
        Ok(s)
    }

    fn train_stats(&self, x: &DMatrix<f64>, groups: &[Vec<usize>]) -> TrainStats {
        let d = self.dim();
        let mu = DVector::from_column_slice(&self.mean);
        let mut scatter = DMatrix::zeros(d, d);
        let classes = groups
            .iter()
            .map(|g| {
                let mut m = DVector::zeros(d);
                for &i in g {
                    m += x.row(i).transpose();
                }
                m /= g.len() as f64;
                for &i in g {
                    let c = x.row(i).transpose() - &m;
                    scatter.ger(1.0, &c, &c, 1.0);
                }
                ClassStats { n: g.len(), mean: m - &mu }
            })
            .collect();
        TrainStats { classes, scatter }
    }

    /// `sum_i log p(X_i)` with `y_i` integrated out.
    fn log_likelihood(&self, stats: &TrainStats) -> Result<f64> {
        let d = self.dim() as f64;
        let wc = self.phi_w.clone().cholesky().ok_or_else(|| Error::Numeric("plda: within-class covariance not PD".into()))?;
        let logdet_w: f64 = wc.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let mut by_n: BTreeMap<usize, (nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> = BTreeMap::new();
        let mut total = -0.5 * (wc.inverse() * &stats.scatter).trace();
        for s in &stats.classes {
            if !by_n.contains_key(&s.n) {
                let c = (&self.phi_b + &self.phi_w / s.n as f64)
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("plda: marginal covariance not PD".into()))?;
                let ld: f64 = c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                by_n.insert(s.n, (c, ld));
            }
            let (c, ld) = &by_n[&s.n];
            let n = s.n as f64;
            let q = s.mean.dot(&c.solve(&s.mean));
            total += -0.5 * (d * LN_2PI + ld + q) - 0.5 * ((n - 1.0) * d * LN_2PI + (n - 1.0) * logdet_w + d * n.ln());
        }
        Ok(total)
    }

    pub fn section(&self) -> Section {
        let d = self.dim();
        let flat = |m: &DMatrix<f64>| Mat::from_vec(d, d, (0..d * d).map(|i| m[(i / d, i % d)]).collect());
        let mut s = Section::new(PLDA_TAG);
        s.push(Tensor::from_slice("mean", &self.mean));
        s.push(Tensor::from_mat("phi_b", &flat(&self.phi_b)));
        s.push(Tensor::from_mat("phi_w", &flat(&self.phi_w)));
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let mean = s.get("mean")?.to_vec64();
        let d = mean.len();
        let get = |name: &str| -> Result<DMatrix<f64>> {
            let m: Mat<f64> = s.get(name)?.to_mat();
            if m.rows != d || m.cols != d {
                return Err(Error::Format { offset: 0, msg: format!("PLDA section: {name} is {}x{}", m.rows, m.cols) });
            }
            Ok(DMatrix::from_row_slice(d, d, &m.data))
        };
        PldaModel::new(mean, get("phi_b")?, get("phi_w")?)
    }
}

/// Sum over diagonalised dimensions of the two-covariance pair LLR.
pub fn pair_llr(psi: &[f64], u1: &[f64], u2: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&p, &a), &b) in psi.iter().zip(u1).zip(u2) {
        let sq = a * a + b * b;
        s += -0.5 * (2.0 * p + 1.0).ln() + (p + 1.0).ln() - 0.5 * (((p + 1.0) * sq - 2.0 * p * a * b) / (2.0 * p + 1.0) - sq / (p + 1.0));
    }
    s
}

fn sw_of(stats: &TrainStats, n: f64) -> DMatrix<f64> {
    &stats.scatter / n
}

/// EM training. Returns the model and the marginal log-likelihood before
/// each iteration and after the last.
pub fn train_plda(embs: &[Embedding], n_iters: usize) -> Result<(PldaModel, Vec<f64>)> {
    train_plda_labels(embs, &speaker_labels(embs), n_iters)
}

pub fn train_plda_labels(embs: &[Embedding], labels: &[String], n_iters: usize) -> Result<(PldaModel, Vec<f64>)> {
    let x = to_matrix(embs)?;
    let groups = classes(labels);
    if groups.len() < 2 {
        return Err(invalid!("train_plda: need at least 2 classes, got {}", groups.len()));
    }
    if groups.iter().all(|g| g.len() < 2) {
        return Err(invalid!("train_plda: every class has a single example"));
    }
    let (mean, sw, sb) = scatters(&x, &groups);
    let n_total = x.nrows() as f64;
    let k = groups.len() as f64;
    let mut model = PldaModel::new(mean.iter().copied().collect(), sb * (n_total / k), sw)?;
    let stats = model.train_stats(&x, &groups);
    if model.phi_w != symmetrize(&sw_of(&stats, n_total)) {
        log::warn!("train_plda: within-class covariance is singular; eigenvalues floored at 1e-8");
    }
    let d = model.dim();
    let mut history = vec![model.log_likelihood(&stats)?];
    for it in 0..n_iters {
        // E-step: y_i | X_i ~ N(G_n m_i, B - G_n B) with G_n = B (B + W/n)^-1
        let mut posts: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)> = BTreeMap::new();
        let mut new_b = DMatrix::zeros(d, d);
        let mut new_w = stats.scatter.clone();
        for s in &stats.classes {
            if !posts.contains_key(&s.n) {
                let c = (&model.phi_b + &model.phi_w / s.n as f64)
                    .cholesky()
                    .ok_or_else(|| Error::Numeric(format!("train_plda: marginal covariance not PD at iteration {it}")))?;
                let g = c.solve(&model.phi_b).transpose();
                let cov = symmetrize(&(&model.phi_b - &g * &model.phi_b));
                posts.insert(s.n, (g, cov));
            }
            let (g, cov) = &posts[&s.n];
            let y = g * &s.mean;
            let yy = cov + &y * y.transpose();
            new_b += &yy;
            // sum_j E[(x_j - mu - y)(x_j - mu - y)^T] = S + n (m - y)(m - y)^T + n cov
            let r = &s.mean - &y;
            new_w += (&r * r.transpose() + cov) * s.n as f64;
        }
        model = PldaModel::new(model.mean.clone(), new_b / k, new_w / n_total)?;
        let ll = model.log_likelihood(&stats)?;
        if !ll.is_finite() {
            return Err(Error::Numeric(format!("train_plda: log-likelihood {ll} at iteration {it}")));
        }
        history.push(ll);
    }
    Ok((model, history))
}

/// Container holding an optional LDA and an optional PLDA model.
pub fn save_backend(path: &Path, lda: Option<&LdaProjection>, plda: Option<&PldaModel>, header: serde_json::Value) -> Result<()> {
    let mut c = Container::new(header);
    if let Some(l) = lda {
        c.sections.push(l.section());
    }
    if let Some(p) = plda {
        c.sections.push(p.section());
    }
    c.write(path)
}

pub fn load_backend(path: &Path) -> Result<(Option<LdaProjection>, Option<PldaModel>, serde_json::Value)> {
    let c = Container::read(path)?;
    let lda = c.sections.iter().find(|s| s.tag == LDA_TAG).map(LdaProjection::from_section).transpose()?;
    let plda = c.sections.iter().find(|s| s.tag == PLDA_TAG).map(PldaModel::from_section).transpose()?;
    Ok((lda, plda, c.header))
}

pub fn backend_header(kind: &str) -> serde_json::Value {
    json!({ "variant": kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal, rng};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn emb(i: usize, spk: &str, v: Vec<f64>) -> Embedding {
        Embedding { utterance_id: format!("u{i}"), speaker_id: spk.into(), language_id: "E".into(), vector: v }
    }

    /// `n_cls` classes of `per` examples from `x = m + chol_b z + chol_w e`.
    fn sample(seed: u64, n_cls: usize, per: usize, lb: &[f64], lw: &[f64], d: usize) -> Vec<Embedding> {
        let mut r = rng(seed);
        let mul = |l: &[f64], z: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| l[i * d + j] * z[j]).sum()).collect() };
        let mut out = Vec::new();
        for c in 0..n_cls {
            let z: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
            let y = mul(lb, &z);
            for _ in 0..per {
                let e: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
                let w = mul(lw, &e);
                out.push(emb(out.len(), &format!("c{c:04}"), y.iter().zip(&w).map(|(a, b)| 1.0 + a + b).collect()));
            }
        }
        out
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        let (a, b) = ([0.3, -2.0, 1.0], [1.5, 0.2, -0.7]);
        let s = cosine_score(&a, &b).unwrap();
        assert!((s - cosine_score(&b, &a).unwrap()).abs() < 1e-15);
        assert!((s - cosine_score(&a.map(|x| 7.0 * x), &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lengthnorm_properties() {
        let mut r = rng(1);
        let set: Vec<Embedding> = (0..20).map(|i| emb(i, "s", (0..5).map(|_| r.random_range(-2.0..2.0)).collect())).collect();
        let mu = mean_vector(&set).unwrap();
        let out = center_lengthnorm(&set, &mu).unwrap();
        for (o, e) in out.iter().zip(&set) {
            assert!((norm(&o.vector) - 1.0).abs() < 1e-10);
            let c: Vec<f64> = e.vector.iter().zip(&mu).map(|(x, m)| x - m).collect();
            let n = norm(&c);
            assert!(o.vector.iter().zip(&c).all(|(a, b)| (a - b / n).abs() < 1e-14));
        }
        let again = center_lengthnorm(&out, &[0.0; 5]).unwrap();
        assert!(again.iter().zip(&out).all(|(a, b)| a.vector.iter().zip(&b.vector).all(|(x, y)| (x - y).abs() < 1e-12)));
        assert!(matches!(center_lengthnorm(&set[..1], &set[0].vector), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lda_finds_separating_axis() {
        let mut r = rng(2);
        let mut set = Vec::new();
        for c in 0..2 {
            for _ in 0..300 {
                let x = if c == 0 { -3.0 } else { 3.0 } + normal(&mut r);
                set.push(emb(set.len(), &format!("c{c}"), vec![x, normal(&mut r)]));
            }
        }
        let l = train_lda(&set, 1).unwrap();
        let (a, b) = (l.w.at(0, 0), l.w.at(1, 0));
        let angle = (b.abs() / (a * a + b * b).sqrt()).asin().to_degrees();
        assert!(angle < 1.0, "angle {angle}");
        assert!(train_lda(&set, 2).is_err());
    }

    fn within_cov(set: &[Embedding]) -> DMatrix<f64> {
        let x = to_matrix(set).unwrap();
        scatters(&x, &classes(&speaker_labels(set))).1
    }

    #[test]
    fn lda_whitens_within_class() {
        let lb = [2.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.1, 0.3, 0.7];
        let lw = [1.0, 0.0, 0.0, 0.3, 0.5, 0.0, -0.2, 0.1, 0.4];
        let set = sample(3, 4, 50, &lb, &lw, 3);
        let l = train_lda(&set, 3).unwrap();
        let p = l.project_all(&set).unwrap();
        let sw = within_cov(&p);
        assert!((sw - DMatrix::<f64>::identity(3, 3)).norm() < 1e-6);
        assert!(l.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        // projection is an affine map
        let z = l.project(&emb(0, "s", vec![0.0; 3])).unwrap();
        let pm: Vec<f64> = (0..3).map(|j| (0..3).map(|i| -l.mean[i] * l.w.at(i, j)).sum()).collect();
        assert!(z.vector.iter().zip(&pm).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(l.project(&emb(0, "s", vec![0.0; 2])).is_err());
    }

    #[test]
    fn lda_permutation_baseline() {
        // with shuffled labels the leading eigenvalue should look like pure
        // noise; the bound allows a factor of 3 either way
        let lb = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let zero = [0.0; 9];
        let signal = sample(4, 20, 10, &lb, &eye, 3);
        let noise = sample(5, 20, 10, &zero, &eye, 3);
        let mut labels = speaker_labels(&signal);
        let true_lead = train_lda_labels(&signal, &labels, 1).unwrap().eigenvalues[0];
        labels.shuffle(&mut rng(6));
        let perm = train_lda_labels(&signal, &labels, 1).unwrap().eigenvalues[0];
        let null = train_lda(&noise, 1).unwrap().eigenvalues[0];
        assert!(perm < 3.0 * null && perm > null / 3.0, "perm {perm} null {null}");
        assert!(true_lead > 10.0 * perm);
    }

    #[test]
    fn plda_recovers_covariances() {
        let lb = [1.5, 0.0, 0.6, 0.8];
        let lw = [0.7, 0.0, -0.2, 0.5];
        let set = sample(1, 500, 10, &lb, &lw, 2);
        let (m, hist) = train_plda(&set, 10).unwrap();
        assert!(hist.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()), "{hist:?}");
        let cov = |l: &[f64]| {
            let l = DMatrix::from_row_slice(2, 2, l);
            &l * l.transpose()
        };
        let (b, w) = (cov(&lb), cov(&lw));
        assert!((&m.phi_b - &b).norm() < 0.1 * b.norm(), "{}", m.phi_b);
        assert!((&m.phi_w - &w).norm() < 0.1 * w.norm(), "{}", m.phi_w);
    }

    #[test]
    fn plda_null_model() {
        let set = sample(8, 200, 8, &[0.0; 4], &[1.0, 0.0, 0.0, 1.0], 2);
        let (m, _) = train_plda(&set, 10).unwrap();
        assert!(m.phi_b.norm() < 0.1 * m.phi_w.norm());
        let z = PldaModel::new(vec![0.0; 2], DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(z.score(&[0.3, -1.0], &[2.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn plda_one_dim_quadrature() {
        let (b, w) = (1.7, 0.6);
        let m = PldaModel::new(vec![0.2], DMatrix::from_element(1, 1, b), DMatrix::from_element(1, 1, w)).unwrap();
        let g = |x: f64, v: f64| (-0.5 * x * x / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        for (x1, x2) in [(0.5, 0.9), (-1.3, 2.2), (0.2, 0.2)] {
            let (a, c) = (x1 - 0.2, x2 - 0.2);
            let (lo, hi, n) = (-15.0, 15.0, 60_000);
            let h = (hi - lo) / n as f64;
            let mut same = 0.0;
            for i in 0..=n {
                let y = lo + i as f64 * h;
                let f = g(a - y, w) * g(c - y, w) * g(y, b);
                same += if i == 0 || i == n { 0.5 * f } else { f };
            }
            same *= h;
            let diff = g(a, b + w) * g(c, b + w);
            let oracle = same.ln() - diff.ln();
            assert!((m.score(&[x1], &[x2]).unwrap() - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn plda_symmetric_and_affine_invariant() {
        let lb = [1.0, 0.0, 0.0, 0.4, 0.9, 0.0, 0.2, -0.1, 0.6];
        let lw = [0.8, 0.0, 0.0, 0.1, 0.6, 0.0, 0.0, 0.2, 0.5];
        let train = sample(9, 60, 6, &lb, &lw, 3);
        let eval = sample(10, 5, 3, &lb, &lw, 3);
        let (m, _) = train_plda(&train, 5).unwrap();
        let mut r = rng(11);
        let a: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
        let shift = [0.5, -2.0, 3.0];
        let map = |set: &[Embedding]| -> Vec<Embedding> {
            set.iter()
                .map(|e| e.with_vector((0..3).map(|i| shift[i] + (0..3).map(|j| (a[i * 3 + j] + if i == j { 2.0 } else { 0.0 }) * e.vector[j]).sum::<f64>()).collect()))
                .collect()
        };
        let (m2, _) = train_plda(&map(&train), 5).unwrap();
        let ev2 = map(&eval);
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        for i in 0..eval.len() {
            for j in i + 1..eval.len() {
                let x = m.score(&eval[i].vector, &eval[j].vector).unwrap();
                assert!((x - m.score(&eval[j].vector, &eval[i].vector).unwrap()).abs() < 1e-10);
                s1.push(x);
                s2.push(m2.score(&ev2[i].vector, &ev2[j].vector).unwrap());
            }
        }
        let rank = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
            idx
        };
        assert_eq!(rank(&s1), rank(&s2));
    }

    #[test]
    fn backend_round_trip() {
        let set = sample(12, 10, 5, &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let l = train_lda(&set, 2).unwrap();
        let (p, _) = train_plda(&set, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        save_backend(&path, Some(&l), Some(&p), backend_header("test")).unwrap();
        let (l2, p2, _) = load_backend(&path).unwrap();
        let p2 = p2.unwrap();
        assert!(l2.unwrap().w.data.iter().zip(&l.w.data).all(|(a, b)| (a - b).abs() < 1e-5));
        let s = (p.score(&set[0].vector, &set[1].vector).unwrap(), p2.score(&set[0].vector, &set[1].vector).unwrap());
        assert!((s.0 - s.1).abs() < 1e-3);
    }
}
