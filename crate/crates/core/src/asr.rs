//! Frame-level phone classifier and the low-rank linguistic factor read
//! from the SVD of its output transform.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{graph_container, graph_from_container, Container, Section, Tensor};
use crate::error::{invalid, Error, Result};
use crate::frontend::FeatureMatrix;
use crate::nn::{self, InputSpec, LayerSpec, Mat, NetworkGraph, Segments, Sequence, TrainState};

pub const SVD_TAG: [u8; 4] = *b"SVDF";
const SVD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneClassifierConfig {
    pub feat_dim: usize,
    pub splice: usize,
    pub hidden: usize,
    pub pnorm_group: usize,
    pub td_offsets: Vec<i32>,
    pub n_phones: usize,
}

impl Default for PhoneClassifierConfig {
    fn default() -> Self {
        PhoneClassifierConfig { feat_dim: 40, splice: 4, hidden: 512, pnorm_group: 2, td_offsets: vec![-1, 0, 1], n_phones: 48 }
    }
}

#[derive(Clone, Debug)]
pub struct PhoneClassifier {
    pub graph: NetworkGraph<f32>,
    pub history: Vec<nn::train::EpochRecord>,
}

impl PhoneClassifier {
    pub fn build(c: &PhoneClassifierConfig, seed: u64) -> Result<Self> {
        if c.n_phones == 0 || c.hidden == 0 || c.pnorm_group == 0 || c.hidden % c.pnorm_group != 0 {
            return Err(invalid!("phone classifier: bad widths (hidden {}, group {}, phones {})", c.hidden, c.pnorm_group, c.n_phones));
        }
        let input = InputSpec { feat_dim: c.feat_dim, splice_left: c.splice, splice_right: c.splice, aux_dim: 0 };
        let h = c.hidden / c.pnorm_group;
        let layers = vec![
            LayerSpec::Affine { input: input.spliced_dim(), output: c.hidden },
            LayerSpec::PNorm { input: c.hidden, group: c.pnorm_group, p: 2.0 },
            LayerSpec::TimeDelay { input: h, output: c.hidden, offsets: c.td_offsets.clone() },
            LayerSpec::PNorm { input: c.hidden, group: c.pnorm_group, p: 2.0 },
            LayerSpec::Affine { input: h, output: c.n_phones },
            LayerSpec::SoftmaxXent { classes: c.n_phones },
        ];
        Ok(PhoneClassifier { graph: NetworkGraph::build(input, layers, seed)?, history: Vec::new() })
    }

    pub fn n_phones(&self) -> usize {
        self.graph.output_dim()
    }

    fn final_layer(&self) -> usize {
        self.graph.layers().len() - 2
    }

    /// The output transform `W` (hidden x phones).
    pub fn final_weights(&self) -> Mat<f64> {
        self.graph.params()[self.final_layer()][0].cast()
    }

    /// Last hidden activation per frame.
    pub fn hidden(&self, feat: &FeatureMatrix) -> Result<Mat<f64>> {
        if feat.dim() != self.graph.input().feat_dim {
            return Err(invalid!("{}: feature width {} but classifier expects {}", feat.utterance_id, feat.dim(), self.graph.input().feat_dim));
        }
        let y = self.graph.infer(&feat.data.cast(), None, &Segments::single(feat.frames()), self.final_layer())?;
        Ok(y.cast())
    }

    pub fn to_container(&self) -> Container {
        let mut h = serde_json::Map::new();
        h.insert("variant".into(), json!("phone-classifier"));
        h.insert("history".into(), serde_json::to_value(&self.history).unwrap());
        graph_container(&self.graph, h)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.get("variant").and_then(Value::as_str) != Some("phone-classifier") {
            return Err(invalid!("checkpoint is not a phone classifier"));
        }
        let history = serde_json::from_value(c.header.get("history").cloned().unwrap_or(json!([])))
            .map_err(|e| Error::Format { offset: 0, msg: format!("classifier history: {e}") })?;
        Ok(PhoneClassifier { graph: graph_from_container(c)?, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Train on per-frame phone labels.
pub fn train_phone_classifier(
    clf: &mut PhoneClassifier,
    train: &[(&FeatureMatrix, &[u32])],
    valid: &[(&FeatureMatrix, &[u32])],
    state: &mut TrainState<f32>,
) -> Result<()> {
    let p = clf.n_phones() as u32;
    for (f, l) in train.iter().chain(valid) {
        if l.len() != f.frames() {
            return Err(invalid!("{}: {} labels for {} frames", f.utterance_id, l.len(), f.frames()));
        }
        if let Some(&bad) = l.iter().find(|&&x| x >= p) {
            return Err(invalid!("{}: phone label {bad} >= {p}", f.utterance_id));
        }
    }
    let cast = |s: &[(&FeatureMatrix, &[u32])]| -> Vec<Mat<f32>> { s.iter().map(|(f, _)| f.data.cast()).collect() };
    let (tx, vx) = (cast(train), cast(valid));
    let tr: Vec<Sequence<'_, f32>> = tx.iter().zip(train).map(|(x, (_, l))| Sequence { input: x, aux: None, labels: l }).collect();
    let va: Vec<Sequence<'_, f32>> = vx.iter().zip(valid).map(|(x, (_, l))| Sequence { input: x, aux: None, labels: l }).collect();
    nn::train(&mut clf.graph, &tr, &va, state)?;
    clf.history = state.history.clone();
    Ok(())
}

/// Thin SVD `a = u diag(s) v^T`, `s` non-increasing, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Mat<f64>) -> Result<Svd> {
    if a.rows == 0 || a.cols == 0 {
        return Err(invalid!("svd: empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("svd: non-finite input".into()));
    }
    if a.rows < a.cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = (a.rows, a.cols);
    // columns stored contiguously
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let fro2: f64 = a.data.iter().map(|x| x * x).sum();
    let floor = 1e-30 * fro2;
    let mut converged = false;
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = cols[p].iter().zip(&cols[q]).fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| (a + x * x, b + y * y, g + x * y));
                if gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() || alpha.min(beta) < floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("svd: Jacobi sweeps did not converge".into()));
    }
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms[order[0]];
    let mut u = Mat::zeros(m, n);
    let mut vm = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        let mut col: Vec<f64> = if norms[j] > 1e-14 * smax.max(f64::MIN_POSITIVE) {
            cols[j].iter().map(|x| x / norms[j]).collect()
        } else {
            complete(&basis, m)
        };
        // re-orthogonalise against what we already have
        for b in &basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let nrm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= nrm);
        for i in 0..m {
            u.data[i * n + k] = col[i];
        }
        for i in 0..n {
            vm.data[i * n + k] = v[j][i];
        }
        basis.push(col);
    }
    Ok(Svd { u, s, v: vm })
}

/// A unit vector orthogonal to `basis`.
fn complete(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut c = vec![0.0; m];
        c[e] = 1.0;
        for b in basis {
            let d = b[e];
            c.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = c.iter().map(|x| x * x).sum::<f64>();
        if n > best_norm {
            best_norm = n;
            best = c;
        }
    }
    best
}

/// Rank-truncated factors of the classifier's output transform
/// `A = W^T` (phones x hidden): `A ~ U_r S_r V_r^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinguisticFactorExtractor {
    /// `V_r`, hidden x r.
    pub v: Mat<f64>,
    pub s: Vec<f64>,
    /// `U_r`, phones x r.
    pub u: Mat<f64>,
    /// Scale by `S^{1/2}` (otherwise the factor is `V_r^T h`).
    pub balanced: bool,
}

pub fn svd_decompose(clf: &PhoneClassifier, rank: usize) -> Result<LinguisticFactorExtractor> {
    svd_decompose_weights(&clf.final_weights(), rank)
}

/// `w` is the hidden x phones weight matrix as stored by the affine layer.
pub fn svd_decompose_weights(w: &Mat<f64>, rank: usize) -> Result<LinguisticFactorExtractor> {
    let k = w.rows.min(w.cols);
    if rank == 0 || rank > k {
        return Err(invalid!("svd rank {rank} outside 1..={k}"));
    }
    let d = svd(w)?;
    let take = |m: &Mat<f64>| {
        let rows: Vec<Vec<f64>> = (0..m.rows).map(|i| m.row(i)[..rank].to_vec()).collect();
        Mat::from_rows(&rows)
    };
    // w = U' S V'^T, so A = w^T = V' S U'^T
    Ok(LinguisticFactorExtractor { v: take(&d.u), s: d.s[..rank].to_vec(), u: take(&d.v), balanced: true })
}

impl LinguisticFactorExtractor {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U_r S_r V_r^T`.
    pub fn reconstruct(&self) -> Mat<f64> {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }

    /// Hidden x r projection applied to row activations.
    pub fn projection(&self) -> Mat<f64> {
        let mut p = self.v.clone();
        if self.balanced {
            for i in 0..p.rows {
                for (x, s) in p.row_mut(i).iter_mut().zip(&self.s) {
                    *x *= s.sqrt();
                }
            }
        }
        p
    }

    /// Factor rows for hidden activations `h` (T x hidden).
    pub fn apply(&self, h: &Mat<f64>) -> Result<Mat<f64>> {
        if h.cols != self.v.rows {
            return Err(invalid!("linguistic factor: hidden width {} but extractor expects {}", h.cols, self.v.rows));
        }
        Ok(h.matmul(&self.projection()))
    }

    pub fn section(&self) -> Section {
        let mut s = Section::new(SVD_TAG);
        s.push(Tensor::from_slice("S", &self.s));
        s.push(Tensor::from_mat("V", &self.v));
        s.push(Tensor::from_mat("U", &self.u));
        s.push(Tensor::from_slice("balanced", &[if self.balanced { 1.0 } else { 0.0 }]));
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let v: Mat<f64> = s.get("V")?.to_mat();
        let u: Mat<f64> = s.get("U")?.to_mat();
        let sv = s.get("S")?.to_vec64();
        if v.cols != sv.len() || u.cols != sv.len() {
            return Err(Error::Format { offset: 0, msg: "SVDF section: inconsistent rank".into() });
        }
        Ok(LinguisticFactorExtractor { v, s: sv, u, balanced: s.get("balanced")?.to_vec64().first() == Some(&1.0) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({ "variant": "linguistic-factor", "rank": self.rank() }));
        c.sections.push(self.section());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(Container::read(path)?.section(&SVD_TAG)?)
    }
}

/// Per-frame linguistic factor for one utterance.
pub fn linguistic_factor(ex: &LinguisticFactorExtractor, clf: &PhoneClassifier, feat: &FeatureMatrix) -> Result<Mat<f64>> {
    let f = ex.apply(&clf.hidden(feat)?)?;
    if !f.is_finite() {
        return Err(Error::Numeric(format!("{}: non-finite linguistic factor", feat.utterance_id)));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat<f64> {
        let mut g = crate::util::rng(seed);
        Mat::from_vec(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect())
    }

    fn frob(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn full_rank_reconstructs() {
        let w = rand_mat(1, 30, 12);
        let ex = svd_decompose_weights(&w, 12).unwrap();
        let a = w.transpose();
        assert!(frob(&ex.reconstruct(), &a) < 1e-6 * a.frobenius());
        assert!(ex.s.windows(2).all(|p| p[0] >= p[1]) && ex.s.iter().all(|&s| s >= 0.0));
        let vtv = ex.v.transpose().matmul(&ex.v);
        let eye = Mat::<f64>::identity(12);
        assert!(frob(&vtv, &eye) < 1e-6);
        assert!(svd_decompose_weights(&w, 13).is_err());
        assert!(svd_decompose_weights(&w, 0).is_err());
    }

    #[test]
    fn rank_one_exact() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let y: Vec<f64> = (0..5).map(|i| 1.0 + i as f64 * 0.5).collect();
        let w = Mat::from_vec(8, 5, x.iter().flat_map(|a| y.iter().map(move |b| a * b)).collect());
        let ex = svd_decompose_weights(&w, 1).unwrap();
        assert!(frob(&ex.reconstruct(), &w.transpose()) < 1e-10);
    }

    #[test]
    fn eckart_young_against_nalgebra() {
        let w = rand_mat(3, 64, 20);
        let ex = svd_decompose_weights(&w, 5).unwrap();
        let a = w.transpose();
        let resid = frob(&ex.reconstruct(), &a);
        let oracle = nalgebra::DMatrix::from_row_slice(64, 20, &w.data).svd(false, false).singular_values;
        let mut sv: Vec<f64> = oracle.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let expect = sv[5..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((resid - expect).abs() <= 1e-6 * expect, "{resid} vs {expect}");
        for (a, b) in ex.s.iter().zip(&sv) {
            assert!((a - b).abs() < 1e-9 * sv[0]);
        }
        // no random rank-5 matrix does better
        for seed in 0..20 {
            let m = rand_mat(100 + seed, 20, 5).matmul(&rand_mat(200 + seed, 5, 64));
            assert!(resid <= frob(&m, &a));
        }
    }

    #[test]
    fn factor_is_projection() {
        let w = rand_mat(4, 16, 10);
        let ex = svd_decompose_weights(&w, 4).unwrap();
        assert_eq!(ex.apply(&Mat::zeros(3, 16)).unwrap().data, vec![0.0; 12]);
        let h = rand_mat(5, 3, 16);
        let f = ex.apply(&h).unwrap();
        for t in 0..3 {
            for k in 0..4 {
                let mut d = 0.0;
                for i in 0..16 {
                    d += ex.v.at(i, k) * h.at(t, i);
                }
                assert!((f.at(t, k) - ex.s[k].sqrt() * d).abs() < 1e-12);
            }
        }
        assert!(ex.apply(&Mat::zeros(1, 15)).is_err());
    }

    #[test]
    fn default_factor_width_and_round_trip() {
        let clf = PhoneClassifier::build(&PhoneClassifierConfig::default(), 1).unwrap();
        let ex = svd_decompose(&clf, 40).unwrap();
        let f = FeatureMatrix::new("u", "s", "E", rand_mat(6, 30, 40));
        assert_eq!(linguistic_factor(&ex, &clf, &f).unwrap().cols, 40);
        let dir = tempfile::tempdir().unwrap();
        ex.save(&dir.path().join("f.nnck")).unwrap();
        let back = LinguisticFactorExtractor::load(&dir.path().join("f.nnck")).unwrap();
        assert!(frob(&back.v, &ex.v) < 1e-6 && back.balanced);
        clf.save(&dir.path().join("c.nnck")).unwrap();
        assert_eq!(PhoneClassifier::load(&dir.path().join("c.nnck")).unwrap().graph.params(), clf.graph.params());
    }

    #[test]
    fn single_phone_is_always_right() {
        let cfg = PhoneClassifierConfig { n_phones: 1, hidden: 8, ..PhoneClassifierConfig::default() };
        let clf = PhoneClassifier::build(&cfg, 1).unwrap();
        let x = rand_mat(7, 20, 40).cast::<f32>();
        let labels = vec![0u32; 20];
        let (_, acc) = nn::train::evaluate(&clf.graph, &[Sequence { input: &x, aux: None, labels: &labels }]).unwrap();
        assert_eq!(acc, 1.0);
    }
}
