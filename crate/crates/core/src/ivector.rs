//! Diagonal GMM-UBM, Baum-Welch statistics, total-variability training
//! and i-vector extraction.

use std::path::Path;

use nalgebra::{DMatrix, DVector as NVec};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Section, Tensor};
use crate::embedding::Embedding;
use crate::error::{invalid, Error, Result};
use crate::frontend::FeatureMatrix;
use crate::nn::{Mat, Real};
use crate::util::{normal, rng};

pub const UBM_TAG: [u8; 4] = *b"UBM0";
pub const TV_TAG: [u8; 4] = *b"TVMX";
pub const VAR_FLOOR: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Rows per parallel work unit.
const BLOCK: usize = 4096;

pub type IVector = Embedding;

#[derive(Clone, Debug, PartialEq)]
pub struct Ubm {
    pub weights: Vec<f64>,
    pub means: Mat<f64>,
    pub vars: Mat<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UbmConfig {
    pub components: usize,
    pub iterations: usize,
    pub kmeans_iterations: usize,
    /// Use every n-th frame for training.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig { components: 64, iterations: 10, kmeans_iterations: 3, frame_stride: 4, seed: 1 }
    }
}

impl Ubm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    /// `log w_c + log N(x; m_c, diag v_c)` for every component.
    fn consts(&self) -> Vec<f64> {
        (0..self.components())
            .map(|c| {
                let logdet: f64 = self.vars.row(c).iter().map(|v| v.ln()).sum();
                self.weights[c].max(1e-300).ln() - 0.5 * (self.dim() as f64 * LN_2PI + logdet)
            })
            .collect()
    }

    /// Posteriors into `post`; returns the frame log-likelihood.
    fn posteriors_into(&self, consts: &[f64], x: &[f64], post: &mut [f64]) -> f64 {
        for (c, p) in post.iter_mut().enumerate() {
            let m = self.means.row(c);
            let v = self.vars.row(c);
            let mut q = 0.0;
            for j in 0..x.len() {
                let d = x[j] - m[j];
                q += d * d / v[j];
            }
            *p = consts[c] - 0.5 * q;
        }
        let mx = post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for p in post.iter_mut() {
            *p = (*p - mx).exp();
            s += *p;
        }
        for p in post.iter_mut() {
            *p /= s;
        }
        mx + s.ln()
    }

    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.components()];
        self.posteriors_into(&self.consts(), x, &mut p);
        p
    }

    pub fn log_likelihood(&self, frames: &Mat<f64>) -> f64 {
        let consts = self.consts();
        let mut p = vec![0.0; self.components()];
        (0..frames.rows).map(|t| self.posteriors_into(&consts, frames.row(t), &mut p)).sum()
    }

    pub fn section(&self) -> Section {
        let mut s = Section::new(UBM_TAG);
        s.push(Tensor::from_slice("weights", &self.weights));
        s.push(Tensor::from_mat("means", &self.means));
        s.push(Tensor::from_mat("vars", &self.vars));
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let mut weights = s.get("weights")?.to_vec64();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let u = Ubm { weights, means: s.get("means")?.to_mat(), vars: s.get("vars")?.to_mat() };
        if u.means.rows != u.weights.len() || u.vars.rows != u.means.rows || u.vars.cols != u.means.cols {
            return Err(Error::Format { offset: 0, msg: "UBM0 section: inconsistent shapes".into() });
        }
        Ok(u)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({ "variant": "ubm", "components": self.components(), "dim": self.dim() }));
        c.sections.push(self.section());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(Container::read(path)?.section(&UBM_TAG)?)
    }
}

/// Sufficient statistics accumulated in fixed row blocks, summed in
/// block order so the result does not depend on scheduling.
struct Acc {
    n: Vec<f64>,
    f: Vec<f64>,
    s: Vec<f64>,
    ll: f64,
}

fn em_stats(ubm: &Ubm, x: &Mat<f64>) -> Acc {
    let (c, d) = (ubm.components(), ubm.dim());
    let consts = ubm.consts();
    let blocks: Vec<Acc> = (0..x.rows.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut a = Acc { n: vec![0.0; c], f: vec![0.0; c * d], s: vec![0.0; c * d], ll: 0.0 };
            let mut post = vec![0.0; c];
            for t in b * BLOCK..((b + 1) * BLOCK).min(x.rows) {
                let xr = x.row(t);
                a.ll += ubm.posteriors_into(&consts, xr, &mut post);
                for (k, &g) in post.iter().enumerate() {
                    if g < 1e-12 {
                        continue;
                    }
                    a.n[k] += g;
                    let (fk, sk) = (&mut a.f[k * d..(k + 1) * d], &mut a.s[k * d..(k + 1) * d]);
                    for j in 0..d {
                        fk[j] += g * xr[j];
                        sk[j] += g * xr[j] * xr[j];
                    }
                }
            }
            a
        })
        .collect();
    let mut tot = Acc { n: vec![0.0; c], f: vec![0.0; c * d], s: vec![0.0; c * d], ll: 0.0 };
    for a in blocks {
        tot.ll += a.ll;
        tot.n.iter_mut().zip(&a.n).for_each(|(x, y)| *x += y);
        tot.f.iter_mut().zip(&a.f).for_each(|(x, y)| *x += y);
        tot.s.iter_mut().zip(&a.s).for_each(|(x, y)| *x += y);
    }
    tot
}

fn global_moments(x: &Mat<f64>) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols;
    let n = x.rows as f64;
    let mut mean = vec![0.0; d];
    for t in 0..x.rows {
        mean.iter_mut().zip(x.row(t)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for t in 0..x.rows {
        for j in 0..d {
            var[j] += (x.at(t, j) - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Stack every `stride`-th frame of every utterance.
pub fn pool_frames(feats: &[&FeatureMatrix], stride: usize) -> Result<Mat<f64>> {
    let stride = stride.max(1);
    let d = feats.first().map(|f| f.dim()).ok_or_else(|| invalid!("no training features"))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for f in feats {
        if f.dim() != d {
            return Err(invalid!("{}: width {} but others have {d}", f.utterance_id, f.dim()));
        }
        for t in (0..f.frames()).step_by(stride) {
            data.extend_from_slice(f.data.row(t));
            rows += 1;
        }
    }
    Ok(Mat::from_vec(rows, d, data))
}

/// EM training from pooled frames. Returns the model and the total
/// log-likelihood measured at each E-step plus once after the last update.
pub fn train_ubm(x: &Mat<f64>, cfg: &UbmConfig) -> Result<(Ubm, Vec<f64>)> {
    let (c, d) = (cfg.components, x.cols);
    if c == 0 {
        return Err(invalid!("train_ubm: components must be >= 1"));
    }
    if x.rows < 2 * c {
        return Err(invalid!("train_ubm: {} frames is too few for {c} components", x.rows));
    }
    let (gmean, gvar) = global_moments(x);
    let floor: Vec<f64> = gvar.iter().map(|v| (v * VAR_FLOOR).max(1e-12)).collect();
    let mut r = rng(cfg.seed);
    let seeds = sample(&mut r, x.rows, c).into_vec();
    let mut means = Mat::from_rows(&seeds.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
    if c == 1 {
        means = Mat::from_vec(1, d, gmean.clone());
    }
    // k-means on variance-normalised distance
    for _ in 0..cfg.kmeans_iterations {
        let assign: Vec<usize> = (0..x.rows)
            .into_par_iter()
            .map(|t| {
                let xr = x.row(t);
                let mut best = (f64::INFINITY, 0);
                for k in 0..c {
                    let m = means.row(k);
                    let dist: f64 = (0..d).map(|j| (xr[j] - m[j]).powi(2) / gvar[j].max(1e-12)).sum();
                    if dist < best.0 {
                        best = (dist, k);
                    }
                }
                best.1
            })
            .collect();
        let mut sum = vec![0.0; c * d];
        let mut cnt = vec![0usize; c];
        for (t, &k) in assign.iter().enumerate() {
            cnt[k] += 1;
            sum[k * d..(k + 1) * d].iter_mut().zip(x.row(t)).for_each(|(s, v)| *s += v);
        }
        for k in 0..c {
            if cnt[k] > 0 {
                for j in 0..d {
                    means.data[k * d + j] = sum[k * d + j] / cnt[k] as f64;
                }
            }
        }
    }
    let mut ubm = Ubm {
        weights: vec![1.0 / c as f64; c],
        means,
        vars: Mat::from_vec(c, d, (0..c).flat_map(|_| gvar.iter().map(|v| v.max(1e-12))).collect()),
    };
    let mut history = Vec::new();
    for it in 0..=cfg.iterations {
        let acc = em_stats(&ubm, x);
        if !acc.ll.is_finite() {
            return Err(Error::Numeric(format!("train_ubm: log-likelihood {} at iteration {it}", acc.ll)));
        }
        history.push(acc.ll);
        if it == cfg.iterations {
            break;
        }
        let total: f64 = acc.n.iter().sum();
        let mut empty = Vec::new();
        for k in 0..c {
            let n = acc.n[k];
            if n < 1.0 {
                empty.push(k);
                continue;
            }
            ubm.weights[k] = n / total;
            for j in 0..d {
                let m = acc.f[k * d + j] / n;
                ubm.means.data[k * d + j] = m;
                ubm.vars.data[k * d + j] = (acc.s[k * d + j] / n - m * m).max(floor[j]);
            }
        }
        for k in empty {
            let big = (0..c).max_by(|&a, &b| ubm.weights[a].total_cmp(&ubm.weights[b])).unwrap();
            log::warn!("train_ubm: component {k} empty at iteration {it}, splitting component {big}");
            let w = ubm.weights[big] / 2.0;
            ubm.weights[big] = w;
            ubm.weights[k] = w;
            for j in 0..d {
                let (m, v) = (ubm.means.at(big, j), ubm.vars.at(big, j));
                let e = 0.2 * v.sqrt();
                ubm.means.data[big * d + j] = m + e;
                ubm.means.data[k * d + j] = m - e;
                ubm.vars.data[k * d + j] = v;
            }
        }
        let s: f64 = ubm.weights.iter().sum();
        ubm.weights.iter_mut().for_each(|w| *w /= s);
    }
    Ok((ubm, history))
}

/// Zeroth and centred first-order statistics of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub n: Vec<f64>,
    /// C x D, centred on the UBM means.
    pub f: Mat<f64>,
}

pub fn accumulate_stats(ubm: &Ubm, feat: &FeatureMatrix) -> Result<SuffStats> {
    if feat.dim() != ubm.dim() {
        return Err(invalid!("{}: feature width {} but UBM has {}", feat.utterance_id, feat.dim(), ubm.dim()));
    }
    let (c, d) = (ubm.components(), ubm.dim());
    let consts = ubm.consts();
    let mut n = vec![0.0; c];
    let mut f = Mat::zeros(c, d);
    let mut post = vec![0.0; c];
    for t in 0..feat.frames() {
        let x = feat.data.row(t);
        ubm.posteriors_into(&consts, x, &mut post);
        for (k, &g) in post.iter().enumerate() {
            n[k] += g;
            let m = ubm.means.row(k);
            let fk = &mut f.data[k * d..(k + 1) * d];
            for j in 0..d {
                fk[j] += g * (x[j] - m[j]);
            }
        }
    }
    Ok(SuffStats { utterance_id: feat.utterance_id.clone(), speaker_id: feat.speaker_id.clone(), language_id: feat.language_id.clone(), n, f })
}

/// Total-variability matrix, stored as `(C*D) x R` with component blocks
/// of `D` rows, plus the UBM variances it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct TMatrix {
    pub t: Mat<f64>,
    pub components: usize,
    pub dim: usize,
    pub vars: Mat<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig { rank: 100, iterations: 10, seed: 1 }
    }
}

fn cholesky(l: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = l.clone().cholesky() {
        return Ok(c);
    }
    log::warn!("{what}: normal equations not positive definite, adding ridge 1e-8");
    let n = l.nrows();
    (l + DMatrix::identity(n, n) * 1e-8)
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what}: matrix not positive definite after ridge")))
}

/// `L^-T L^-1` from the Cholesky factor, with the product on the fast gemm.
fn spd_inverse(ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let r = ch.l_dirty().nrows();
    let mut linv = DMatrix::identity(r, r);
    ch.l_dirty().solve_lower_triangular_mut(&mut linv);
    // column-major linv: element (i, j) at i + j r
    let mut out = DMatrix::zeros(r, r);
    <f64 as Real>::gemm(r, r, r, 1.0, linv.as_slice(), r, 1, linv.as_slice(), 1, r, 0.0, out.as_mut_slice(), 1, r);
    out
}

impl TMatrix {
    pub fn rank(&self) -> usize {
        self.t.cols
    }

    /// `T_c^T S_c^-1 T_c` flattened per component (C x R^2).
    fn precisions(&self) -> Mat<f64> {
        let (d, r) = (self.dim, self.rank());
        let mut out = Mat::zeros(self.components, r * r);
        for c in 0..self.components {
            let mut scaled = self.t.data[c * d * r..(c + 1) * d * r].to_vec();
            for j in 0..d {
                let iv = 1.0 / self.vars.at(c, j);
                scaled[j * r..(j + 1) * r].iter_mut().for_each(|x| *x *= iv);
            }
            let tc = &self.t.data[c * d * r..(c + 1) * d * r];
            <f64 as Real>::gemm(r, d, r, 1.0, tc, 1, r, &scaled, r, 1, 0.0, &mut out.data[c * r * r..(c + 1) * r * r], r, 1);
        }
        out
    }

    /// `T^T S^-1 F` for one utterance.
    fn projected(&self, f: &Mat<f64>) -> NVec<f64> {
        let r = self.rank();
        let g: Vec<f64> = f.data.iter().zip(&self.vars.data).map(|(x, v)| x / v).collect();
        let mut b = NVec::zeros(r);
        <f64 as Real>::gemm(1, g.len(), r, 1.0, &g, g.len(), 1, &self.t.data, r, 1, 0.0, b.as_mut_slice(), r, 1);
        b
    }

    /// Posterior precision `I + sum_c N_c T_c^T S_c^-1 T_c`.
    fn posterior_precision(&self, prec: &Mat<f64>, n: &[f64]) -> DMatrix<f64> {
        let r = self.rank();
        let mut m = DMatrix::identity(r, r);
        <f64 as Real>::gemm(1, n.len(), r * r, 1.0, n, n.len(), 1, &prec.data, r * r, 1, 1.0, m.as_mut_slice(), r * r, 1);
        m.fill_lower_triangle_with_upper_triangle();
        m
    }

    pub fn section(&self) -> Section {
        let mut s = Section::new(TV_TAG);
        s.push(Tensor::from_mat("T", &self.t));
        s.push(Tensor::from_mat("vars", &self.vars));
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let t: Mat<f64> = s.get("T")?.to_mat();
        let vars: Mat<f64> = s.get("vars")?.to_mat();
        if vars.rows * vars.cols != t.rows {
            return Err(Error::Format { offset: 0, msg: "TVMX section: inconsistent shapes".into() });
        }
        Ok(TMatrix { components: vars.rows, dim: vars.cols, t, vars })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({ "variant": "tmatrix", "components": self.components, "dim": self.dim, "rank": self.rank() }));
        c.sections.push(self.section());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(Container::read(path)?.section(&TV_TAG)?)
    }
}

/// EM for `M = m + T w`. Returns the matrix and the per-iteration
/// objective `sum_u (-1/2 log|L_u| + 1/2 b_u^T L_u^-1 b_u)`, which is the
/// statistics' marginal log-likelihood up to a constant.
pub fn train_tmatrix(ubm: &Ubm, stats: &[SuffStats], cfg: &TvConfig) -> Result<(TMatrix, Vec<f64>)> {
    let (c, d, r) = (ubm.components(), ubm.dim(), cfg.rank);
    if r == 0 || r > c * d {
        return Err(invalid!("train_tmatrix: rank {r} outside 1..={}", c * d));
    }
    if stats.len() < r {
        return Err(invalid!("train_tmatrix: {} utterances for rank {r}", stats.len()));
    }
    for s in stats {
        if s.n.len() != c || s.f.rows != c || s.f.cols != d {
            return Err(invalid!("{}: statistics shape does not match the UBM", s.utterance_id));
        }
    }
    let mut g = rng(cfg.seed);
    let mut tm = TMatrix { t: Mat::zeros(c * d, r), components: c, dim: d, vars: ubm.vars.clone() };
    for k in 0..c {
        for j in 0..d {
            let sd = ubm.vars.at(k, j).sqrt();
            for i in 0..r {
                tm.t.data[(k * d + j) * r + i] = 0.1 * sd * normal(&mut g);
            }
        }
    }
    let mut history = Vec::new();
    for it in 0..=cfg.iterations {
        let prec = tm.precisions();
        // E-step per utterance: (objective, E[w], E[w w^T])
        let post: Vec<(f64, NVec<f64>, DMatrix<f64>)> = stats
            .par_iter()
            .map(|s| {
                let l = tm.posterior_precision(&prec, &s.n);
                let ch = cholesky(l, "train_tmatrix")?;
                let b = tm.projected(&s.f);
                let w = ch.solve(&b);
                let logdet: f64 = ch.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
                let obj = -0.5 * logdet + 0.5 * b.dot(&w);
                let mut ww = spd_inverse(&ch);
                ww.ger(1.0, &w, &w, 1.0);
                Ok((obj, w, ww))
            })
            .collect::<Result<_>>()?;
        let obj: f64 = post.iter().map(|p| p.0).sum();
        if !obj.is_finite() {
            return Err(Error::Numeric(format!("train_tmatrix: objective {obj} at iteration {it}")));
        }
        history.push(obj);
        if it == cfg.iterations {
            break;
        }
        // M-step: T_c = C_c A_c^-1 with A_c = sum_u N_uc E[ww^T], C_c = sum_u F_uc E[w]^T
        let mut acc_a = vec![0.0; c * r * r];
        let mut acc_c = vec![0.0; c * d * r];
        for (chunk_s, chunk_p) in stats.chunks(512).zip(post.chunks(512)) {
            let u = chunk_s.len();
            let nb: Vec<f64> = chunk_s.iter().flat_map(|s| s.n.iter().copied()).collect();
            let fb: Vec<f64> = chunk_s.iter().flat_map(|s| s.f.data.iter().copied()).collect();
            let wb: Vec<f64> = chunk_p.iter().flat_map(|p| p.1.iter().copied()).collect();
            let wwb: Vec<f64> = chunk_p.iter().flat_map(|p| p.2.iter().copied()).collect();
            <f64 as Real>::gemm(c, u, r * r, 1.0, &nb, 1, c, &wwb, r * r, 1, 1.0, &mut acc_a, r * r, 1);
            <f64 as Real>::gemm(c * d, u, r, 1.0, &fb, 1, c * d, &wb, r, 1, 1.0, &mut acc_c, r, 1);
        }
        let mut new_t = Mat::zeros(c * d, r);
        let blocks: Vec<Vec<f64>> = (0..c)
            .into_par_iter()
            .map(|k| {
                // column-major ww blocks are symmetric, so the layout does not matter
                let mut a = DMatrix::from_row_slice(r, r, &acc_a[k * r * r..(k + 1) * r * r]);
                a.fill_lower_triangle_with_upper_triangle();
                let cc = DMatrix::from_row_slice(d, r, &acc_c[k * d * r..(k + 1) * d * r]);
                let ch = cholesky(a, "train_tmatrix M-step")?;
                // T_c^T = A^-1 C_c^T
                let tt = ch.solve(&cc.transpose());
                let mut out = vec![0.0; d * r];
                for j in 0..d {
                    for i in 0..r {
                        out[j * r + i] = tt[(i, j)];
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (k, b) in blocks.into_iter().enumerate() {
            new_t.data[k * d * r..(k + 1) * d * r].copy_from_slice(&b);
        }
        tm.t = new_t;
    }
    Ok((tm, history))
}

/// Posterior mean `(I + T^T S^-1 N T)^-1 T^T S^-1 F`.
pub fn extract_ivector(tm: &TMatrix, stats: &SuffStats) -> Result<IVector> {
    if stats.n.len() != tm.components || stats.f.rows != tm.components || stats.f.cols != tm.dim {
        return Err(invalid!("{}: statistics shape does not match the T matrix", stats.utterance_id));
    }
    let l = tm.posterior_precision(&tm.precisions(), &stats.n);
    let w = cholesky(l, "extract_ivector")?.solve(&tm.projected(&stats.f));
    if w.iter().any(|x| !x.is_finite()) {
        let bad: Vec<usize> = (0..tm.components).filter(|&c| !stats.n[c].is_finite() || stats.f.row(c).iter().any(|x| !x.is_finite())).collect();
        return Err(Error::Numeric(format!("{}: non-finite i-vector (non-finite stats in components {bad:?})", stats.utterance_id)));
    }
    Ok(IVector {
        utterance_id: stats.utterance_id.clone(),
        speaker_id: stats.speaker_id.clone(),
        language_id: stats.language_id.clone(),
        vector: w.iter().copied().collect(),
    })
}

/// Batch extraction sharing the per-component precomputation.
pub fn extract_ivectors(tm: &TMatrix, stats: &[SuffStats]) -> Result<Vec<IVector>> {
    let prec = tm.precisions();
    stats
        .par_iter()
        .map(|s| {
            if s.n.len() != tm.components || s.f.rows != tm.components || s.f.cols != tm.dim {
                return Err(invalid!("{}: statistics shape does not match the T matrix", s.utterance_id));
            }
            let w = cholesky(tm.posterior_precision(&prec, &s.n), "extract_ivector")?.solve(&tm.projected(&s.f));
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("{}: non-finite i-vector", s.utterance_id)));
            }
            Ok(IVector { utterance_id: s.utterance_id.clone(), speaker_id: s.speaker_id.clone(), language_id: s.language_id.clone(), vector: w.iter().copied().collect() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn feat(x: Mat<f64>) -> FeatureMatrix {
        FeatureMatrix::new("u", "s", "E", x)
    }

    fn gauss(seed: u64, rows: usize, cols: usize, mean: f64, sd: f64) -> Mat<f64> {
        let mut r = rng(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| mean + sd * normal(&mut r)).collect())
    }

    #[test]
    fn single_component_is_global_moments() {
        let x = gauss(1, 500, 3, 2.0, 1.5);
        let (u, _) = train_ubm(&x, &UbmConfig { components: 1, iterations: 3, ..UbmConfig::default() }).unwrap();
        let (m, v) = global_moments(&x);
        for j in 0..3 {
            assert!((u.means.at(0, j) - m[j]).abs() < 1e-8);
            assert!((u.vars.at(0, j) - v[j]).abs() < 1e-8);
        }
        assert!((u.weights[0] - 1.0).abs() < 1e-10);
        let s = accumulate_stats(&u, &feat(x.clone())).unwrap();
        assert!((s.n[0] - 500.0).abs() < 1e-9);
        for j in 0..3 {
            let direct: f64 = (0..500).map(|t| x.at(t, j) - u.means.at(0, j)).sum();
            assert!((s.f.at(0, j) - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn recovers_two_component_mixture() {
        let n = 2000;
        let a = gauss(2, n, 2, -3.0, 1.0);
        let b = gauss(3, n, 2, 3.0, 1.0);
        let x = Mat::vstack(&[&a, &b]);
        let (u, ll) = train_ubm(&x, &UbmConfig { components: 2, iterations: 10, ..UbmConfig::default() }).unwrap();
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()));
        let se = 1.0 / (n as f64).sqrt();
        let mut ms: Vec<f64> = (0..2).map(|k| u.means.at(k, 0)).collect();
        ms.sort_by(f64::total_cmp);
        assert!((ms[0] + 3.0).abs() < 3.0 * se && (ms[1] - 3.0).abs() < 3.0 * se, "{ms:?}");
        assert!((u.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn posteriors_one_hot_at_means() {
        let mut u = Ubm { weights: vec![0.5, 0.5], means: Mat::from_vec(2, 2, vec![-10.0, 0.0, 10.0, 0.0]), vars: Mat::from_vec(2, 2, vec![1.0; 4]) };
        u.weights = vec![0.5, 0.5];
        let x = Mat::from_vec(3, 2, vec![-10.0, 0.0, 10.0, 0.0, 10.0, 0.0]);
        let s = accumulate_stats(&u, &feat(x)).unwrap();
        assert!((s.n[0] - 1.0).abs() < 1e-12 && (s.n[1] - 2.0).abs() < 1e-12);
        let mut r = rng(5);
        let y = Mat::from_vec(40, 2, (0..80).map(|_| r.random_range(-12.0..12.0)).collect());
        let s = accumulate_stats(&u, &feat(y)).unwrap();
        assert!((s.n.iter().sum::<f64>() - 40.0).abs() < 1e-6);
        assert!(accumulate_stats(&u, &feat(Mat::zeros(3, 3))).is_err());
    }

    fn scalar_model(t: f64, var: f64) -> TMatrix {
        TMatrix { t: Mat::from_vec(1, 1, vec![t]), components: 1, dim: 1, vars: Mat::from_vec(1, 1, vec![var]) }
    }

    fn stats(n: Vec<f64>, f: Mat<f64>) -> SuffStats {
        SuffStats { utterance_id: "u".into(), speaker_id: "s".into(), language_id: "E".into(), n, f }
    }

    #[test]
    fn scalar_ivector_closed_form() {
        let (t, v, n, f) = (1.7, 0.6, 12.0, 3.3);
        let w = extract_ivector(&scalar_model(t, v), &stats(vec![n], Mat::from_vec(1, 1, vec![f]))).unwrap();
        assert!((w.vector[0] - (t * f / v) / (1.0 + t * t * n / v)).abs() < 1e-12);
        let z = extract_ivector(&scalar_model(t, v), &stats(vec![n], Mat::zeros(1, 1))).unwrap();
        assert_eq!(z.vector, vec![0.0]);
        let e = extract_ivector(&scalar_model(t, v), &stats(vec![0.0], Mat::zeros(1, 1))).unwrap();
        assert_eq!(e.vector, vec![0.0]);
    }

    #[test]
    fn ivector_linear_in_first_order() {
        let mut r = rng(8);
        let tm = TMatrix { t: gauss(9, 6, 2, 0.0, 1.0), components: 3, dim: 2, vars: Mat::from_vec(3, 2, vec![0.5, 1.0, 2.0, 1.5, 0.7, 1.1]) };
        let n: Vec<f64> = (0..3).map(|_| r.random_range(1.0..20.0)).collect();
        let f = gauss(10, 3, 2, 0.0, 3.0);
        let w1 = extract_ivector(&tm, &stats(n.clone(), f.clone())).unwrap();
        let f2 = Mat::from_vec(3, 2, f.data.iter().map(|x| 2.5 * x).collect());
        let w2 = extract_ivector(&tm, &stats(n, f2)).unwrap();
        assert!(w1.vector.iter().zip(&w2.vector).all(|(a, b)| (2.5 * a - b).abs() < 1e-10));
    }

    #[test]
    fn tmatrix_recovers_known_subspace() {
        // C = 2, D = 2, R = 1
        let truth = [1.0, -0.5, 0.3, 0.8];
        let ubm = Ubm { weights: vec![0.5, 0.5], means: Mat::zeros(2, 2), vars: Mat::from_vec(2, 2, vec![1.0; 4]) };
        let mut r = rng(11);
        let data: Vec<SuffStats> = (0..400)
            .map(|_| {
                let w = normal(&mut r);
                let n = vec![r.random_range(20.0..60.0), r.random_range(20.0..60.0)];
                let mut f = Mat::zeros(2, 2);
                for c in 0..2 {
                    for j in 0..2 {
                        let noise: f64 = normal(&mut r) * f64::sqrt(n[c]);
                        f.data[c * 2 + j] = n[c] * truth[c * 2 + j] * w + noise;
                    }
                }
                stats(n, f)
            })
            .collect();
        let (tm, hist) = train_tmatrix(&ubm, &data, &TvConfig { rank: 1, iterations: 15, seed: 2 }).unwrap();
        assert!(hist.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()), "{hist:?}");
        let dot: f64 = tm.t.data.iter().zip(&truth).map(|(a, b)| a * b).sum();
        let na = tm.t.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = truth.iter().map(|a| a * a).sum::<f64>().sqrt();
        let angle = (dot.abs() / (na * nb)).min(1.0).acos().to_degrees();
        assert!(angle < 5.0, "angle {angle}");
    }

    #[test]
    fn zero_stats_give_prior_mean() {
        let ubm = Ubm { weights: vec![1.0], means: Mat::zeros(1, 3), vars: Mat::from_vec(1, 3, vec![1.0; 3]) };
        let data: Vec<SuffStats> = (0..5).map(|i| stats(vec![10.0 + i as f64], Mat::zeros(1, 3))).collect();
        let (tm, _) = train_tmatrix(&ubm, &data, &TvConfig { rank: 2, iterations: 2, seed: 1 }).unwrap();
        for s in &data {
            assert!(extract_ivector(&tm, s).unwrap().vector.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn storage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = gauss(1, 400, 3, 0.0, 1.0);
        let (u, _) = train_ubm(&x, &UbmConfig { components: 4, iterations: 2, ..UbmConfig::default() }).unwrap();
        u.save(&dir.path().join("u")).unwrap();
        let back = Ubm::load(&dir.path().join("u")).unwrap();
        assert!(back.means.data.iter().zip(&u.means.data).all(|(a, b)| (a - b).abs() < 1e-5));
        let tm = scalar_model(0.5, 2.0);
        tm.save(&dir.path().join("t")).unwrap();
        assert_eq!(TMatrix::load(&dir.path().join("t")).unwrap(), tm);
    }
}
