use rand::Rng as _;

use super::graph::{LayerSpec, NetworkGraph};
use super::tensor::{Mat, Segments};
use super::train::batch_loss;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Probe {
    pub layer: usize,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a small absolute floor so that two tiny values
/// (both below `1e-9`) agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Batch objective: mean cross-entropy for softmax graphs, otherwise the
/// inner product of the output with a fixed random projection.
struct Objective {
    labels: Vec<Option<u32>>,
    projection: Option<Mat<f64>>,
}

impl Objective {
    fn eval(&self, g: &mut NetworkGraph<f64>, x: &Mat<f64>, aux: Option<&Mat<f64>>, segs: &Segments) -> Result<(f64, Mat<f64>)> {
        let out = g.forward(x, aux, segs)?;
        match &self.projection {
            None => {
                let (loss, _, grad) = batch_loss(&out, &self.labels)?;
                Ok((loss, grad))
            }
            Some(p) => {
                let v = out.data.iter().zip(&p.data).map(|(a, b)| a * b).sum();
                Ok((v, p.clone()))
            }
        }
    }
}

/// Central-difference check of `n_probes` randomly chosen parameters per
/// parametrised layer. Probes whose +/- perturbations change a maxpool
/// winner, or that sit near a zero p-norm group, are redrawn.
pub fn grad_check(
    graph: &NetworkGraph<f64>,
    x: &Mat<f64>,
    aux: Option<&Mat<f64>>,
    labels: &[u32],
    n_probes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = graph.clone();
    let segs = Segments::single(x.rows);
    let mut rng = crate::util::rng(seed);
    let softmax = matches!(g.layers().last(), Some(LayerSpec::SoftmaxXent { .. }));
    let objective = Objective {
        labels: labels.iter().map(|&l| Some(l)).collect(),
        projection: (!softmax).then(|| {
            let n = x.rows * g.output_dim();
            Mat::from_vec(x.rows, g.output_dim(), (0..n).map(|_| crate::util::normal(&mut rng)).collect())
        }),
    };
    let (_, out_grad) = objective.eval(&mut g, x, aux, &segs)?;
    let analytic = g.backward(&out_grad)?;
    let base_sig = g.kink_signature();
    let tolerance = if g.has_non_smooth_layers() { 1e-3 } else { 1e-4 };

    let mut probes = Vec::new();
    for layer in 0..g.layers().len() {
        let shapes = g.layers()[layer].param_shapes();
        if shapes.is_empty() {
            continue;
        }
        let mut taken = 0;
        let mut attempts = 0;
        while taken < n_probes && attempts < n_probes * 50 {
            attempts += 1;
            let tensor = rng.random_range(0..shapes.len());
            let index = rng.random_range(0..shapes[tensor].0 * shapes[tensor].1);
            let orig = g.params()[layer][tensor].data[index];
            g.params_mut()[layer][tensor].data[index] = orig + epsilon;
            let (lp, _) = objective.eval(&mut g, x, aux, &segs)?;
            let sig_p = g.kink_signature();
            let low_p = g.min_pnorm_output();
            g.params_mut()[layer][tensor].data[index] = orig - epsilon;
            let (lm, _) = objective.eval(&mut g, x, aux, &segs)?;
            let sig_m = g.kink_signature();
            let low_m = g.min_pnorm_output();
            g.params_mut()[layer][tensor].data[index] = orig;
            let near_zero = [low_p, low_m].iter().any(|v| v.is_some_and(|v| v < 100.0 * epsilon));
            if sig_p != base_sig || sig_m != base_sig || near_zero {
                continue;
            }
            let numeric = (lp - lm) / (2.0 * epsilon);
            let a = analytic[layer][tensor].data[index];
            probes.push(Probe { layer, tensor, index, analytic: a, numeric, rel_err: rel_err(a, numeric) });
            taken += 1;
        }
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { passed: max_rel_err < tolerance, probes, max_rel_err, tolerance })
}
