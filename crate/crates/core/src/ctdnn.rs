//! Convolutional time-delay speaker feature learner, in a phone-blind and
//! a phone-aware variant, plus frame feature and d-vector extraction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{graph_container, graph_from_container, Container};
use crate::embedding::Embedding;
use crate::error::{invalid, Error, Result};
use crate::frontend::FeatureMatrix;
use crate::nn::{self, InputSpec, LayerSpec, Mat, NetworkGraph, Segments, Sequence, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PhoneBlind,
    PhoneAware,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PhoneBlind => "phone-blind",
            Variant::PhoneAware => "phone-aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "phone-blind" => Ok(Variant::PhoneBlind),
            "phone-aware" => Ok(Variant::PhoneAware),
            _ => Err(invalid!("unknown variant {s:?}")),
        }
    }
}

/// Where the linguistic factor joins a phone-aware network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorJoin {
    /// Appended to the bottleneck output, feeding the first time-delay layer.
    Bottleneck,
    /// Appended to the pooled convolutional maps, feeding the bottleneck.
    ConvOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CTDNNConfig {
    pub feat_dim: usize,
    pub splice: usize,
    pub conv_channels: [usize; 2],
    pub conv_time_offsets: [Vec<i32>; 2],
    pub conv_freq_kernel: [usize; 2],
    pub pool: usize,
    pub bottleneck: usize,
    pub td_offsets: [Vec<i32>; 2],
    pub td_width: usize,
    pub pnorm_group: usize,
    pub pnorm_p: f64,
    pub feature_dim: usize,
    pub n_speakers: usize,
    pub factor_join: FactorJoin,
}

impl Default for CTDNNConfig {
    fn default() -> Self {
        CTDNNConfig {
            feat_dim: 40,
            splice: 4,
            conv_channels: [32, 64],
            conv_time_offsets: [vec![-2, -1, 0, 1], vec![-1, 0, 1]],
            conv_freq_kernel: [5, 4],
            pool: 2,
            bottleneck: 512,
            td_offsets: [vec![-1, 2], vec![-2, 1]],
            td_width: 512,
            pnorm_group: 2,
            pnorm_p: 2.0,
            feature_dim: 400,
            n_speakers: 200,
            factor_join: FactorJoin::Bottleneck,
        }
    }
}

fn layers(c: &CTDNNConfig, linguistic_dim: usize) -> Result<Vec<LayerSpec>> {
    if c.feat_dim == 0 || c.feature_dim == 0 || c.n_speakers == 0 || c.bottleneck == 0 {
        return Err(invalid!("ctdnn: widths and speaker count must be >= 1"));
    }
    if c.pool == 0 || c.pnorm_group == 0 {
        return Err(invalid!("ctdnn: pool and pnorm group must be >= 1"));
    }
    let mut l = Vec::new();
    let mut channels = 2 * c.splice + 1;
    let mut freq = c.feat_dim;
    for i in 0..2 {
        if c.conv_freq_kernel[i] == 0 || c.conv_freq_kernel[i] > freq {
            return Err(invalid!("ctdnn: conv{} kernel {} does not fit {freq} bins", i + 1, c.conv_freq_kernel[i]));
        }
        l.push(LayerSpec::Conv2d {
            in_channels: channels,
            in_freq: freq,
            out_channels: c.conv_channels[i],
            time_offsets: c.conv_time_offsets[i].clone(),
            freq_kernel: c.conv_freq_kernel[i],
            freq_stride: 1,
            channel_major_input: i == 0,
        });
        freq = freq - c.conv_freq_kernel[i] + 1;
        channels = c.conv_channels[i];
        if c.pool > freq {
            return Err(invalid!("ctdnn: pool {} does not fit {freq} bins after conv{}", c.pool, i + 1));
        }
        l.push(LayerSpec::MaxPool { channels, in_freq: freq, window: c.pool, stride: c.pool });
        freq = (freq - c.pool) / c.pool + 1;
    }
    let mut width = freq * channels;
    if linguistic_dim > 0 && c.factor_join == FactorJoin::ConvOutput {
        l.push(LayerSpec::AppendAux { input: width, aux: linguistic_dim });
        width += linguistic_dim;
    }
    l.push(LayerSpec::Affine { input: width, output: c.bottleneck });
    width = c.bottleneck;
    if linguistic_dim > 0 && c.factor_join == FactorJoin::Bottleneck {
        l.push(LayerSpec::AppendAux { input: width, aux: linguistic_dim });
        width += linguistic_dim;
    }
    for offs in &c.td_offsets {
        if c.td_width % c.pnorm_group != 0 {
            return Err(invalid!("ctdnn: td width {} not divisible by pnorm group {}", c.td_width, c.pnorm_group));
        }
        l.push(LayerSpec::TimeDelay { input: width, output: c.td_width, offsets: offs.clone() });
        l.push(LayerSpec::PNorm { input: c.td_width, group: c.pnorm_group, p: c.pnorm_p });
        width = c.td_width / c.pnorm_group;
    }
    l.push(LayerSpec::Affine { input: width, output: c.feature_dim });
    l.push(LayerSpec::LengthNorm { dim: c.feature_dim });
    l.push(LayerSpec::Affine { input: c.feature_dim, output: c.n_speakers });
    l.push(LayerSpec::SoftmaxXent { classes: c.n_speakers });
    Ok(l)
}

fn input_spec(c: &CTDNNConfig, aux: usize) -> InputSpec {
    InputSpec { feat_dim: c.feat_dim, splice_left: c.splice, splice_right: c.splice, aux_dim: aux }
}

pub fn build_phone_blind(config: &CTDNNConfig, seed: u64) -> Result<NetworkGraph<f32>> {
    NetworkGraph::build(input_spec(config, 0), layers(config, 0)?, seed)
}

pub fn build_phone_aware(config: &CTDNNConfig, linguistic_dim: usize, seed: u64) -> Result<NetworkGraph<f32>> {
    if linguistic_dim == 0 {
        return Err(invalid!("build_phone_aware: linguistic_dim must be >= 1"));
    }
    NetworkGraph::build(input_spec(config, linguistic_dim), layers(config, linguistic_dim)?, seed)
}

pub fn receptive_field<R: nn::Real>(graph: &NetworkGraph<R>) -> usize {
    graph.receptive_field()
}

/// Index of the layer just past the length-normalised feature layer.
fn feature_stop<R: nn::Real>(g: &NetworkGraph<R>) -> Result<usize> {
    g.layers()
        .iter()
        .position(|l| matches!(l, LayerSpec::LengthNorm { .. }))
        .map(|i| i + 1)
        .ok_or_else(|| invalid!("network has no length-normalised feature layer"))
}

/// A trained (or initialised) speaker network with its label map.
#[derive(Clone, Debug)]
pub struct CtdnnModel {
    pub variant: Variant,
    pub graph: NetworkGraph<f32>,
    pub speakers: Vec<String>,
    pub history: Vec<nn::train::EpochRecord>,
    /// Per-dimension standardisation of the linguistic factor, fitted on
    /// the training frames (phone-aware only).
    pub factor_norm: Option<FactorNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorNorm {
    pub mean: Vec<f64>,
    pub inv_sd: Vec<f64>,
}

impl FactorNorm {
    pub fn fit(factors: &[&Mat<f64>]) -> Result<Self> {
        let d = factors.first().map_or(0, |f| f.cols);
        let mut s = vec![0.0; d];
        let mut s2 = vec![0.0; d];
        let mut n = 0usize;
        for f in factors {
            if f.cols != d {
                return Err(invalid!("linguistic factors of width {} and {d}", f.cols));
            }
            for t in 0..f.rows {
                for (k, &x) in f.row(t).iter().enumerate() {
                    s[k] += x;
                    s2[k] += x * x;
                }
            }
            n += f.rows;
        }
        if n < 2 {
            return Err(Error::Degenerate("factor normalisation needs at least two frames".into()));
        }
        let n = n as f64;
        let mean: Vec<f64> = s.iter().map(|a| a / n).collect();
        let inv_sd = s2.iter().zip(&mean).map(|(q, m)| 1.0 / (q / n - m * m).max(1e-12).sqrt()).collect();
        Ok(FactorNorm { mean, inv_sd })
    }

    pub fn apply(&self, f: &Mat<f64>) -> Result<Mat<f32>> {
        if f.cols != self.mean.len() {
            return Err(invalid!("linguistic factor width {} but normaliser has {}", f.cols, self.mean.len()));
        }
        let mut out = Mat::zeros(f.rows, f.cols);
        for t in 0..f.rows {
            for (k, (o, &x)) in out.row_mut(t).iter_mut().zip(f.row(t)).enumerate() {
                *o = ((x - self.mean[k]) * self.inv_sd[k]) as f32;
            }
        }
        Ok(out)
    }
}

pub const CHECKPOINT_SIGNATURE: &str = "fbank40-cmvn";

impl CtdnnModel {
    pub fn new(variant: Variant, graph: NetworkGraph<f32>, speakers: Vec<String>) -> Result<Self> {
        let want_aux = variant == Variant::PhoneAware;
        if (graph.input().aux_dim > 0) != want_aux {
            return Err(invalid!("{} model needs aux input = {want_aux}", variant.name()));
        }
        if graph.output_dim() != speakers.len() {
            return Err(invalid!("network has {} outputs for {} speakers", graph.output_dim(), speakers.len()));
        }
        feature_stop(&graph)?;
        Ok(CtdnnModel { variant, graph, speakers, history: Vec::new(), factor_norm: None })
    }

    pub fn feature_dim(&self) -> usize {
        let stop = feature_stop(&self.graph).unwrap();
        self.graph.shape_record()[stop - 1].1
    }

    pub fn linguistic_dim(&self) -> usize {
        self.graph.input().aux_dim
    }

    pub fn to_container(&self) -> Container {
        let mut h = serde_json::Map::new();
        h.insert("variant".into(), json!(self.variant.name()));
        h.insert("input_signature".into(), json!(CHECKPOINT_SIGNATURE));
        h.insert("speakers".into(), json!(self.speakers));
        h.insert("history".into(), serde_json::to_value(&self.history).unwrap());
        if let Some(r) = self.history.last() {
            h.insert("valid_accuracy".into(), json!(r.valid_accuracy));
        }
        if let Some(n) = &self.factor_norm {
            h.insert("factor_norm".into(), serde_json::to_value(n).unwrap());
        }
        graph_container(&self.graph, h)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let fmt = |m: &str| Error::Format { offset: 0, msg: format!("ctdnn checkpoint: {m}") };
        let variant = Variant::parse(c.header.get("variant").and_then(Value::as_str).ok_or_else(|| fmt("no variant"))?)?;
        let sig = c.header.get("input_signature").and_then(Value::as_str).unwrap_or("");
        if sig != CHECKPOINT_SIGNATURE {
            return Err(invalid!("ctdnn checkpoint expects input {sig:?}, this build produces {CHECKPOINT_SIGNATURE:?}"));
        }
        let speakers: Vec<String> = serde_json::from_value(c.header.get("speakers").cloned().unwrap_or(Value::Null))
            .map_err(|e| fmt(&e.to_string()))?;
        let history = serde_json::from_value(c.header.get("history").cloned().unwrap_or(json!([]))).map_err(|e| fmt(&e.to_string()))?;
        let mut m = CtdnnModel::new(variant, graph_from_container(c)?, speakers)?;
        m.history = history;
        m.factor_norm = match c.header.get("factor_norm") {
            Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| fmt(&e.to_string()))?),
            None => None,
        };
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Speaker label map: sorted distinct speaker ids.
pub fn speaker_index(feats: &[FeatureMatrix]) -> BTreeMap<String, u32> {
    let mut ids: Vec<&str> = feats.iter().map(|f| f.speaker_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)).collect()
}

/// One training example: normalised fbank, optional linguistic factor,
/// and the speaker index.
pub struct CtdnnExample<'a> {
    pub feat: &'a FeatureMatrix,
    pub factor: Option<&'a Mat<f64>>,
    pub label: u32,
}

struct Owned {
    x: Mat<f32>,
    aux: Option<Mat<f32>>,
    labels: Vec<u32>,
}

fn seq(o: &[Owned]) -> Vec<Sequence<'_, f32>> {
    o.iter().map(|o| Sequence { input: &o.x, aux: o.aux.as_ref(), labels: &o.labels }).collect()
}

fn aux_input(model: &CtdnnModel, factor: Option<&Mat<f64>>) -> Result<Option<Mat<f32>>> {
    match (factor, &model.factor_norm) {
        (Some(f), Some(n)) => n.apply(f).map(Some),
        (f, _) => Ok(f.map(|a| a.cast())),
    }
}

fn owned(model: &CtdnnModel, e: &CtdnnExample<'_>) -> Result<Owned> {
    Ok(Owned { x: e.feat.data.cast(), aux: aux_input(model, e.factor)?, labels: vec![e.label; e.feat.frames()] })
}

/// Train `model` in place on frame-level speaker targets. A phone-aware
/// model without a factor normaliser first gets one fitted on `train`.
pub fn train_ctdnn(model: &mut CtdnnModel, train: &[CtdnnExample<'_>], valid: &[CtdnnExample<'_>], state: &mut TrainState<f32>) -> Result<()> {
    let n = model.speakers.len() as u32;
    let mut used = vec![false; n as usize];
    for e in train.iter().chain(valid) {
        if e.label >= n {
            return Err(invalid!("utterance {}: speaker label {} >= {n}", e.feat.utterance_id, e.label));
        }
        if e.factor.is_some() != (model.variant == Variant::PhoneAware) {
            return Err(invalid!("utterance {}: linguistic factor presence does not match {}", e.feat.utterance_id, model.variant.name()));
        }
        used[e.label as usize] = true;
    }
    if let Some(gap) = used.iter().position(|u| !u) {
        return Err(invalid!("speaker label {gap} has no training data (labels must be contiguous)"));
    }
    if model.variant == Variant::PhoneAware && model.factor_norm.is_none() {
        let f: Vec<&Mat<f64>> = train.iter().filter_map(|e| e.factor).collect();
        model.factor_norm = Some(FactorNorm::fit(&f)?);
    }
    let tr: Vec<Owned> = train.iter().map(|e| owned(model, e)).collect::<Result<_>>()?;
    let va: Vec<Owned> = valid.iter().map(|e| owned(model, e)).collect::<Result<_>>()?;
    nn::train(&mut model.graph, &seq(&tr), &seq(&va), state)?;
    model.history = state.history.clone();
    Ok(())
}

/// Length-normalised feature-layer activations, one row per frame.
pub fn extract_frame_features(model: &CtdnnModel, feat: &FeatureMatrix, factor: Option<&Mat<f64>>) -> Result<Mat<f64>> {
    let g = &model.graph;
    if feat.dim() != g.input().feat_dim {
        return Err(invalid!("{}: feature width {} but network expects {}", feat.utterance_id, feat.dim(), g.input().feat_dim));
    }
    let aux = aux_input(model, factor)?;
    if aux.is_some() != (g.input().aux_dim > 0) {
        return Err(invalid!("{}: linguistic factor presence does not match {}", feat.utterance_id, model.variant.name()));
    }
    let y = g.infer(&feat.data.cast(), aux.as_ref(), &Segments::single(feat.frames()), feature_stop(g)?)?;
    Ok(y.cast())
}

pub type DVector = Embedding;

/// Frame average of `frames`.
pub fn dvector(frames: &Mat<f64>) -> Result<Vec<f64>> {
    if frames.rows == 0 {
        return Err(Error::Degenerate("dvector: no frames".into()));
    }
    let mut v = vec![0.0; frames.cols];
    for t in 0..frames.rows {
        for (a, &x) in v.iter_mut().zip(frames.row(t)) {
            *a += x;
        }
    }
    let n = frames.rows as f64;
    v.iter_mut().for_each(|a| *a /= n);
    Ok(v)
}

pub fn utterance_dvector(model: &CtdnnModel, feat: &FeatureMatrix, factor: Option<&Mat<f64>>) -> Result<DVector> {
    let v = dvector(&extract_frame_features(model, feat, factor)?)?;
    Ok(DVector {
        utterance_id: feat.utterance_id.clone(),
        speaker_id: feat.speaker_id.clone(),
        language_id: feat.language_id.clone(),
        vector: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat<f64> {
        let mut g = crate::util::rng(seed);
        Mat::from_vec(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect())
    }

    fn small_cfg() -> CTDNNConfig {
        CTDNNConfig { conv_channels: [4, 6], bottleneck: 24, td_width: 16, feature_dim: 12, n_speakers: 3, ..CTDNNConfig::default() }
    }

    #[test]
    fn default_shapes() {
        let g = build_phone_blind(&CTDNNConfig::default(), 1).unwrap();
        let kinds: Vec<&str> = g.layers().iter().map(|l| l.kind()).collect();
        assert_eq!(
            kinds,
            [
                "conv2d", "maxpool", "conv2d", "maxpool", "affine", "timedelay", "pnorm", "timedelay", "pnorm", "affine",
                "lengthnorm", "affine", "softmax-xent"
            ]
        );
        let rec = g.shape_record();
        assert_eq!(rec[4].1, 512);
        assert_eq!(rec[9].1, 400);
        assert_eq!(receptive_field(&g), 20);
        let big = build_phone_blind(&CTDNNConfig { n_speakers: 5000, ..CTDNNConfig::default() }, 1).unwrap();
        assert_eq!(big.output_dim(), 5000);

        let a = build_phone_aware(&CTDNNConfig::default(), 40, 1).unwrap();
        let td = a.layers().iter().find(|l| l.kind() == "timedelay").unwrap();
        assert_eq!(td.in_dim(), 552);
        assert!(build_phone_aware(&CTDNNConfig::default(), 0, 1).is_err());
        assert!(build_phone_blind(&CTDNNConfig { conv_freq_kernel: [50, 4], ..CTDNNConfig::default() }, 1).is_err());
    }

    #[test]
    fn one_affine_has_unit_field() {
        let g = NetworkGraph::<f32>::build(InputSpec::plain(3), vec![LayerSpec::Affine { input: 3, output: 2 }], 0).unwrap();
        assert_eq!(receptive_field(&g), 1);
    }

    #[test]
    fn symbolic_field_matches_probe() {
        let cfg = CTDNNConfig { n_speakers: 4, ..CTDNNConfig::default() };
        let g = build_phone_blind(&cfg, 2).unwrap();
        let spk: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let m = CtdnnModel::new(Variant::PhoneBlind, g, spk).unwrap();
        let x = rand_mat(3, 60, 40);
        let f = FeatureMatrix::new("u", "s", "L", x.clone());
        let base = extract_frame_features(&m, &f, None).unwrap();
        let t = 25;
        let mut touched = Vec::new();
        for s in 0..60 {
            let mut y = x.clone();
            for j in 0..40 {
                y.data[s * 40 + j] += 0.5;
            }
            let out = extract_frame_features(&m, &f.with_data(y), None).unwrap();
            if out.row(t).iter().zip(base.row(t)).any(|(a, b)| (a - b).abs() > 1e-7) {
                touched.push(s);
            }
        }
        assert_eq!(touched.len(), receptive_field(&m.graph));
        assert_eq!(touched.first(), Some(&(t - 10)));
        assert_eq!(touched.last(), Some(&(t + 9)));
        assert!(!touched.contains(&(t + 11)));
    }

    #[test]
    fn features_are_unit_rows_and_framewise() {
        let cfg = small_cfg();
        let m = CtdnnModel::new(Variant::PhoneBlind, build_phone_blind(&cfg, 4).unwrap(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let x = rand_mat(5, 30, 40);
        let f = FeatureMatrix::new("u", "s", "L", x.clone());
        let y = extract_frame_features(&m, &f, None).unwrap();
        assert_eq!((y.rows, y.cols), (30, 12));
        for t in 0..30 {
            let n: f64 = y.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        // two copies as separate segments keep identical context
        let twice = Mat::vstack(&[&x.cast::<f32>(), &x.cast::<f32>()]);
        let z = m.graph.infer(&twice, None, &Segments::from_lengths(&[30, 30]), feature_stop(&m.graph).unwrap()).unwrap();
        for t in 0..30 {
            assert_eq!(z.row(t), z.row(t + 30));
        }
        assert!(extract_frame_features(&m, &f.with_data(rand_mat(1, 5, 39)), None).is_err());
    }

    #[test]
    fn zero_factor_matches_blind() {
        let cfg = small_cfg();
        let aware = build_phone_aware(&cfg, 5, 7).unwrap();
        let mut blind = build_phone_blind(&cfg, 8).unwrap();
        let td = aware.layers().iter().position(|l| l.kind() == "timedelay").unwrap();
        for (i, group) in aware.params().iter().enumerate() {
            let bi = if i >= td { i - 1 } else { i };
            if i == td - 1 {
                continue;
            }
            let mut p = group.clone();
            if i == td {
                // drop the weight rows that read the factor
                let w = &group[0];
                let rows: Vec<Vec<f32>> = (0..w.rows).filter(|r| r % 29 < 24).map(|r| w.row(r).to_vec()).collect();
                p[0] = Mat::from_rows(&rows);
            }
            blind.params_mut()[bi] = p;
        }
        let x = rand_mat(9, 20, 40).cast::<f32>();
        let segs = Segments::single(20);
        let zero = Mat::zeros(20, 5);
        let a = aware.infer(&x, Some(&zero), &segs, usize::MAX).unwrap();
        let b = blind.infer(&x, None, &segs, usize::MAX).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| (p - q).abs() < 1e-5));

        let mut bump = zero.clone();
        bump.data[10 * 5] = 1.0;
        let c = aware.infer(&x, Some(&bump), &segs, usize::MAX).unwrap();
        assert!(c.row(10).iter().zip(a.row(10)).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn dvector_means() {
        let m = rand_mat(2, 5, 400);
        let v = dvector(&m).unwrap();
        for j in 0..400 {
            let mut s = 0.0;
            for t in 0..5 {
                s += m.at(t, j);
            }
            assert!((v[j] - s / 5.0).abs() < 1e-12);
        }
        let one = rand_mat(3, 1, 7);
        assert_eq!(dvector(&one).unwrap(), one.data);
        assert!(matches!(dvector(&Mat::zeros(0, 3)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = CtdnnModel::new(Variant::PhoneAware, build_phone_aware(&small_cfg(), 5, 1).unwrap(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        m.factor_norm = Some(FactorNorm { mean: vec![0.5; 5], inv_sd: vec![2.0; 5] });
        let c = CtdnnModel::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(c.variant, Variant::PhoneAware);
        assert_eq!(c.graph.params(), m.graph.params());
        assert_eq!(c.speakers, m.speakers);
        assert_eq!(c.factor_norm, m.factor_norm);
    }

    #[test]
    fn factor_norm_standardises() {
        let a = rand_mat(3, 50, 4);
        let mut b = rand_mat(4, 30, 4);
        b.data.iter_mut().enumerate().for_each(|(i, x)| *x = *x * (1 + i % 4) as f64 + 3.0);
        let n = FactorNorm::fit(&[&a, &b]).unwrap();
        let (za, zb) = (n.apply(&a).unwrap(), n.apply(&b).unwrap());
        for k in 0..4 {
            let col: Vec<f64> = (0..50).map(|t| za.at(t, k) as f64).chain((0..30).map(|t| zb.at(t, k) as f64)).collect();
            let m = col.iter().sum::<f64>() / 80.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 80.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-5, "{k}: {m} {v}");
        }
        assert!(n.apply(&rand_mat(5, 3, 2)).is_err());
        assert!(FactorNorm::fit(&[&rand_mat(5, 1, 2)]).is_err());
    }
}
