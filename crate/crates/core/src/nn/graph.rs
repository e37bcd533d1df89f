use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom};
use super::tensor::{Mat, Real, Segments};
use crate::error::{invalid, Error, Result};

/// One layer of a [`NetworkGraph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Affine {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        in_freq: usize,
        out_channels: usize,
        time_offsets: Vec<i32>,
        freq_kernel: usize,
        freq_stride: usize,
        channel_major_input: bool,
    },
    /// Frequency-axis pooling over a frequency-major map.
    #[serde(rename = "maxpool")]
    MaxPool {
        channels: usize,
        in_freq: usize,
        window: usize,
        stride: usize,
    },
    #[serde(rename = "timedelay")]
    TimeDelay {
        input: usize,
        output: usize,
        offsets: Vec<i32>,
    },
    #[serde(rename = "pnorm")]
    PNorm {
        input: usize,
        group: usize,
        p: f64,
    },
    #[serde(rename = "lengthnorm")]
    LengthNorm { dim: usize },
    /// Concatenates the graph's auxiliary per-frame input.
    AppendAux { input: usize, aux: usize },
    #[serde(rename = "softmax-xent")]
    SoftmaxXent { classes: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::TimeDelay { .. } => "timedelay",
            LayerSpec::PNorm { .. } => "pnorm",
            LayerSpec::LengthNorm { .. } => "lengthnorm",
            LayerSpec::AppendAux { .. } => "append-aux",
            LayerSpec::SoftmaxXent { .. } => "softmax-xent",
        }
    }

    fn conv_geom(&self) -> Option<ConvGeom> {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                in_freq,
                out_channels,
                time_offsets,
                freq_kernel,
                freq_stride,
                channel_major_input,
            } => Some(ConvGeom {
                in_channels: *in_channels,
                in_freq: *in_freq,
                out_channels: *out_channels,
                time_offsets: time_offsets.clone(),
                freq_kernel: *freq_kernel,
                freq_stride: *freq_stride,
                channel_major_input: *channel_major_input,
            }),
            _ => None,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LayerSpec::Affine { input, .. }
            | LayerSpec::TimeDelay { input, .. }
            | LayerSpec::PNorm { input, .. }
            | LayerSpec::AppendAux { input, .. } => *input,
            LayerSpec::Conv2d { in_channels, in_freq, .. } => in_channels * in_freq,
            LayerSpec::MaxPool { channels, in_freq, .. } => channels * in_freq,
            LayerSpec::LengthNorm { dim } => *dim,
            LayerSpec::SoftmaxXent { classes } => *classes,
        }
    }

    pub fn out_dim(&self) -> Result<usize> {
        Ok(match self {
            LayerSpec::Affine { output, .. } | LayerSpec::TimeDelay { output, .. } => *output,
            LayerSpec::Conv2d { out_channels, .. } => self.conv_geom().unwrap().out_freq()? * out_channels,
            LayerSpec::MaxPool { channels, in_freq, window, stride } => {
                if *window == 0 || *stride == 0 || window > in_freq {
                    return Err(invalid!("maxpool: window {window} stride {stride} on {in_freq} bins"));
                }
                ((in_freq - window) / stride + 1) * channels
            }
            LayerSpec::PNorm { input, group, p } => {
                if *group == 0 || input % group != 0 {
                    return Err(invalid!("pnorm: width {input} not divisible by group size {group}"));
                }
                if *p < 1.0 {
                    return Err(invalid!("pnorm: p = {p} < 1"));
                }
                input / group
            }
            LayerSpec::LengthNorm { dim } => *dim,
            LayerSpec::AppendAux { input, aux } => input + aux,
            LayerSpec::SoftmaxXent { classes } => *classes,
        })
    }

    /// Shapes of the parameter tensors (weights first, then bias).
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            LayerSpec::Affine { input, output } => vec![(*input, *output), (1, *output)],
            LayerSpec::TimeDelay { input, output, offsets } => vec![(input * offsets.len(), *output), (1, *output)],
            LayerSpec::Conv2d { out_channels, .. } => {
                vec![(self.conv_geom().unwrap().patch_len(), *out_channels), (1, *out_channels)]
            }
            _ => Vec::new(),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            LayerSpec::Affine { input, output } => (*input, *output),
            LayerSpec::TimeDelay { input, output, offsets } => (input * offsets.len(), *output),
            LayerSpec::Conv2d { in_channels, out_channels, time_offsets, freq_kernel, .. } => {
                let k = time_offsets.len() * freq_kernel;
                (in_channels * k, out_channels * k)
            }
            _ => (0, 0),
        }
    }

    /// Most negative and most positive time offset the layer reads.
    pub fn time_extent(&self) -> (i32, i32) {
        let span = |o: &[i32]| (o.iter().copied().min().unwrap_or(0), o.iter().copied().max().unwrap_or(0));
        match self {
            LayerSpec::Conv2d { time_offsets, .. } => span(time_offsets),
            LayerSpec::TimeDelay { offsets, .. } => span(offsets),
            _ => (0, 0),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, LayerSpec::MaxPool { .. } | LayerSpec::PNorm { .. })
    }
}

/// Per-frame input of a graph: raw feature width, the splice window
/// applied before the first layer, and the auxiliary input width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub feat_dim: usize,
    pub splice_left: usize,
    pub splice_right: usize,
    pub aux_dim: usize,
}

impl InputSpec {
    pub fn plain(feat_dim: usize) -> Self {
        InputSpec { feat_dim, splice_left: 0, splice_right: 0, aux_dim: 0 }
    }

    pub fn spliced_dim(&self) -> usize {
        self.feat_dim * (self.splice_left + self.splice_right + 1)
    }

    fn splice_offsets(&self) -> Vec<i32> {
        (-(self.splice_left as i32)..=self.splice_right as i32).collect()
    }
}

pub type Grads<R> = Vec<Vec<Mat<R>>>;

enum Saved<R> {
    Nothing,
    Cols(Mat<R>),
    Gathered(Mat<R>),
    Argmax(Vec<u32>),
    Norms(Vec<R>),
}

struct Cache<R> {
    segs: Segments,
    /// Input to each layer, plus the final output.
    acts: Vec<Mat<R>>,
    saved: Vec<Saved<R>>,
}

/// Ordered layer stack with its parameters and shape record.
pub struct NetworkGraph<R: Real> {
    input: InputSpec,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Mat<R>>>,
    dims: Vec<(usize, usize)>,
    cache: Option<Cache<R>>,
}

impl<R: Real> Clone for NetworkGraph<R> {
    fn clone(&self) -> Self {
        NetworkGraph {
            input: self.input.clone(),
            layers: self.layers.clone(),
            params: self.params.clone(),
            dims: self.dims.clone(),
            cache: None,
        }
    }
}

impl<R: Real> std::fmt::Debug for NetworkGraph<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkGraph").field("input", &self.input).field("layers", &self.layers).finish()
    }
}

fn check_shapes(input: &InputSpec, layers: &[LayerSpec]) -> Result<Vec<(usize, usize)>> {
    let mut cur = input.spliced_dim();
    let mut dims = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim() != cur {
            return Err(invalid!("layer {i} ({}): expects width {} but receives {cur}", l.kind(), l.in_dim()));
        }
        if let LayerSpec::AppendAux { aux, .. } = l {
            if *aux != input.aux_dim {
                return Err(invalid!("layer {i} (append-aux): aux width {aux} but graph input declares {}", input.aux_dim));
            }
        }
        if matches!(l, LayerSpec::SoftmaxXent { .. }) && i + 1 != layers.len() {
            return Err(invalid!("layer {i}: softmax-xent must be the last layer"));
        }
        let out = l.out_dim().map_err(|e| invalid!("layer {i} ({}): {e}", l.kind()))?;
        if out == 0 {
            return Err(invalid!("layer {i} ({}): zero output width", l.kind()));
        }
        dims.push((cur, out));
        cur = out;
    }
    Ok(dims)
}

impl<R: Real> NetworkGraph<R> {
    /// Validate the shape algebra and draw Glorot-uniform weights
    /// (biases zero) from `seed`. A layer fed by a length-norm sees inputs
    /// with per-unit variance `1/fan_in`, so its range is widened by
    /// `sqrt(fan_in)`.
    pub fn build(input: InputSpec, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let dims = check_shapes(&input, &layers)?;
        let mut rng = crate::util::rng(seed);
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (fi, fo) = l.fans();
                let mut limit = (6.0 / (fi + fo).max(1) as f64).sqrt();
                if i > 0 && matches!(layers[i - 1], LayerSpec::LengthNorm { .. }) {
                    limit *= (fi.max(1) as f64).sqrt();
                }
                l.param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(k, (r, c))| {
                        if k == 0 {
                            let data = (0..r * c).map(|_| R::from_f64c(rng.random_range(-limit..limit))).collect();
                            Mat::from_vec(r, c, data)
                        } else {
                            Mat::zeros(r, c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(NetworkGraph { input, layers, params, dims, cache: None })
    }

    /// Rebuild from stored specs and parameter tensors.
    pub fn from_parts(input: InputSpec, layers: Vec<LayerSpec>, params: Vec<Vec<Mat<R>>>) -> Result<Self> {
        let dims = check_shapes(&input, &layers)?;
        if params.len() != layers.len() {
            return Err(invalid!("{} parameter groups for {} layers", params.len(), layers.len()));
        }
        for (i, (l, p)) in layers.iter().zip(&params).enumerate() {
            let want = l.param_shapes();
            let got: Vec<_> = p.iter().map(|m| (m.rows, m.cols)).collect();
            if want != got {
                return Err(invalid!("layer {i} ({}): parameter shapes {got:?}, expected {want:?}", l.kind()));
            }
        }
        Ok(NetworkGraph { input, layers, params, dims, cache: None })
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// (input width, output width) of every layer.
    pub fn shape_record(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn params(&self) -> &[Vec<Mat<R>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Mat<R>>] {
        self.cache = None;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|m| m.data.len()).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.dims.last().map_or(self.input.spliced_dim(), |d| d.1)
    }

    pub fn has_non_smooth_layers(&self) -> bool {
        self.layers.iter().any(|l| !l.is_smooth())
    }

    /// Frames of past and future context each output frame depends on.
    pub fn context(&self) -> (usize, usize) {
        let mut left = self.input.splice_left as i64;
        let mut right = self.input.splice_right as i64;
        for l in &self.layers {
            let (lo, hi) = l.time_extent();
            left += -(lo.min(0) as i64);
            right += hi.max(0) as i64;
        }
        (left as usize, right as usize)
    }

    /// Width in frames of the input window seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut span = (self.input.splice_left + self.input.splice_right) as i64;
        for l in &self.layers {
            let (lo, hi) = l.time_extent();
            span += (hi - lo) as i64;
        }
        span as usize + 1
    }

    pub fn zero_grads(&self) -> Grads<R> {
        self.params.iter().map(|g| g.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()).collect()
    }

    pub fn cast<S: Real>(&self) -> NetworkGraph<S> {
        NetworkGraph {
            input: self.input.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|g| g.iter().map(|m| m.cast()).collect()).collect(),
            dims: self.dims.clone(),
            cache: None,
        }
    }

    fn run(
        &self,
        x: &Mat<R>,
        aux: Option<&Mat<R>>,
        segs: &Segments,
        stop: usize,
        keep: bool,
    ) -> Result<(Mat<R>, Option<Cache<R>>)> {
        if x.cols != self.input.feat_dim {
            return Err(invalid!("graph input: width {} but graph expects {}", x.cols, self.input.feat_dim));
        }
        if segs.rows() != x.rows {
            return Err(invalid!("graph input: {} rows but segment map covers {}", x.rows, segs.rows()));
        }
        if self.input.aux_dim > 0 {
            match aux {
                Some(a) if a.rows == x.rows && a.cols == self.input.aux_dim => {}
                Some(a) => {
                    return Err(invalid!(
                        "auxiliary input is {}x{}, expected {}x{}",
                        a.rows, a.cols, x.rows, self.input.aux_dim
                    ))
                }
                None => return Err(invalid!("graph needs a {}-wide auxiliary input", self.input.aux_dim)),
            }
        }
        let stop = stop.min(self.layers.len());
        let mut cur = if self.input.splice_left + self.input.splice_right > 0 {
            ops::gather_offsets(x, segs, &self.input.splice_offsets())
        } else {
            x.clone()
        };
        let mut acts = Vec::new();
        let mut saved = Vec::new();
        for (i, layer) in self.layers[..stop].iter().enumerate() {
            let p = &self.params[i];
            let (out, s) = match layer {
                LayerSpec::Affine { .. } => (ops::affine_forward(&cur, &p[0], &p[1].data)?, Saved::Nothing),
                LayerSpec::Conv2d { .. } => {
                    let (y, cols) = ops::conv2d_forward(&cur, segs, &layer.conv_geom().unwrap(), &p[0], &p[1].data)?;
                    (y, if keep { Saved::Cols(cols) } else { Saved::Nothing })
                }
                LayerSpec::MaxPool { channels, in_freq, window, stride } => {
                    let (y, arg) = ops::maxpool_freq_forward(&cur, *channels, *in_freq, *window, *stride)?;
                    (y, Saved::Argmax(arg))
                }
                LayerSpec::TimeDelay { offsets, .. } => {
                    let (y, g) = ops::timedelay_forward(&cur, segs, offsets, &p[0], &p[1].data)?;
                    (y, if keep { Saved::Gathered(g) } else { Saved::Nothing })
                }
                LayerSpec::PNorm { group, p, .. } => (ops::pnorm_forward(&cur, *group, *p)?, Saved::Nothing),
                LayerSpec::LengthNorm { .. } => {
                    let (y, n) = ops::lengthnorm_forward(&cur)
                        .map_err(|e| Error::Numeric(format!("layer {i} (lengthnorm): {e}")))?;
                    (y, Saved::Norms(n))
                }
                LayerSpec::AppendAux { input, aux: w } => {
                    let a = aux.expect("checked above");
                    let mut y = Mat::zeros(cur.rows, input + w);
                    for t in 0..cur.rows {
                        let r = y.row_mut(t);
                        r[..*input].copy_from_slice(cur.row(t));
                        r[*input..].copy_from_slice(a.row(t));
                    }
                    (y, Saved::Nothing)
                }
                LayerSpec::SoftmaxXent { .. } => (cur.clone(), Saved::Nothing),
            };
            if !out.is_finite() {
                return Err(Error::Numeric(format!("non-finite output at layer {i} ({})", layer.kind())));
            }
            if keep {
                acts.push(cur);
                saved.push(s);
            }
            cur = out;
        }
        let cache = keep.then(|| {
            acts.push(cur.clone());
            Cache { segs: segs.clone(), acts, saved }
        });
        Ok((cur, cache))
    }

    /// Forward pass through all layers, caching what backward needs.
    /// Returns the graph output (the logits when the last layer is
    /// softmax-xent).
    pub fn forward(&mut self, x: &Mat<R>, aux: Option<&Mat<R>>, segs: &Segments) -> Result<Mat<R>> {
        self.cache = None;
        let (y, cache) = self.run(x, aux, segs, self.layers.len(), true)?;
        self.cache = cache;
        Ok(y)
    }

    /// Uncached forward pass through the first `stop` layers.
    pub fn infer(&self, x: &Mat<R>, aux: Option<&Mat<R>>, segs: &Segments, stop: usize) -> Result<Mat<R>> {
        Ok(self.run(x, aux, segs, stop, false)?.0)
    }

    /// Flat maxpool winner indices of the cached forward pass.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        if let Some(c) = &self.cache {
            for s in &c.saved {
                if let Saved::Argmax(a) = s {
                    sig.extend_from_slice(a);
                }
            }
        }
        sig
    }

    /// Smallest p-norm group norm seen in the cached forward pass.
    pub fn min_pnorm_output(&self) -> Option<f64> {
        let c = self.cache.as_ref()?;
        let mut m: Option<f64> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::PNorm { .. }) {
                let v = c.acts[i + 1].data.iter().fold(f64::INFINITY, |a, &b| a.min(b.to_f64c()));
                m = Some(m.map_or(v, |x| x.min(v)));
            }
        }
        m
    }

    /// Gradients of every parameter given the gradient at the graph output
    /// (the logits when the last layer is softmax-xent).
    pub fn backward(&self, out_grad: &Mat<R>) -> Result<Grads<R>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let last = cache.acts.last().unwrap();
        if out_grad.rows != last.rows || out_grad.cols != last.cols {
            return Err(invalid!(
                "output gradient is {}x{}, output is {}x{}",
                out_grad.rows, out_grad.cols, last.rows, last.cols
            ));
        }
        let mut grads = self.zero_grads();
        let mut g = out_grad.clone();
        let segs = &cache.segs;
        for i in (0..self.layers.len()).rev() {
            let x = &cache.acts[i];
            let p = &self.params[i];
            let layer = &self.layers[i];
            if i == 0 {
                // the graph input needs no gradient
                let (dw, db) = match (layer, &cache.saved[i]) {
                    (LayerSpec::Affine { .. }, _) => ops::weight_grads(x, &g),
                    (LayerSpec::Conv2d { .. }, Saved::Cols(cols)) => {
                        ops::weight_grads(cols, &Mat::from_vec(cols.rows, g.cols * g.rows / cols.rows.max(1), g.data))
                    }
                    (LayerSpec::TimeDelay { .. }, Saved::Gathered(gth)) => ops::weight_grads(gth, &g),
                    _ => break,
                };
                grads[0] = vec![dw, Mat::from_vec(1, db.len(), db)];
                break;
            }
            g = match (layer, &cache.saved[i]) {
                (LayerSpec::Affine { .. }, _) => {
                    let (dx, dw, db) = ops::affine_backward(x, &p[0], &g);
                    grads[i] = vec![dw, Mat::from_vec(1, db.len(), db)];
                    dx
                }
                (LayerSpec::Conv2d { .. }, Saved::Cols(cols)) => {
                    let (dx, dw, db) = ops::conv2d_backward(cols, segs, &layer.conv_geom().unwrap(), &p[0], &g);
                    grads[i] = vec![dw, Mat::from_vec(1, db.len(), db)];
                    dx
                }
                (LayerSpec::TimeDelay { offsets, input, .. }, Saved::Gathered(gth)) => {
                    let (dx, dw, db) = ops::timedelay_backward(gth, segs, offsets, &p[0], &g, *input);
                    grads[i] = vec![dw, Mat::from_vec(1, db.len(), db)];
                    dx
                }
                (LayerSpec::MaxPool { .. }, Saved::Argmax(arg)) => ops::maxpool_freq_backward(&g, arg, x.cols),
                (LayerSpec::PNorm { group, p, .. }, _) => {
                    ops::pnorm_backward(x, &cache.acts[i + 1], &g, *group, *p)
                }
                (LayerSpec::LengthNorm { .. }, Saved::Norms(n)) => {
                    ops::lengthnorm_backward(&cache.acts[i + 1], n, &g)
                }
                (LayerSpec::AppendAux { input, .. }, _) => {
                    let mut dx = Mat::zeros(g.rows, *input);
                    for t in 0..g.rows {
                        dx.row_mut(t).copy_from_slice(&g.row(t)[..*input]);
                    }
                    dx
                }
                (LayerSpec::SoftmaxXent { .. }, _) => g,
                _ => return Err(Error::State(format!("layer {i}: forward cache incomplete"))),
            };
        }
        Ok(grads)
    }
}
