//! Filterbank and cepstral features, deltas, splicing, mean/variance
//! normalisation, and the feature archive.

mod archive;

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub use archive::{ArchiveReader, ArchiveWriter, read_archive, write_archive};

use crate::error::{invalid, Error, Result};
use crate::nn::Mat;
use crate::synth::{frame_count, Utterance, SAMPLE_RATE};

pub const FRAME_LENGTH: usize = 200;
pub const FRAME_SHIFT: usize = 80;
pub const FFT_SIZE: usize = 256;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 4000.0;
pub const MFCC_FILTERS: usize = 23;
pub const CMVN_EPS: f64 = 1e-10;
pub const MFCC_DIM: usize = 20;
pub const DELTA_WINDOW: usize = 2;

/// A `T x D` matrix of frames tagged with its utterance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub data: Mat<f64>,
}

impl FeatureMatrix {
    pub fn new(utterance_id: &str, speaker_id: &str, language_id: &str, data: Mat<f64>) -> Self {
        FeatureMatrix { utterance_id: utterance_id.into(), speaker_id: speaker_id.into(), language_id: language_id.into(), data }
    }

    pub fn frames(&self) -> usize {
        self.data.rows
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }

    pub fn with_data(&self, data: Mat<f64>) -> Self {
        FeatureMatrix { data, ..self.clone() }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale, as weights over
/// the `FFT_SIZE / 2 + 1` power-spectrum bins.
pub fn mel_filterbank(n_mels: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    let step = (hi - lo) / (n_mels + 1) as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (lo + m as f64 * step, lo + (m + 1) as f64 * step, lo + (m + 2) as f64 * step);
            (0..=FFT_SIZE / 2)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64);
                    if mel > l && mel <= c {
                        (mel - l) / (c - l)
                    } else if mel > c && mel < r {
                        (r - mel) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable state for feature extraction: FFT plan, window, filterbanks.
pub struct Frontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    fbank_filters: Vec<Vec<f64>>,
    mfcc_filters: Vec<Vec<f64>>,
    n_mels: usize,
}

impl Frontend {
    pub fn new(n_mels: usize) -> Result<Self> {
        if n_mels == 0 || n_mels > FFT_SIZE / 2 {
            return Err(invalid!("fbank: n_mels must be in 1..={}, got {n_mels}", FFT_SIZE / 2));
        }
        let window = (0..FRAME_LENGTH).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (FRAME_LENGTH - 1) as f64).cos()).collect();
        Ok(Frontend {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window,
            fbank_filters: mel_filterbank(n_mels),
            mfcc_filters: mel_filterbank(MFCC_FILTERS),
            n_mels,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    fn frames(&self, samples: &[i16]) -> Result<Vec<Vec<f64>>> {
        let t = frame_count(samples.len());
        if t == 0 {
            return Err(invalid!("features: {} samples is shorter than one {FRAME_LENGTH}-sample frame", samples.len()));
        }
        Ok((0..t)
            .map(|i| samples[i * FRAME_SHIFT..i * FRAME_SHIFT + FRAME_LENGTH].iter().map(|&s| s as f64 / 32768.0).collect())
            .collect())
    }

    /// Windowed power spectrum of one frame, `FFT_SIZE / 2 + 1` bins.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i].re = (x - mean) * w;
        }
        self.fft.process(&mut buf);
        buf[..=FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    fn log_mel(filters: &[Vec<f64>], power: &[f64]) -> Vec<f64> {
        filters.iter().map(|f| f.iter().zip(power).map(|(w, p)| w * p).sum::<f64>().max(LOG_FLOOR).ln()).collect()
    }

    /// Log mel filterbank energies, `T x n_mels`.
    pub fn fbank(&self, samples: &[i16]) -> Result<Mat<f64>> {
        let frames = self.frames(samples)?;
        let mut out = Mat::zeros(frames.len(), self.n_mels);
        for (t, f) in frames.iter().enumerate() {
            out.row_mut(t).copy_from_slice(&Self::log_mel(&self.fbank_filters, &self.power_spectrum(f)));
        }
        Ok(out)
    }

    /// `n_ceps - 1` cepstra (c1 upward) followed by log frame energy.
    pub fn mfcc(&self, samples: &[i16], n_ceps: usize) -> Result<Mat<f64>> {
        if n_ceps < 2 || n_ceps > MFCC_FILTERS {
            return Err(invalid!("mfcc: n_ceps must be in 2..={MFCC_FILTERS}, got {n_ceps}"));
        }
        let frames = self.frames(samples)?;
        let m = MFCC_FILTERS;
        let dct: Vec<Vec<f64>> = (1..n_ceps)
            .map(|k| (0..m).map(|j| (2.0 / m as f64).sqrt() * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()).collect())
            .collect();
        let mut out = Mat::zeros(frames.len(), n_ceps);
        for (t, f) in frames.iter().enumerate() {
            let lm = Self::log_mel(&self.mfcc_filters, &self.power_spectrum(f));
            let row = out.row_mut(t);
            for (k, basis) in dct.iter().enumerate() {
                row[k] = basis.iter().zip(&lm).map(|(a, b)| a * b).sum();
            }
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            row[n_ceps - 1] = f.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>().max(LOG_FLOOR).ln();
        }
        Ok(out)
    }
}

fn with_frontend<T>(n_mels: usize, f: impl FnOnce(&Frontend) -> Result<T>) -> Result<T> {
    thread_local! {
        static CACHE: std::cell::RefCell<Option<Frontend>> = const { std::cell::RefCell::new(None) };
    }
    CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.as_ref().is_none_or(|fe| fe.n_mels != n_mels) {
            *c = Some(Frontend::new(n_mels)?);
        }
        f(c.as_ref().unwrap())
    })
}

fn tagged(utt: &Utterance, data: Mat<f64>) -> FeatureMatrix {
    FeatureMatrix::new(&utt.utterance_id, &utt.speaker_id, &utt.language_id, data)
}

pub fn fbank(utt: &Utterance, n_mels: usize) -> Result<FeatureMatrix> {
    with_frontend(n_mels, |fe| fe.fbank(&utt.samples)).map(|d| tagged(utt, d))
}

/// 19 cepstra plus log energy.
pub fn mfcc(utt: &Utterance) -> Result<FeatureMatrix> {
    with_frontend(40, |fe| fe.mfcc(&utt.samples, MFCC_DIM)).map(|d| tagged(utt, d))
}

/// Regression deltas over `+-window` frames with replicated edges.
pub fn deltas(x: &Mat<f64>, window: usize) -> Mat<f64> {
    let norm: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = x.rows as isize - 1;
    let mut d = Mat::zeros(x.rows, x.cols);
    for t in 0..x.rows as isize {
        for n in 1..=window as isize {
            let (p, q) = ((t + n).min(last) as usize, (t - n).max(0) as usize);
            for j in 0..x.cols {
                d.data[t as usize * x.cols + j] += n as f64 * (x.at(p, j) - x.at(q, j)) / norm;
            }
        }
    }
    d
}

/// `[static, delta, delta-delta]` with a +-2 frame regression window.
pub fn add_deltas(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    let x = &feat.data;
    if x.cols != MFCC_DIM {
        return Err(invalid!("add_deltas: expected {MFCC_DIM} input dims, got {}", x.cols));
    }
    if x.rows == 0 {
        return Err(invalid!("add_deltas: empty matrix"));
    }
    let d1 = deltas(x, DELTA_WINDOW);
    let d2 = deltas(&d1, DELTA_WINDOW);
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, 3 * d);
    for t in 0..x.rows {
        let row = out.row_mut(t);
        row[..d].copy_from_slice(x.row(t));
        row[d..2 * d].copy_from_slice(d1.row(t));
        row[2 * d..].copy_from_slice(d2.row(t));
    }
    Ok(feat.with_data(out))
}

/// Concatenate frames `t-left ..= t+right` (edge replicated), oldest first.
pub fn splice_mat(x: &Mat<f64>, left: usize, right: usize) -> Mat<f64> {
    let w = left + right + 1;
    let last = x.rows as isize - 1;
    let mut out = Mat::zeros(x.rows, w * x.cols);
    for t in 0..x.rows {
        let row = out.row_mut(t);
        for (i, o) in (-(left as isize)..=right as isize).enumerate() {
            let s = (t as isize + o).clamp(0, last) as usize;
            row[i * x.cols..(i + 1) * x.cols].copy_from_slice(x.row(s));
        }
    }
    out
}

pub fn splice(feat: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    feat.with_data(splice_mat(&feat.data, left, right))
}

/// Per-dimension mean removal and unit variance. Dimensions whose variance
/// is at most [`CMVN_EPS`] are only centred.
pub fn cmvn_mat(x: &Mat<f64>) -> Result<Mat<f64>> {
    if x.rows < 2 {
        return Err(invalid!("cmvn: need at least 2 frames, got {}", x.rows));
    }
    let n = x.rows as f64;
    let mut out = x.clone();
    for j in 0..x.cols {
        let mean = (0..x.rows).map(|t| x.at(t, j)).sum::<f64>() / n;
        let var = (0..x.rows).map(|t| (x.at(t, j) - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > CMVN_EPS { 1.0 / var.sqrt() } else { 1.0 };
        for t in 0..x.rows {
            out.data[t * x.cols + j] = (x.at(t, j) - mean) * scale;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("cmvn: non-finite output".into()));
    }
    Ok(out)
}

pub fn cmvn(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(feat.with_data(cmvn_mat(&feat.data)?))
}
