//! Deterministic source-filter corpus generator.
//!
//! Each "language" is an inventory of phone prototypes (spectral envelopes
//! sampled on a fixed band grid). A speaker warps the envelope along the
//! frequency axis, tilts it, and excites it with a harmonic source at the
//! speaker's pitch (voiced phones) or with shaped noise (unvoiced phones).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::util::{derive_seed, normal, rng};

pub const SAMPLE_RATE: u32 = 8000;
pub const N_BANDS: usize = 24;
/// Minimum RMS dB distance between any two phone envelopes.
pub const ENVELOPE_FLOOR_DB: f64 = 3.0;
const NYQUIST: f64 = SAMPLE_RATE as f64 / 2.0;
const FRAME_SHIFT: usize = 80;
const FRAME_LENGTH: usize = 200;

pub fn band_centers() -> Vec<f64> {
    let w = NYQUIST / N_BANDS as f64;
    (0..N_BANDS).map(|i| (i as f64 + 0.5) * w).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonePrototype {
    /// Linear band gains over [`band_centers`].
    pub envelope: Vec<f64>,
    pub mean_duration_ms: f64,
    pub voiced: bool,
}

fn to_db(g: f64) -> f64 {
    20.0 * g.max(1e-4).log10()
}

impl PhonePrototype {
    /// Envelope in dB at `hz`, linearly interpolated between band centres.
    pub fn gain_db_at(&self, hz: f64) -> f64 {
        let w = NYQUIST / N_BANDS as f64;
        let pos = (hz / w - 0.5).clamp(0.0, (N_BANDS - 1) as f64);
        let i = (pos.floor() as usize).min(N_BANDS - 2);
        let a = pos - i as f64;
        (1.0 - a) * to_db(self.envelope[i]) + a * to_db(self.envelope[i + 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneInventory {
    pub language_id: String,
    pub phones: Vec<PhonePrototype>,
}

impl PhoneInventory {
    pub fn max_mean_duration_ms(&self) -> f64 {
        self.phones.iter().map(|p| p.mean_duration_ms).fold(0.0, f64::max)
    }
}

/// RMS difference of two envelopes in dB.
pub fn envelope_distance_db(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (to_db(x) - to_db(y)).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

fn resonance_envelope(peaks: &[(f64, f64, f64)]) -> Vec<f64> {
    let raw: Vec<f64> = band_centers()
        .iter()
        .map(|&f| {
            let p: f64 = peaks.iter().map(|&(c, bw, amp)| amp / (1.0 + ((f - c) / (bw / 2.0)).powi(2))).sum();
            (p + 1e-3).sqrt()
        })
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter().map(|v| v / max).collect()
}

fn draw_prototype(r: &mut crate::util::Rng) -> PhonePrototype {
    let voiced = r.random_bool(0.75);
    let envelope = if voiced {
        let f1 = r.random_range(250.0..900.0);
        let f2 = r.random_range((f1 + 300.0)..2600.0);
        let f3 = r.random_range((f2 + 300.0f64).max(2000.0)..3700.0);
        resonance_envelope(&[
            (f1, r.random_range(80.0..200.0), 1.0),
            (f2, r.random_range(100.0..260.0), 10f64.powf(-r.random_range(0.3..1.2))),
            (f3, r.random_range(150.0..320.0), 10f64.powf(-r.random_range(0.8..1.8))),
        ])
    } else {
        let c = r.random_range(1500.0..3700.0);
        resonance_envelope(&[(c, r.random_range(600.0..1500.0), 1.0), (c * 0.5, 800.0, 0.05)])
    };
    let mean_duration_ms = if voiced { r.random_range(70.0..140.0) } else { r.random_range(50.0..110.0) };
    PhonePrototype { envelope, mean_duration_ms, voiced }
}

/// Draw `n_phones` prototypes whose pairwise envelope distance exceeds
/// [`ENVELOPE_FLOOR_DB`]. Deterministic in `(seed, language_id, n_phones)`.
pub fn make_inventory(seed: u64, language_id: &str, n_phones: usize) -> Result<PhoneInventory> {
    make_inventory_excluding(seed, language_id, n_phones, &[])
}

/// As [`make_inventory`], additionally keeping every prototype above the
/// floor from all prototypes of `others`.
pub fn make_inventory_excluding(
    seed: u64,
    language_id: &str,
    n_phones: usize,
    others: &[&PhoneInventory],
) -> Result<PhoneInventory> {
    if n_phones == 0 {
        return Err(invalid!("make_inventory: n_phones must be >= 1"));
    }
    if language_id.is_empty() || language_id.contains(['\t', '\n']) {
        return Err(invalid!("make_inventory: bad language id {language_id:?}"));
    }
    let mut r = rng(derive_seed(seed, &format!("inventory/{language_id}")));
    let mut phones: Vec<PhonePrototype> = Vec::with_capacity(n_phones);
    let mut attempts = 0;
    while phones.len() < n_phones {
        attempts += 1;
        if attempts > 200 * n_phones + 1000 {
            return Err(invalid!("make_inventory: cannot place {n_phones} distinct phones for {language_id}"));
        }
        let cand = draw_prototype(&mut r);
        let clash = phones
            .iter()
            .chain(others.iter().flat_map(|o| o.phones.iter()))
            .any(|p| envelope_distance_db(&p.envelope, &cand.envelope) <= ENVELOPE_FLOOR_DB);
        if !clash {
            phones.push(cand);
        }
    }
    Ok(PhoneInventory { language_id: language_id.to_string(), phones })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub pitch_hz: f64,
    /// Multiplicative frequency warp of every envelope.
    pub formant_shift: f64,
    pub spectral_tilt_db_per_octave: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRanges {
    pub pitch_hz: (f64, f64),
    pub formant_shift: (f64, f64),
    pub tilt_db_per_octave: (f64, f64),
    pub gain: (f64, f64),
}

impl Default for SpeakerRanges {
    fn default() -> Self {
        SpeakerRanges { pitch_hz: (70.0, 300.0), formant_shift: (0.85, 1.18), tilt_db_per_octave: (-3.0, 1.0), gain: (0.5, 1.0) }
    }
}

fn log_uniform(r: &mut crate::util::Rng, (lo, hi): (f64, f64)) -> f64 {
    (r.random_range(lo.ln()..=hi.ln())).exp()
}

pub fn sample_speaker(seed: u64, speaker_id: &str) -> SpeakerProfile {
    sample_speaker_in(seed, speaker_id, &SpeakerRanges::default())
}

/// Pitch and warp are log-uniform, tilt and gain uniform over `ranges`.
pub fn sample_speaker_in(seed: u64, speaker_id: &str, ranges: &SpeakerRanges) -> SpeakerProfile {
    let mut r = rng(derive_seed(seed, &format!("speaker/{speaker_id}")));
    SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        pitch_hz: log_uniform(&mut r, ranges.pitch_hz),
        formant_shift: log_uniform(&mut r, ranges.formant_shift),
        spectral_tilt_db_per_octave: r.random_range(ranges.tilt_db_per_octave.0..=ranges.tilt_db_per_octave.1),
        gain: r.random_range(ranges.gain.0..=ranges.gain.1),
    }
}

/// Per-utterance (session) variability and rendering constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Log-normal spread of the session pitch around the speaker pitch.
    pub session_pitch_sd: f64,
    pub session_warp_sd: f64,
    pub session_tilt_sd: f64,
    /// Realised phone durations are `mean * U(1 - j, 1 + j)`.
    pub duration_jitter: f64,
    /// Relative depth of the slow pitch wobble inside an utterance.
    pub pitch_wobble: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { session_pitch_sd: 0.04, session_warp_sd: 0.015, session_tilt_sd: 0.5, duration_jitter: 0.25, pitch_wobble: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: usize,
    pub start_sample: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub segments: Vec<PhoneSegment>,
    /// 16-bit PCM at [`SAMPLE_RATE`].
    pub samples: Vec<i16>,
}

/// Frames of a `n_samples` signal with 25 ms windows every 10 ms.
pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < FRAME_LENGTH {
        0
    } else {
        1 + (n_samples - FRAME_LENGTH) / FRAME_SHIFT
    }
}

/// `(start_frame, phone)` pairs: a frame belongs to the phone covering
/// its centre sample.
pub fn label_starts(segments: &[PhoneSegment], n_samples: usize) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    let mut seg = 0;
    for t in 0..frame_count(n_samples) {
        let centre = t * FRAME_SHIFT + FRAME_LENGTH / 2;
        while seg + 1 < segments.len() && segments[seg + 1].start_sample <= centre {
            seg += 1;
        }
        let p = segments[seg].phone as u32;
        if out.last().is_none_or(|&(_, q)| q != p) {
            out.push((t as u32, p));
        }
    }
    out
}

/// Expand `(start_frame, phone)` pairs to one label per frame.
pub fn expand_labels(starts: &[(u32, u32)], n_frames: usize) -> Vec<u32> {
    let mut labels = vec![0u32; n_frames];
    for (i, &(s, p)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(n_frames, |n| n.0 as usize).min(n_frames);
        for l in labels.iter_mut().take(end).skip(s as usize) {
            *l = p;
        }
    }
    labels
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn label_starts(&self) -> Vec<(u32, u32)> {
        label_starts(&self.segments, self.samples.len())
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }
}

struct Voice {
    warp: f64,
    tilt: f64,
}

impl Voice {
    fn amplitude(&self, p: &PhonePrototype, hz: f64) -> f64 {
        let db = p.gain_db_at(hz / self.warp) + self.tilt * (hz.max(50.0) / 500.0).log2();
        10f64.powf(db / 20.0)
    }
}

/// Zero-phase FIR approximating the warped, tilted envelope of `p`.
fn noise_filter(voice: &Voice, p: &PhonePrototype) -> Vec<f64> {
    const HALF: usize = 32;
    let n = 2 * HALF;
    let mag: Vec<f64> = (0..=HALF).map(|k| voice.amplitude(p, k as f64 * SAMPLE_RATE as f64 / n as f64)).collect();
    (0..=2 * HALF)
        .map(|i| {
            let m = i as f64 - HALF as f64;
            let mut acc = mag[0];
            for (k, &a) in mag.iter().enumerate().skip(1) {
                let w = if k == HALF { 1.0 } else { 2.0 };
                acc += w * a * (2.0 * PI * k as f64 * m / n as f64).cos();
            }
            let hann = 0.5 + 0.5 * (PI * m / (HALF as f64 + 1.0)).cos();
            acc / n as f64 * hann
        })
        .collect()
}

/// Render one utterance. The phone sequence is cycled until the target
/// duration is reached; the last phone is trimmed so that the length
/// matches the target to the sample.
#[allow(clippy::too_many_arguments)]
pub fn synth_utterance(
    utterance_id: &str,
    language_id: &str,
    speaker: &SpeakerProfile,
    inventory: &PhoneInventory,
    phone_sequence: &[usize],
    target_duration_s: f64,
    seed: u64,
    params: &SynthParams,
) -> Result<Utterance> {
    if phone_sequence.is_empty() {
        return Err(invalid!("synth_utterance: empty phone sequence"));
    }
    if let Some(&bad) = phone_sequence.iter().find(|&&p| p >= inventory.phones.len()) {
        return Err(invalid!("synth_utterance: phone index {bad} outside inventory of {}", inventory.phones.len()));
    }
    if !(target_duration_s > 0.0) {
        return Err(invalid!("synth_utterance: target duration {target_duration_s} s"));
    }
    let mut r = rng(seed);
    let total = ((target_duration_s * SAMPLE_RATE as f64).round() as usize).max(1);

    let mut segments = Vec::new();
    let mut pos = 0;
    for &p in phone_sequence.iter().cycle() {
        if pos >= total {
            break;
        }
        let jitter = 1.0 + params.duration_jitter * r.random_range(-1.0..=1.0);
        let len = ((inventory.phones[p].mean_duration_ms * jitter * SAMPLE_RATE as f64 / 1000.0).round() as usize).max(1);
        let len = len.min(total - pos);
        segments.push(PhoneSegment { phone: p, start_sample: pos, n_samples: len });
        pos += len;
    }

    let pitch = speaker.pitch_hz * (params.session_pitch_sd * normal(&mut r)).exp();
    let voice = Voice {
        warp: speaker.formant_shift * (params.session_warp_sd * normal(&mut r)).exp(),
        tilt: speaker.spectral_tilt_db_per_octave + params.session_tilt_sd * normal(&mut r),
    };
    let wobble_rate = r.random_range(2.0..5.0);
    let wobble_phase = r.random_range(0.0..2.0 * PI);
    let f0_at = |n: usize| {
        let x = n as f64 / total as f64;
        let t = n as f64 / SAMPLE_RATE as f64;
        pitch * (1.0 + 0.06 * (0.5 - x)) * (1.0 + params.pitch_wobble * (2.0 * PI * wobble_rate * t + wobble_phase).sin())
    };
    let f0_min = pitch * 0.97 * (1.0 - params.pitch_wobble);
    let n_harm = ((3800.0 / f0_min).floor() as usize).max(1);

    let mut seg_of = vec![0usize; total];
    for (i, s) in segments.iter().enumerate() {
        seg_of[s.start_sample..s.start_sample + s.n_samples].fill(i);
    }

    // harmonic amplitudes at anchors every FRAME_SHIFT samples
    let n_anchor = total / FRAME_SHIFT + 2;
    let anchors: Vec<Vec<f64>> = (0..n_anchor)
        .map(|a| {
            let n = (a * FRAME_SHIFT).min(total - 1);
            let ph = &inventory.phones[segments[seg_of[n]].phone];
            if !ph.voiced {
                return vec![0.0; n_harm];
            }
            let f0 = f0_at(n);
            (1..=n_harm).map(|k| if k as f64 * f0 < 3900.0 { voice.amplitude(ph, k as f64 * f0) } else { 0.0 }).collect()
        })
        .collect();

    let mut out = vec![0.0f64; total];
    let mut theta = r.random_range(0.0..2.0 * PI);
    let mut amp = vec![0.0; n_harm];
    for (n, o) in out.iter_mut().enumerate() {
        let a = n / FRAME_SHIFT;
        let w = (n % FRAME_SHIFT) as f64 / FRAME_SHIFT as f64;
        for (k, v) in amp.iter_mut().enumerate() {
            *v = (1.0 - w) * anchors[a][k] + w * anchors[a + 1][k];
        }
        let (s1, c1) = theta.sin_cos();
        let (mut prev, mut cur) = (0.0, s1);
        let mut acc = 0.0;
        for &ak in &amp {
            acc += ak * cur;
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
        *o = 0.04 * acc;
        theta = (theta + 2.0 * PI * f0_at(n) / SAMPLE_RATE as f64) % (2.0 * PI);
    }

    const RAMP: usize = 40;
    for s in segments.iter().filter(|s| !inventory.phones[s.phone].voiced) {
        let h = noise_filter(&voice, &inventory.phones[s.phone]);
        let noise: Vec<f64> = (0..s.n_samples + h.len()).map(|_| normal(&mut r)).collect();
        for i in 0..s.n_samples {
            let v: f64 = h.iter().zip(&noise[i..i + h.len()]).map(|(a, b)| a * b).sum();
            let ramp = ((i + 1) as f64 / RAMP as f64).min((s.n_samples - i) as f64 / RAMP as f64).min(1.0);
            out[s.start_sample + i] += 0.25 * ramp * v;
        }
    }

    let samples = out
        .iter()
        .map(|&v| ((speaker.gain * v).clamp(-1.0, 1.0) * 32767.0).round() as i16)
        .collect();
    Ok(Utterance {
        utterance_id: utterance_id.to_string(),
        speaker_id: speaker.speaker_id.clone(),
        language_id: language_id.to_string(),
        segments,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train_speakers: usize,
    pub train_utts_per_speaker: usize,
    pub n_eval_speakers: usize,
    pub eval_utts_per_language: usize,
    pub n_phones: usize,
    pub train_language: String,
    pub eval_languages: (String, String),
    pub train_duration_s: (f64, f64),
    pub eval_duration_s: (f64, f64),
    pub speakers: SpeakerRanges,
    pub synth: SynthParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train_speakers: 200,
            train_utts_per_speaker: 20,
            n_eval_speakers: 40,
            eval_utts_per_language: 10,
            n_phones: 48,
            train_language: "E".into(),
            eval_languages: ("A".into(), "B".into()),
            train_duration_s: (2.0, 3.0),
            eval_duration_s: (2.0, 3.0),
            speakers: SpeakerRanges::default(),
            synth: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub path: String,
    pub duration_s: f64,
    pub label_starts: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub train_language: String,
    pub eval_languages: (String, String),
    pub records: Vec<CorpusRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const PHONES_FILE: &str = "phones.tsv";

impl CorpusManifest {
    pub fn train(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.language_id == self.train_language)
    }

    pub fn eval(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.language_id != self.train_language)
    }

    pub fn speakers(&self, language: &str) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().filter(|r| r.language_id == language).map(|r| r.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn record(&self, utt: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.utterance_id == utt)
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.utterance_id, r.speaker_id, r.language_id, r.path, r.duration_s));
        }
        s
    }

    pub fn phones_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let labels: Vec<String> = r.label_starts.iter().map(|(f, p)| format!("{f}:{p}")).collect();
            s.push_str(&format!("{}\t{}\n", r.utterance_id, labels.join(",")));
        }
        s
    }

    /// Parse `manifest.tsv` and `phones.tsv` from `root`.
    pub fn read(root: &Path, train_language: &str, eval_languages: (String, String)) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| crate::fsutil::missing(&mpath, e))?;
        let ppath = root.join(PHONES_FILE);
        let phones = std::fs::read_to_string(&ppath).map_err(|e| crate::fsutil::missing(&ppath, e))?;
        let mut labels = std::collections::HashMap::new();
        for (i, line) in phones.lines().enumerate() {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format { offset: i as u64, msg: format!("{PHONES_FILE} line {}: no tab", i + 1) })?;
            let mut v = Vec::new();
            for item in rest.split(',').filter(|s| !s.is_empty()) {
                let (f, p) = item.split_once(':').ok_or_else(|| Error::Format {
                    offset: i as u64,
                    msg: format!("{PHONES_FILE} line {}: bad label {item:?}", i + 1),
                })?;
                let parse = |s: &str| {
                    s.parse::<u32>().map_err(|_| Error::Format { offset: i as u64, msg: format!("{PHONES_FILE} line {}: bad number {s:?}", i + 1) })
                };
                v.push((parse(f)?, parse(p)?));
            }
            labels.insert(id.to_string(), v);
        }
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format { offset: i as u64, msg: format!("{MANIFEST_FILE} line {}: expected 5 fields", i + 1) });
            }
            let duration_s = f[4]
                .parse()
                .map_err(|_| Error::Format { offset: i as u64, msg: format!("{MANIFEST_FILE} line {}: bad duration", i + 1) })?;
            records.push(CorpusRecord {
                utterance_id: f[0].into(),
                speaker_id: f[1].into(),
                language_id: f[2].into(),
                path: f[3].into(),
                duration_s,
                label_starts: labels.remove(f[0]).unwrap_or_default(),
            });
        }
        Ok(CorpusManifest { root: root.to_path_buf(), train_language: train_language.into(), eval_languages, records })
    }

    pub fn load_utterance(&self, r: &CorpusRecord) -> Result<Vec<i16>> {
        read_wav(&self.root.join(&r.path))
    }
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut buf = std::io::Cursor::new(Vec::with_capacity(44 + samples.len() * 2));
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(wav_err)?;
        let mut w16 = w.get_i16_writer(samples.len() as u32);
        for &s in samples {
            w16.write_sample(s);
        }
        w16.flush().map_err(wav_err)?;
        w.finalize().map_err(wav_err)?;
    }
    crate::fsutil::write_atomic(path, &buf.into_inner())
}

pub fn read_wav(path: &Path) -> Result<Vec<i16>> {
    let mut r = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => crate::fsutil::missing(path, io),
        other => wav_err(other),
    })?;
    let spec = r.spec();
    if spec.sample_rate != SAMPLE_RATE || spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Format { offset: 0, msg: format!("{}: expected 8 kHz mono 16-bit PCM", path.display()) });
    }
    r.samples::<i16>().collect::<std::result::Result<Vec<_>, _>>().map_err(wav_err)
}

fn wav_err(e: hound::Error) -> Error {
    Error::Format { offset: 0, msg: format!("wav: {e}") }
}

struct Plan {
    id: String,
    speaker: usize,
    language: String,
    duration: f64,
}

/// Synthesize the whole corpus under `out_dir`: WAVs in `wav/`, plus the
/// manifest and phone-label files.
pub fn build_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    let c = config;
    if c.n_train_speakers == 0 || c.train_utts_per_speaker == 0 || c.n_eval_speakers == 0 || c.eval_utts_per_language == 0 {
        return Err(invalid!("build_corpus: speaker and utterance counts must be >= 1"));
    }
    let (la, lb) = (&c.eval_languages.0, &c.eval_languages.1);
    if la == lb || la == &c.train_language || lb == &c.train_language {
        return Err(invalid!("build_corpus: languages {}, {la}, {lb} must be distinct", c.train_language));
    }
    let inv_e = make_inventory(seed, &c.train_language, c.n_phones)?;
    let inv_a = make_inventory_excluding(seed, la, c.n_phones, &[&inv_e])?;
    let inv_b = make_inventory_excluding(seed, lb, c.n_phones, &[&inv_e, &inv_a])?;

    let mut speakers = Vec::new();
    let mut plans = Vec::new();
    let mut dur_rng = rng(derive_seed(seed, "durations"));
    for s in 0..c.n_train_speakers {
        let id = format!("t{:04}", s + 1);
        for u in 0..c.train_utts_per_speaker {
            let duration = dur_rng.random_range(c.train_duration_s.0..=c.train_duration_s.1);
            plans.push(Plan { id: format!("{id}-{}{:02}", c.train_language, u + 1), speaker: speakers.len(), language: c.train_language.clone(), duration });
        }
        speakers.push(sample_speaker_in(seed, &id, &c.speakers));
    }
    for s in 0..c.n_eval_speakers {
        let id = format!("v{:03}", s + 1);
        for lang in [la, lb] {
            for u in 0..c.eval_utts_per_language {
                let duration = dur_rng.random_range(c.eval_duration_s.0..=c.eval_duration_s.1);
                plans.push(Plan { id: format!("{id}-{lang}{:02}", u + 1), speaker: speakers.len(), language: lang.clone(), duration });
            }
        }
        speakers.push(sample_speaker_in(seed, &id, &c.speakers));
    }
    let inventory = |l: &str| if l == la { &inv_a } else if l == lb { &inv_b } else { &inv_e };

    std::fs::create_dir_all(out_dir.join("wav")).map_err(Error::Io)?;
    let records = plans
        .par_iter()
        .map(|p| {
            let inv = inventory(&p.language);
            let mut r = rng(derive_seed(seed, &format!("phones/{}", p.id)));
            let n = (p.duration * 1000.0 / 60.0).ceil() as usize + 2;
            let all: Vec<usize> = (0..inv.phones.len()).collect();
            let mut seq: Vec<usize> = Vec::with_capacity(n);
            while seq.len() < n {
                let ph = *all.choose(&mut r).unwrap();
                if seq.last() != Some(&ph) || all.len() == 1 {
                    seq.push(ph);
                }
            }
            let utt = synth_utterance(&p.id, &p.language, &speakers[p.speaker], inv, &seq, p.duration, derive_seed(seed, &p.id), &c.synth)?;
            let path = format!("wav/{}.wav", p.id);
            write_wav(&out_dir.join(&path), &utt.samples)?;
            Ok(CorpusRecord {
                utterance_id: p.id.clone(),
                speaker_id: utt.speaker_id.clone(),
                language_id: p.language.clone(),
                path,
                duration_s: utt.duration_s(),
                label_starts: utt.label_starts(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        train_language: c.train_language.clone(),
        eval_languages: c.eval_languages.clone(),
        records,
    };
    crate::fsutil::write_atomic(&out_dir.join(MANIFEST_FILE), manifest.manifest_text().as_bytes())?;
    crate::fsutil::write_atomic(&out_dir.join(PHONES_FILE), manifest.phones_text().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_counts_and_determinism() {
        assert_eq!(make_inventory(7, "A", 1).unwrap().phones.len(), 1);
        assert!(make_inventory(7, "A", 0).is_err());
        let a = make_inventory(7, "A", 10).unwrap();
        assert_eq!(a, make_inventory(7, "A", 10).unwrap());
        assert!(a.phones.iter().all(|p| p.envelope.iter().all(|g| g.is_finite() && *g >= 0.0)));
    }

    #[test]
    fn cross_inventory_distance_above_floor() {
        let a = make_inventory(7, "A", 10).unwrap();
        let b = make_inventory_excluding(7, "B", 10, &[&a]).unwrap();
        let mut min = f64::INFINITY;
        for p in &a.phones {
            for q in &b.phones {
                let d: f64 = p.envelope.iter().zip(&q.envelope).map(|(x, y)| (to_db(*x) - to_db(*y)).powi(2)).sum();
                min = min.min((d / N_BANDS as f64).sqrt());
            }
        }
        assert!(min > ENVELOPE_FLOOR_DB, "min distance {min}");
    }

    #[test]
    fn speakers() {
        assert_eq!(sample_speaker(3, "s1"), sample_speaker(3, "s1"));
        let ps: Vec<SpeakerProfile> = (0..100).map(|i| sample_speaker(3, &format!("s{i}"))).collect();
        assert!(ps.iter().all(|p| (70.0..=300.0).contains(&p.pitch_hz)));
        let mut pairs: Vec<(u64, u64)> = ps.iter().map(|p| (p.pitch_hz.to_bits(), p.formant_shift.to_bits())).collect();
        pairs.sort();
        pairs.dedup();
        assert!(pairs.len() >= 99);
    }

    fn render(spk: &SpeakerProfile, seed: u64) -> Utterance {
        let inv = make_inventory(1, "A", 12).unwrap();
        let seq: Vec<usize> = (0..12).collect();
        synth_utterance("u", "A", spk, &inv, &seq, 2.5, seed, &SynthParams::default()).unwrap()
    }

    #[test]
    fn utterance_duration_and_zero_gain() {
        let inv = make_inventory(1, "A", 12).unwrap();
        let mut spk = sample_speaker(1, "s");
        let u = render(&spk, 9);
        assert!((u.duration_s() - 2.5).abs() <= inv.max_mean_duration_ms() / 1000.0);
        assert_eq!(u, render(&spk, 9));
        assert!(u.samples.iter().any(|&s| s != 0));
        spk.gain = 0.0;
        assert!(render(&spk, 9).samples.iter().all(|&s| s == 0));
        let err = synth_utterance("u", "A", &spk, &inv, &[12], 1.0, 0, &SynthParams::default());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    /// Long-term average spectrum in dB over 32 bins, mean removed.
    fn ltas(u: &Utterance) -> Vec<f64> {
        let x = u.samples_f64();
        let mut acc = vec![0.0; 32];
        for fr in x.chunks_exact(64) {
            for (k, a) in acc.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in fr.iter().enumerate() {
                    let ph = 2.0 * PI * (k as f64 + 0.5) * n as f64 / 64.0;
                    re += v * ph.cos();
                    im -= v * ph.sin();
                }
                *a += re * re + im * im;
            }
        }
        let db: Vec<f64> = acc.iter().map(|p| 10.0 * (p + 1e-12).log10()).collect();
        let m = db.iter().sum::<f64>() / 32.0;
        db.iter().map(|v| v - m).collect()
    }

    #[test]
    fn speakers_differ_in_spectrum() {
        let base = SpeakerProfile { speaker_id: "a".into(), pitch_hz: 120.0, formant_shift: 1.0, spectral_tilt_db_per_octave: 0.0, gain: 0.8 };
        let other = SpeakerProfile { speaker_id: "b".into(), pitch_hz: 120.0, formant_shift: 1.12, spectral_tilt_db_per_octave: -2.0, gain: 0.8 };
        let (la, lb) = (ltas(&render(&base, 5)), ltas(&render(&other, 5)));
        let dist = (la.iter().zip(&lb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 32.0).sqrt();
        // spread of the tilt difference alone over the analysed band
        let curve: Vec<f64> = (0..32).map(|k| -2.0 * (((k as f64 + 0.5) * 125.0).max(50.0) / 500.0).log2()).collect();
        let cm = curve.iter().sum::<f64>() / 32.0;
        let floor = (curve.iter().map(|c| (c - cm).powi(2)).sum::<f64>() / 32.0).sqrt() * 0.5;
        assert!(dist > floor, "ltas distance {dist} <= {floor}");
    }

    #[test]
    fn labels_follow_segments() {
        let u = render(&sample_speaker(2, "s"), 3);
        let starts = u.label_starts();
        let n = frame_count(u.samples.len());
        let labels = expand_labels(&starts, n);
        for (t, &l) in labels.iter().enumerate() {
            let c = t * FRAME_SHIFT + FRAME_LENGTH / 2;
            let seg = u.segments.iter().find(|s| c >= s.start_sample && c < s.start_sample + s.n_samples).unwrap();
            assert_eq!(l as usize, seg.phone);
        }
    }
}
