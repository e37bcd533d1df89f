//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    IntList,
    StrList,
}

pub struct KeyDef {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub doc: &'static str,
}

const INHERIT: &str = "";

macro_rules! keys {
    ($($k:literal, $d:literal, $kind:ident, $doc:literal;)*) => {
        pub const KEYS: &[KeyDef] = &[$(KeyDef { key: $k, default: $d, kind: Kind::$kind, doc: $doc }),*];
    };
}

keys! {
    "run.seed", "1", Int, "base seed; stage seeds left empty inherit it";
    "corpus.seed", "", Int, "corpus synthesis seed";
    "corpus.train_language", "E", Str, "language of the training set";
    "corpus.eval_languages", "A,B", StrList, "the two evaluation languages";
    "corpus.train_speakers", "200", Int, "training speakers";
    "corpus.train_utts", "20", Int, "utterances per training speaker";
    "corpus.eval_speakers", "40", Int, "evaluation speakers";
    "corpus.eval_utts", "10", Int, "utterances per evaluation speaker and language";
    "corpus.phones", "48", Int, "phones per language";
    "corpus.train_min_duration", "2.0", Float, "shortest training utterance (s)";
    "corpus.train_max_duration", "3.0", Float, "longest training utterance (s)";
    "corpus.eval_min_duration", "2.0", Float, "shortest evaluation utterance (s)";
    "corpus.eval_max_duration", "3.0", Float, "longest evaluation utterance (s)";
    "corpus.session_pitch_sd", "0.04", Float, "log-normal session pitch spread";
    "corpus.session_warp_sd", "0.015", Float, "session formant-warp spread";
    "corpus.session_tilt_sd", "0.5", Float, "session spectral-tilt spread (dB/octave)";
    "corpus.duration_jitter", "0.25", Float, "relative phone-duration jitter";
    "corpus.pitch_wobble", "0.03", Float, "depth of in-utterance pitch wobble";
    "frontend.fbank_bins", "40", Int, "Mel filterbank channels for the networks";
    "asr.seed", "", Int, "phone classifier seed";
    "asr.hidden", "512", Int, "phone classifier hidden width before p-norm";
    "asr.rank", "40", Int, "linguistic factor dimension";
    "asr.epochs", "3", Int, "phone classifier epochs";
    "asr.learning_rate", "0.01", Float, "phone classifier learning rate";
    "asr.chunk_frames", "32", Int, "labelled frames per chunk";
    "asr.batch_chunks", "16", Int, "chunks per minibatch";
    "asr.train_utts", "5", Int, "utterances per training speaker used (0 = all)";
    "ctdnn.seed", "", Int, "CT-DNN initialisation and shuffling seed";
    "ctdnn.conv_channels", "16,32", IntList, "channels of the two convolutional layers";
    "ctdnn.td_width", "256", Int, "time-delay layer width before p-norm";
    "ctdnn.bottleneck", "512", Int, "bottleneck width";
    "ctdnn.feature_dim", "400", Int, "feature (d-vector) layer width";
    "ctdnn.factor_join", "bottleneck", Str, "where the linguistic factor enters: bottleneck or conv-output";
    "ctdnn.epochs", "3", Int, "training epochs";
    "ctdnn.learning_rate", "0.03", Float, "initial learning rate";
    "ctdnn.momentum", "0.9", Float, "momentum";
    "ctdnn.chunk_frames", "64", Int, "labelled frames per chunk";
    "ctdnn.chunks_per_utt", "1", Int, "chunks drawn per utterance per epoch";
    "ctdnn.batch_chunks", "16", Int, "chunks per minibatch";
    "ctdnn.valid_utts", "1", Int, "held-out utterances per training speaker";
    "ivector.seed", "", Int, "UBM and T-matrix seed";
    "ivector.components", "64", Int, "UBM components";
    "ivector.ubm_iterations", "10", Int, "UBM EM iterations";
    "ivector.kmeans_iterations", "3", Int, "k-means iterations before EM";
    "ivector.frame_stride", "4", Int, "UBM training frame subsampling";
    "ivector.tv_rank", "100", Int, "i-vector dimension";
    "ivector.tv_iterations", "10", Int, "T-matrix EM iterations";
    "backend.lda_dim", "150", Int, "LDA dimension (clamped to the data)";
    "backend.plda_iterations", "10", Int, "PLDA EM iterations";
    "backend.train_utts", "10", Int, "utterances per training speaker for back-ends (0 = all)";
}

pub fn key_def(key: &str) -> Option<&'static KeyDef> {
    KEYS.iter().find(|k| k.key == key)
}

fn check_value(def: &KeyDef, v: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| Err(format!("{}: expected {what}, got {v:?}", def.key));
    if v.is_empty() {
        return if def.default == INHERIT { Ok(()) } else { bad("a value") };
    }
    match def.kind {
        Kind::Int => v.parse::<u64>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Kind::Float => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => bad("a finite number"),
        },
        Kind::Bool => v.parse::<bool>().map(|_| ()).or_else(|_| bad("true or false")),
        Kind::Str => Ok(()),
        Kind::IntList => {
            if v.split(',').all(|s| s.trim().parse::<u64>().is_ok()) {
                Ok(())
            } else {
                bad("a comma-separated integer list")
            }
        }
        Kind::StrList => {
            if v.split(',').all(|s| !s.trim().is_empty()) {
                Ok(())
            } else {
                bad("a comma-separated list")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeMap<String, bool>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig { values: BTreeMap::new(), explicit: BTreeMap::new() };
        for k in KEYS {
            c.values.insert(k.key.into(), k.default.into());
        }
        c.materialize();
        c
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig { values: KEYS.iter().map(|k| (k.key.to_string(), k.default.to_string())).collect(), explicit: BTreeMap::new() };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                section = s.strip_suffix(']').ok_or_else(|| Error::Config { line: Some(line_no), msg: format!("malformed section header {line:?}") })?.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config { line: Some(line_no), msg: format!("expected key = value, got {line:?}") })?;
            let k = k.trim();
            let key = if k.contains('.') || section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            c.set_raw(&key, v.trim(), Some(line_no))?;
        }
        c.materialize();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config { line: None, msg: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    fn set_raw(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let def = key_def(key).ok_or_else(|| Error::Config { line, msg: format!("unknown key {key:?}") })?;
        check_value(def, value).map_err(|msg| Error::Config { line, msg })?;
        self.values.insert(key.into(), value.into());
        self.explicit.insert(key.into(), true);
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config { line: None, msg: format!("override {assignment:?} is not key=value") })?;
        let k = k.trim();
        if key_def(k).is_some_and(|d| d.default == INHERIT) || k == "run.seed" {
            // re-derive inherited seeds from the new base
            self.unmaterialize();
        }
        self.set_raw(k, v.trim(), None)?;
        self.materialize();
        Ok(())
    }

    fn unmaterialize(&mut self) {
        for k in KEYS.iter().filter(|k| k.default == INHERIT) {
            if !self.explicit.get(k.key).copied().unwrap_or(false) {
                self.values.insert(k.key.into(), INHERIT.into());
            }
        }
    }

    fn materialize(&mut self) {
        let base = self.values["run.seed"].clone();
        for k in KEYS.iter().filter(|k| k.default == INHERIT) {
            if self.values[k.key].is_empty() {
                self.values.insert(k.key.into(), base.clone());
            }
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> T {
        self.get(key).parse().unwrap_or_else(|_| panic!("config key {key} was validated on load"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    pub fn str_list(&self, key: &str) -> Vec<String> {
        self.get(key).split(',').map(|s| s.trim().to_string()).collect()
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        self.get(key).split(',').map(|s| s.trim().parse().expect("validated")).collect()
    }

    pub fn is_default(&self, key: &str) -> bool {
        !self.explicit.get(key).copied().unwrap_or(false)
    }

    /// Canonical `key = value` text over every materialised key.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())[..12].to_string()
    }

    pub fn large_scale(&self) -> bool {
        self.usize("corpus.train_speakers") >= 1000 || self.usize("ivector.components") >= 1024 || self.usize("ivector.tv_rank") >= 400
    }

    /// Every materialised value, marking defaults, plus the scale flag.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let w = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
        for k in KEYS {
            let tag = if self.is_default(k.key) { "default" } else { "set" };
            let _ = writeln!(s, "{:<w$} = {:<12} # {tag}; {}", k.key, self.get(k.key), k.doc);
        }
        let _ = writeln!(s, "# config hash {}", self.hash());
        if self.large_scale() {
            s += "# large-scale\n";
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config { line: None, msg });
        let langs = self.str_list("corpus.eval_languages");
        if langs.len() != 2 || langs[0] == langs[1] {
            return cfg_err(format!("corpus.eval_languages needs two distinct languages, got {langs:?}"));
        }
        if langs.contains(&self.get("corpus.train_language").to_string()) {
            return cfg_err("corpus.train_language must differ from the evaluation languages".into());
        }
        if self.usize_list("ctdnn.conv_channels").len() != 2 {
            return cfg_err("ctdnn.conv_channels needs two values".into());
        }
        if !matches!(self.get("ctdnn.factor_join"), "bottleneck" | "conv-output") {
            return cfg_err(format!("ctdnn.factor_join: expected bottleneck or conv-output, got {:?}", self.get("ctdnn.factor_join")));
        }
        for (lo, hi) in [("corpus.train_min_duration", "corpus.train_max_duration"), ("corpus.eval_min_duration", "corpus.eval_max_duration")] {
            if !(self.f64(lo) > 0.0 && self.f64(lo) <= self.f64(hi)) {
                return cfg_err(format!("{lo} must be positive and not above {hi}"));
            }
        }
        if self.usize("ctdnn.valid_utts") >= self.usize("corpus.train_utts") {
            return cfg_err("ctdnn.valid_utts must be below corpus.train_utts".into());
        }
        Ok(())
    }
}
