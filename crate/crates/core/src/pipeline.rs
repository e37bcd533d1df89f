//! Stage orchestration over one run directory, with a checksum manifest
//! that turns unchanged stages into no-ops.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::asr::{self, LinguisticFactorExtractor, PhoneClassifier, PhoneClassifierConfig};
use crate::backend::{self, center_lengthnorm, mean_vector, LdaProjection, PldaModel};
use crate::config::ExperimentConfig;
use crate::ctdnn::{self, CTDNNConfig, CtdnnExample, CtdnnModel, FactorJoin, Variant};
use crate::embedding::{read_embeddings, write_embeddings, Embedding};
use crate::error::{Error, Result};
use crate::evalkit::{self, compute_eer, embedding_map, Condition, Cosine, ResultsGrid, ScoreSet, Scorer, TrialList};
use crate::frontend::{self, add_deltas, cmvn_mat, read_archive, write_archive, FeatureMatrix, Frontend};
use crate::fsutil::write_atomic;
use crate::ivector::{self, TMatrix, TvConfig, Ubm, UbmConfig};
use crate::nn::{self, Mat, TrainConfig, TrainState};
use crate::synth::{self, CorpusConfig, CorpusManifest, CorpusRecord, SpeakerRanges, SynthParams};
use crate::util::{derive_seed, sha256_hex};

pub const STAGES: [&str; 11] = [
    "synth",
    "feats",
    "train-asr",
    "train-ctdnn",
    "train-ubm",
    "train-tv",
    "extract",
    "backend-train",
    "score",
    "eval",
    "report",
];

pub const SYSTEMS: [&str; 3] = ["i-vector", "d-vector", "phone-aware"];
pub const METRICS: [&str; 3] = ["Cosine", "LDA", "PLDA"];
pub const MANIFEST: &str = "run_manifest.json";
pub const REPORT: &str = "report.txt";
pub const RESULTS_TSV: &str = "results/results.tsv";
pub const RESULTS_TXT: &str = "results/results.txt";

const CORPUS: &str = "corpus";
const FBANK_TRAIN: &str = "feats/fbank-train.farc";
const FBANK_EVAL: &str = "feats/fbank-eval.farc";
const MFCC_TRAIN: &str = "feats/mfcc-train.farc";
const MFCC_EVAL: &str = "feats/mfcc-eval.farc";
const ASR_MODEL: &str = "models/asr.nnck";
const LING_MODEL: &str = "models/linguistic.nnck";
const CTDNN_BLIND: &str = "models/ctdnn-blind.nnck";
const CTDNN_AWARE: &str = "models/ctdnn-aware.nnck";
const UBM_MODEL: &str = "models/ubm.nnck";
const TV_MODEL: &str = "models/tv.nnck";

fn emb_path(system: &str, part: &str) -> String {
    format!("emb/{system}-{part}.farc")
}

fn backend_path(system: &str) -> String {
    format!("models/backend-{system}.nnck")
}

fn cond_file(c: &Condition) -> String {
    c.name().replace('/', "_x_")
}

fn trials_path(c: &Condition) -> String {
    format!("trials/{}.tsv", cond_file(c))
}

fn score_path(system: &str, metric: &str, c: &Condition) -> String {
    format!("scores/{system}.{}.{}.tsv", metric.to_lowercase(), cond_file(c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// sha256 of a file, or of the sorted `path digest` listing of a directory.
pub fn digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let listing: Vec<String> = files.par_iter().map(|rel| Ok(format!("{rel} {}\n", digest(&path.join(rel))?))).collect::<Result<_>>()?;
        Ok(sha256_hex(listing.concat().as_bytes()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| crate::fsutil::missing(path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(base, &p, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("walk stays under base").to_string_lossy().into_owned());
        }
    }
    Ok(())
}

fn link_tree(src: &Path, dst: &Path) -> Result<()> {
    if src.is_dir() {
        std::fs::create_dir_all(dst)?;
        for e in std::fs::read_dir(src)? {
            let e = e?;
            link_tree(&e.path(), &dst.join(e.file_name()))?;
        }
        return Ok(());
    }
    if let Some(p) = dst.parent() {
        std::fs::create_dir_all(p)?;
    }
    if dst.exists() {
        std::fs::remove_file(dst)?;
    }
    if std::fs::hard_link(src, dst).is_err() {
        std::fs::copy(src, dst).map_err(|e| crate::fsutil::missing(src, e))?;
    }
    Ok(())
}

pub fn run_root(cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf).or_else(|| std::env::var_os("XLDV_RUN_DIR").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

struct StageSpec {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Pipeline {
    /// Opens (creating if needed) `root/<config hash>`.
    pub fn open(cfg: ExperimentConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let dir = root.join(cfg.hash());
        std::fs::create_dir_all(&dir)?;
        let cfg_path = dir.join("config.ini");
        if !cfg_path.exists() {
            write_atomic(&cfg_path, cfg.canonical().as_bytes())?;
        }
        let mpath = dir.join(MANIFEST);
        let manifest = match std::fs::read(&mpath) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Format { offset: e.column() as u64, msg: format!("{}: {e}", mpath.display()) })?,
            Err(_) => RunManifest { config_hash: cfg.hash(), tool_version: env!("CARGO_PKG_VERSION").into(), stages: Vec::new() },
        };
        Ok(Pipeline { cfg, dir, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn eval_languages(&self) -> (String, String) {
        let l = self.cfg.str_list("corpus.eval_languages");
        (l[0].clone(), l[1].clone())
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let (a, b) = self.eval_languages();
        Condition::standard(&a, &b)
    }

    fn spec(&self, stage: &str) -> Result<StageSpec> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let conds = self.conditions();
        let (inputs, outputs) = match stage {
            "synth" => (vec![], s(&[CORPUS])),
            "feats" => (s(&[CORPUS]), s(&[FBANK_TRAIN, FBANK_EVAL, MFCC_TRAIN, MFCC_EVAL])),
            "train-asr" => (s(&["corpus/manifest.tsv", FBANK_TRAIN]), s(&[ASR_MODEL, LING_MODEL])),
            "train-ctdnn" => (s(&[FBANK_TRAIN, ASR_MODEL, LING_MODEL]), s(&[CTDNN_BLIND, CTDNN_AWARE])),
            "train-ubm" => (s(&[MFCC_TRAIN]), s(&[UBM_MODEL])),
            "train-tv" => (s(&[MFCC_TRAIN, UBM_MODEL]), s(&[TV_MODEL])),
            "extract" => (
                s(&[FBANK_TRAIN, FBANK_EVAL, MFCC_TRAIN, MFCC_EVAL, ASR_MODEL, LING_MODEL, CTDNN_BLIND, CTDNN_AWARE, UBM_MODEL, TV_MODEL]),
                SYSTEMS.iter().flat_map(|sys| [emb_path(sys, "train"), emb_path(sys, "eval")]).collect(),
            ),
            "backend-train" => (SYSTEMS.iter().map(|s| emb_path(s, "train")).collect(), SYSTEMS.iter().map(|s| backend_path(s)).collect()),
            "score" => {
                let mut i = s(&["corpus/manifest.tsv"]);
                i.extend(SYSTEMS.iter().flat_map(|s| [emb_path(s, "eval"), backend_path(s)]));
                let mut o: Vec<String> = conds.iter().map(trials_path).collect();
                o.extend(self.score_files());
                (i, o)
            }
            "eval" => {
                let mut i: Vec<String> = conds.iter().map(trials_path).collect();
                i.extend(self.score_files());
                (i, s(&[RESULTS_TSV, RESULTS_TXT]))
            }
            "report" => {
                let mut i = s(&[RESULTS_TSV, ASR_MODEL, CTDNN_BLIND, CTDNN_AWARE, UBM_MODEL, TV_MODEL]);
                i.extend(SYSTEMS.iter().map(|s| backend_path(s)));
                (i, s(&[REPORT]))
            }
            other => return Err(crate::error::invalid!("unknown stage {other:?} (expected one of {})", STAGES.join(", "))),
        };
        Ok(StageSpec { inputs, outputs })
    }

    fn score_files(&self) -> Vec<String> {
        let mut v = Vec::new();
        for sys in SYSTEMS {
            for m in METRICS {
                for c in self.conditions() {
                    v.push(score_path(sys, m, &c));
                }
            }
        }
        v
    }

    fn digests(&self, paths: &[String]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| {
                let full = self.path(p);
                if !full.exists() {
                    return Err(Error::Missing(full.display().to_string()));
                }
                Ok((p.clone(), digest(&full)?))
            })
            .collect()
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }

    /// Runs a stage unless its recorded inputs and outputs still match.
    pub fn run(&mut self, stage: &str) -> Result<Outcome> {
        let spec = self.spec(stage)?;
        let inputs = self.digests(&spec.inputs)?;
        if let Some(rec) = self.manifest.stage(stage) {
            if rec.inputs == inputs && spec.outputs.iter().all(|o| self.path(o).exists()) {
                if let Ok(out) = self.digests(&spec.outputs) {
                    if out == rec.outputs {
                        log::info!("{stage}: up to date");
                        return Ok(Outcome::Skipped);
                    }
                }
            }
        }
        log::info!("{stage}: running");
        let t0 = Instant::now();
        match stage {
            "synth" => self.synth()?,
            "feats" => self.feats()?,
            "train-asr" => self.train_asr()?,
            "train-ctdnn" => self.train_ctdnn()?,
            "train-ubm" => self.train_ubm()?,
            "train-tv" => self.train_tv()?,
            "extract" => self.extract()?,
            "backend-train" => self.backend_train()?,
            "score" => self.score()?,
            "eval" => self.eval()?,
            "report" => self.report()?,
            _ => unreachable!("spec() rejects unknown stages"),
        }
        let outputs = self.digests(&spec.outputs)?;
        let rec = StageRecord { name: stage.into(), inputs, outputs, wall_s: t0.elapsed().as_secs_f64() };
        log::info!("{stage}: done in {:.1} s", rec.wall_s);
        self.manifest.stages.retain(|s| s.name != stage);
        self.manifest.stages.push(rec);
        self.save_manifest()?;
        Ok(Outcome::Ran)
    }

    /// Hard-links (or copies) the outputs of `stages` from another run and
    /// takes over its stage records, so those stages count as up to date
    /// here. Only sound when the two configurations agree on everything
    /// those stages read.
    pub fn adopt(&mut self, from: &Pipeline, stages: &[&str]) -> Result<()> {
        for &stage in stages {
            let rec = from.manifest.stage(stage).ok_or_else(|| Error::Missing(format!("{}: no record of {stage}", from.dir.display())))?.clone();
            for rel in rec.outputs.keys() {
                link_tree(&from.path(rel), &self.path(rel))?;
            }
            self.manifest.stages.retain(|s| s.name != stage);
            self.manifest.stages.push(rec);
        }
        self.save_manifest()
    }

    pub fn run_all(&mut self) -> Result<Vec<(String, Outcome)>> {
        STAGES.iter().map(|s| Ok((s.to_string(), self.run(s)?))).collect()
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.cfg;
        CorpusConfig {
            n_train_speakers: c.usize("corpus.train_speakers"),
            train_utts_per_speaker: c.usize("corpus.train_utts"),
            n_eval_speakers: c.usize("corpus.eval_speakers"),
            eval_utts_per_language: c.usize("corpus.eval_utts"),
            n_phones: c.usize("corpus.phones"),
            train_language: c.get("corpus.train_language").into(),
            eval_languages: self.eval_languages(),
            train_duration_s: (c.f64("corpus.train_min_duration"), c.f64("corpus.train_max_duration")),
            eval_duration_s: (c.f64("corpus.eval_min_duration"), c.f64("corpus.eval_max_duration")),
            speakers: SpeakerRanges::default(),
            synth: SynthParams {
                session_pitch_sd: c.f64("corpus.session_pitch_sd"),
                session_warp_sd: c.f64("corpus.session_warp_sd"),
                session_tilt_sd: c.f64("corpus.session_tilt_sd"),
                duration_jitter: c.f64("corpus.duration_jitter"),
                pitch_wobble: c.f64("corpus.pitch_wobble"),
            },
        }
    }

    fn corpus(&self) -> Result<CorpusManifest> {
        CorpusManifest::read(&self.path(CORPUS), self.cfg.get("corpus.train_language"), self.eval_languages())
    }

    fn synth(&self) -> Result<()> {
        let out = self.path(CORPUS);
        if out.exists() {
            std::fs::remove_dir_all(&out)?;
        }
        synth::build_corpus(&self.corpus_config(), self.cfg.u64("corpus.seed"), &out)?;
        Ok(())
    }

    fn feats(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let bins = self.cfg.usize("frontend.fbank_bins");
        let fb = Frontend::new(bins)?;
        let mf = Frontend::new(frontend::MFCC_FILTERS)?;
        let train: Vec<&CorpusRecord> = corpus.train().collect();
        let eval: Vec<&CorpusRecord> = corpus.eval().collect();
        for (set, fb_out, mf_out) in [(&train, FBANK_TRAIN, MFCC_TRAIN), (&eval, FBANK_EVAL, MFCC_EVAL)] {
            let (fbank, mfcc): (Vec<FeatureMatrix>, Vec<FeatureMatrix>) = set
                .par_iter()
                .map(|r| {
                    let s = corpus.load_utterance(r)?;
                    let mk = |m: Mat<f64>| FeatureMatrix::new(&r.utterance_id, &r.speaker_id, &r.language_id, m);
                    let f = mk(cmvn_mat(&fb.fbank(&s)?)?);
                    let m = add_deltas(&mk(cmvn_mat(&mf.mfcc(&s, frontend::MFCC_DIM)?)?))?;
                    Ok((f, m))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            std::fs::create_dir_all(self.path("feats"))?;
            write_archive(&self.path(fb_out), fbank.iter())?;
            write_archive(&self.path(mf_out), mfcc.iter())?;
        }
        Ok(())
    }

    fn read_feats(&self, rel: &str) -> Result<Vec<FeatureMatrix>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Missing(p.display().to_string()));
        }
        read_archive(&p)
    }

    fn train_config(&self, section: &str, seed: u64) -> TrainConfig {
        let c = &self.cfg;
        let key = |k: &str| format!("{section}.{k}");
        TrainConfig {
            learning_rate: c.f64(&key("learning_rate")),
            momentum: if section == "ctdnn" { c.f64("ctdnn.momentum") } else { 0.9 },
            batch_chunks: c.usize(&key("batch_chunks")),
            chunk_frames: c.usize(&key("chunk_frames")),
            chunks_per_utt: if section == "ctdnn" { c.usize("ctdnn.chunks_per_utt") } else { 1 },
            max_epochs: c.usize(&key("epochs")),
            seed,
            min_improvement: 0.01,
            patience: 3,
        }
    }

    fn train_asr(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let feats = self.read_feats(FBANK_TRAIN)?;
        let per = self.cfg.usize("asr.train_utts");
        let chosen = per_speaker(&feats, per, 0);
        let mut labelled = Vec::new();
        for f in chosen {
            let r = corpus.record(&f.utterance_id).ok_or_else(|| Error::State(format!("{} is not in the corpus manifest", f.utterance_id)))?;
            labelled.push((f, synth::expand_labels(&r.label_starts, f.frames())));
        }
        let n_valid = (labelled.len() / 20).max(1).min(labelled.len() - 1);
        let pairs: Vec<(&FeatureMatrix, &[u32])> = labelled.iter().map(|(f, l)| (*f, l.as_slice())).collect();
        let (valid, train) = pairs.split_at(n_valid);
        let seed = self.cfg.u64("asr.seed");
        let pc = PhoneClassifierConfig { feat_dim: self.cfg.usize("frontend.fbank_bins"), hidden: self.cfg.usize("asr.hidden"), n_phones: self.cfg.usize("corpus.phones"), ..Default::default() };
        let mut clf = PhoneClassifier::build(&pc, derive_seed(seed, "asr-init"))?;
        let mut state = TrainState::new(self.train_config("asr", derive_seed(seed, "asr-train")))?;
        asr::train_phone_classifier(&mut clf, train, valid, &mut state)?;
        let ex = asr::svd_decompose(&clf, self.cfg.usize("asr.rank"))?;
        std::fs::create_dir_all(self.path("models"))?;
        clf.save(&self.path(ASR_MODEL))?;
        ex.save(&self.path(LING_MODEL))?;
        Ok(())
    }

    fn load_asr(&self) -> Result<(PhoneClassifier, LinguisticFactorExtractor)> {
        Ok((PhoneClassifier::load(&self.path(ASR_MODEL))?, LinguisticFactorExtractor::load(&self.path(LING_MODEL))?))
    }

    pub fn ctdnn_config(&self, n_speakers: usize) -> CTDNNConfig {
        let c = &self.cfg;
        let ch = c.usize_list("ctdnn.conv_channels");
        CTDNNConfig {
            feat_dim: c.usize("frontend.fbank_bins"),
            conv_channels: [ch[0], ch[1]],
            td_width: c.usize("ctdnn.td_width"),
            bottleneck: c.usize("ctdnn.bottleneck"),
            feature_dim: c.usize("ctdnn.feature_dim"),
            n_speakers,
            factor_join: if c.get("ctdnn.factor_join") == "conv-output" { FactorJoin::ConvOutput } else { FactorJoin::Bottleneck },
            ..Default::default()
        }
    }

    fn train_ctdnn(&self) -> Result<()> {
        let feats = self.read_feats(FBANK_TRAIN)?;
        let (clf, ex) = self.load_asr()?;
        let index = ctdnn::speaker_index(&feats);
        let speakers: Vec<String> = index.keys().cloned().collect();
        let n_valid = self.cfg.usize("ctdnn.valid_utts");
        let valid_ids: std::collections::HashSet<&str> = held_out(&feats, n_valid).into_iter().map(|f| f.utterance_id.as_str()).collect();
        let factors = factors(&clf, &ex, &feats)?;
        let seed = self.cfg.u64("ctdnn.seed");
        let cfg = self.ctdnn_config(speakers.len());
        for (variant, out) in [(Variant::PhoneBlind, CTDNN_BLIND), (Variant::PhoneAware, CTDNN_AWARE)] {
            let graph = match variant {
                Variant::PhoneBlind => ctdnn::build_phone_blind(&cfg, derive_seed(seed, "ctdnn-init"))?,
                Variant::PhoneAware => ctdnn::build_phone_aware(&cfg, ex.rank(), derive_seed(seed, "ctdnn-init"))?,
            };
            let mut model = CtdnnModel::new(variant, graph, speakers.clone())?;
            let examples: Vec<CtdnnExample<'_>> = feats
                .iter()
                .zip(&factors)
                .map(|(f, a)| CtdnnExample { feat: f, factor: (variant == Variant::PhoneAware).then_some(a), label: index[&f.speaker_id] })
                .collect();
            let (valid, train): (Vec<_>, Vec<_>) = examples.into_iter().partition(|e| valid_ids.contains(e.feat.utterance_id.as_str()));
            let mut state = TrainState::new(self.train_config("ctdnn", derive_seed(seed, "ctdnn-train")))?;
            ctdnn::train_ctdnn(&mut model, &train, &valid, &mut state)?;
            model.save(&self.path(out))?;
        }
        Ok(())
    }

    fn ubm_config(&self) -> UbmConfig {
        UbmConfig {
            components: self.cfg.usize("ivector.components"),
            iterations: self.cfg.usize("ivector.ubm_iterations"),
            kmeans_iterations: self.cfg.usize("ivector.kmeans_iterations"),
            frame_stride: self.cfg.usize("ivector.frame_stride"),
            seed: derive_seed(self.cfg.u64("ivector.seed"), "ubm"),
        }
    }

    fn train_ubm(&self) -> Result<()> {
        let feats = self.read_feats(MFCC_TRAIN)?;
        let cfg = self.ubm_config();
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let x = ivector::pool_frames(&refs, cfg.frame_stride)?;
        let (ubm, hist) = ivector::train_ubm(&x, &cfg)?;
        std::fs::create_dir_all(self.path("models"))?;
        save_with_history(&self.path(UBM_MODEL), ubm.section(), "ubm", &hist)
    }

    fn train_tv(&self) -> Result<()> {
        let feats = self.read_feats(MFCC_TRAIN)?;
        let ubm = Ubm::load(&self.path(UBM_MODEL))?;
        let stats = feats.par_iter().map(|f| ivector::accumulate_stats(&ubm, f)).collect::<Result<Vec<_>>>()?;
        let cfg = TvConfig { rank: self.cfg.usize("ivector.tv_rank"), iterations: self.cfg.usize("ivector.tv_iterations"), seed: derive_seed(self.cfg.u64("ivector.seed"), "tv") };
        let (tm, hist) = ivector::train_tmatrix(&ubm, &stats, &cfg)?;
        save_with_history(&self.path(TV_MODEL), tm.section(), "tv", &hist)
    }

    fn extract(&self) -> Result<()> {
        let per = self.cfg.usize("backend.train_utts");
        std::fs::create_dir_all(self.path("emb"))?;
        {
            let ubm = Ubm::load(&self.path(UBM_MODEL))?;
            let tm = TMatrix::load(&self.path(TV_MODEL))?;
            for (src, part) in [(MFCC_TRAIN, "train"), (MFCC_EVAL, "eval")] {
                let feats = self.read_feats(src)?;
                let chosen = if part == "train" { per_speaker(&feats, per, 0) } else { feats.iter().collect() };
                let stats = chosen.par_iter().map(|f| ivector::accumulate_stats(&ubm, f)).collect::<Result<Vec<_>>>()?;
                write_embeddings(&self.path(&emb_path("i-vector", part)), &ivector::extract_ivectors(&tm, &stats)?)?;
            }
        }
        let (clf, ex) = self.load_asr()?;
        let blind = CtdnnModel::load(&self.path(CTDNN_BLIND))?;
        let aware = CtdnnModel::load(&self.path(CTDNN_AWARE))?;
        for (src, part) in [(FBANK_TRAIN, "train"), (FBANK_EVAL, "eval")] {
            let feats = self.read_feats(src)?;
            let chosen: Vec<&FeatureMatrix> = if part == "train" { per_speaker(&feats, per, 0) } else { feats.iter().collect() };
            let (b, a): (Vec<Embedding>, Vec<Embedding>) = chosen
                .par_iter()
                .map(|f| {
                    let fac = asr::linguistic_factor(&ex, &clf, f)?;
                    Ok((ctdnn::utterance_dvector(&blind, f, None)?, ctdnn::utterance_dvector(&aware, f, Some(&fac))?))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            write_embeddings(&self.path(&emb_path("d-vector", part)), &b)?;
            write_embeddings(&self.path(&emb_path("phone-aware", part)), &a)?;
        }
        Ok(())
    }

    fn read_emb(&self, rel: &str) -> Result<Vec<Embedding>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Missing(p.display().to_string()));
        }
        read_embeddings(&p)
    }

    fn backend_train(&self) -> Result<()> {
        for sys in SYSTEMS {
            let train = self.read_emb(&emb_path(sys, "train"))?;
            let b = train_backend(&train, self.cfg.usize("backend.lda_dim"), self.cfg.usize("backend.plda_iterations"))?;
            b.save(&self.path(&backend_path(sys)), sys)?;
        }
        Ok(())
    }

    fn score(&self) -> Result<()> {
        let corpus = self.corpus()?;
        std::fs::create_dir_all(self.path("trials"))?;
        std::fs::create_dir_all(self.path("scores"))?;
        let lists: Vec<TrialList> = self.conditions().iter().map(|c| evalkit::make_trials(&corpus, c)).collect::<Result<_>>()?;
        for l in &lists {
            l.write(&self.path(&trials_path(&l.condition)))?;
        }
        for sys in SYSTEMS {
            let eval = self.read_emb(&emb_path(sys, "eval"))?;
            let b = Backend::load(&self.path(&backend_path(sys)))?;
            for m in METRICS {
                let (embs, scorer): (Vec<Embedding>, &dyn Scorer) = match m {
                    "Cosine" => (eval.clone(), &Cosine),
                    "LDA" => (b.lda.project_all(&eval)?, &Cosine),
                    _ => (center_lengthnorm(&eval, &b.center)?, &b.plda),
                };
                let map = embedding_map(embs);
                for l in &lists {
                    evalkit::score_trials(scorer, &map, l)?.write(&self.path(&score_path(sys, m, &l.condition)))?;
                }
            }
        }
        Ok(())
    }

    pub fn results_grid(&self) -> Result<ResultsGrid> {
        let conds = self.conditions();
        let mut grid = ResultsGrid::new(conds.iter().map(Condition::name).collect());
        let lists: Vec<TrialList> = conds.iter().map(|c| TrialList::read(&self.path(&trials_path(c)), c.clone())).collect::<Result<_>>()?;
        for sys in SYSTEMS {
            for m in METRICS {
                for l in &lists {
                    let set = ScoreSet::read(&self.path(&score_path(sys, m, &l.condition)), l)?;
                    grid.insert(sys, m, &l.condition.name(), compute_eer(&set)?);
                }
            }
        }
        Ok(grid)
    }

    fn eval(&self) -> Result<()> {
        let grid = self.results_grid()?;
        std::fs::create_dir_all(self.path("results"))?;
        write_atomic(&self.path(RESULTS_TSV), grid.to_tsv().as_bytes())?;
        write_atomic(&self.path(RESULTS_TXT), grid.to_aligned().as_bytes())
    }

    fn report(&self) -> Result<()> {
        let text = std::fs::read_to_string(self.path(RESULTS_TSV)).map_err(|e| crate::fsutil::missing(&self.path(RESULTS_TSV), e))?;
        let rows = evalkit::parse_results_tsv(&text)?;
        let mut grid = ResultsGrid::new(self.conditions().iter().map(Condition::name).collect());
        for (sys, m, vals) in &rows {
            for (c, v) in self.conditions().iter().zip(vals) {
                if let Some(v) = v {
                    grid.insert(sys, m, &c.name(), evalkit::EerResult { eer: v / 100.0, threshold: 0.0, n_target: 0, n_nontarget: 0 });
                }
            }
        }
        let mut r = String::new();
        let _ = writeln!(r, "Cross-lingual speaker verification, EER (%)\nconfig {}\n", self.cfg.hash());
        r += &grid.to_aligned();
        r += "\nTraining summary\n";
        let asr = PhoneClassifier::load(&self.path(ASR_MODEL))?;
        let _ = writeln!(r, "  phone classifier: {}", history_line(&asr.history));
        for (name, p) in [("phone-blind CT-DNN", CTDNN_BLIND), ("phone-aware CT-DNN", CTDNN_AWARE)] {
            let m = CtdnnModel::load(&self.path(p))?;
            let _ = writeln!(r, "  {name}: {}", history_line(&m.history));
        }
        for (name, p) in [("UBM", UBM_MODEL), ("T matrix", TV_MODEL)] {
            let h = em_history(&self.path(p))?;
            let _ = writeln!(r, "  {name} objective: {:.4} -> {:.4} over {} iterations", h.first().unwrap_or(&f64::NAN), h.last().unwrap_or(&f64::NAN), h.len().saturating_sub(1));
        }
        for sys in SYSTEMS {
            let b = Backend::load(&self.path(&backend_path(sys)))?;
            let _ = writeln!(r, "  {sys} back-end: LDA {} -> {}, PLDA log-likelihood {:.3} -> {:.3}", b.lda.dim_in(), b.lda.dim_out(), b.plda_history.first().unwrap_or(&f64::NAN), b.plda_history.last().unwrap_or(&f64::NAN));
        }
        r += "\nOrdering checks\n";
        for (label, ok) in ordering_checks(&grid, &self.conditions()) {
            let _ = writeln!(r, "  [{}] {label}", if ok { "yes" } else { "no" });
        }
        write_atomic(&self.path(REPORT), r.as_bytes())
    }
}

fn history_line(h: &[nn::train::EpochRecord]) -> String {
    match h.last() {
        Some(e) => format!("{} epochs, valid loss {:.4}, valid frame accuracy {:.3}", h.len(), e.valid_loss, e.valid_accuracy),
        None => "not trained".into(),
    }
}

/// Qualitative orderings the experiment is meant to show.
pub fn ordering_checks(grid: &ResultsGrid, conds: &[Condition]) -> Vec<(String, bool)> {
    let eer = |s: &str, m: &str, c: &Condition| grid.get(s, m, &c.name()).map(|e| e.eer);
    let cross = &conds[2];
    let mut out = Vec::new();
    for sys in SYSTEMS {
        for m in METRICS {
            let same: Option<Vec<f64>> = conds[..2].iter().map(|c| eer(sys, m, c)).collect();
            let ok = matches!((eer(sys, m, cross), same), (Some(x), Some(v)) if x >= v.iter().sum::<f64>() / v.len() as f64);
            out.push((format!("{sys} {m}: cross-language EER >= mean same-language EER"), ok));
        }
    }
    let lt = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(x), Some(y)) if x < y);
    out.push((format!("d-vector PLDA < i-vector PLDA on {}", cross.name()), lt(eer("d-vector", "PLDA", cross), eer("i-vector", "PLDA", cross))));
    for c in conds {
        out.push((format!("phone-aware PLDA <= d-vector PLDA + 0.5 on {}", c.name()), matches!((eer("phone-aware", "PLDA", c), eer("d-vector", "PLDA", c)), (Some(x), Some(y)) if x <= y + 0.005)));
    }
    for c in conds {
        out.push((format!("i-vector PLDA < i-vector Cosine on {}", c.name()), lt(eer("i-vector", "PLDA", c), eer("i-vector", "Cosine", c))));
    }
    out
}

/// Objective trace stored with a UBM or T-matrix checkpoint.
pub fn em_history(path: &Path) -> Result<Vec<f64>> {
    let c = crate::container::Container::read(path)?;
    serde_json::from_value(c.header["history"].clone()).map_err(|e| Error::Format { offset: 0, msg: format!("{}: history: {e}", path.display()) })
}

fn save_with_history(path: &Path, section: crate::container::Section, kind: &str, hist: &[f64]) -> Result<()> {
    let mut c = crate::container::Container::new(json!({ "variant": kind, "history": hist }));
    c.sections.push(section);
    c.write(path)
}

/// The first `n` utterances of each speaker in id order (all when `n == 0`),
/// skipping `skip_last` utterances at the end of each speaker.
fn per_speaker(feats: &[FeatureMatrix], n: usize, skip_last: usize) -> Vec<&FeatureMatrix> {
    let mut by: BTreeMap<&str, Vec<&FeatureMatrix>> = BTreeMap::new();
    for f in feats {
        by.entry(&f.speaker_id).or_default().push(f);
    }
    let mut out = Vec::new();
    for v in by.values_mut() {
        v.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let avail = v.len().saturating_sub(skip_last);
        out.extend(v.iter().take(if n == 0 { avail } else { n.min(avail) }));
    }
    out
}

/// The last `n` utterances of each speaker in id order.
fn held_out(feats: &[FeatureMatrix], n: usize) -> Vec<&FeatureMatrix> {
    let mut by: BTreeMap<&str, Vec<&FeatureMatrix>> = BTreeMap::new();
    for f in feats {
        by.entry(&f.speaker_id).or_default().push(f);
    }
    let mut out = Vec::new();
    for v in by.values_mut() {
        v.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        out.extend(v.iter().skip(v.len().saturating_sub(n)));
    }
    out
}

fn factors(clf: &PhoneClassifier, ex: &LinguisticFactorExtractor, feats: &[FeatureMatrix]) -> Result<Vec<Mat<f64>>> {
    feats.par_iter().map(|f| asr::linguistic_factor(ex, clf, f)).collect()
}

/// Everything scoring needs for one embedding type.
pub struct Backend {
    pub center: Vec<f64>,
    pub lda: LdaProjection,
    pub plda: PldaModel,
    pub plda_history: Vec<f64>,
}

pub fn train_backend(train: &[Embedding], lda_dim: usize, plda_iters: usize) -> Result<Backend> {
    let n_classes = train.iter().map(|e| e.speaker_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let d = train.first().map(Embedding::dim).unwrap_or(0);
    let k = lda_dim.min(d).min(n_classes.saturating_sub(1));
    if k < lda_dim {
        log::warn!("LDA dimension {lda_dim} clamped to {k} ({d}-dim data, {n_classes} classes)");
    }
    let lda = backend::train_lda(train, k)?;
    let center = mean_vector(train)?;
    let (plda, plda_history) = backend::train_plda(&center_lengthnorm(train, &center)?, plda_iters)?;
    Ok(Backend { center, lda, plda, plda_history })
}

impl Backend {
    pub fn save(&self, path: &Path, system: &str) -> Result<()> {
        backend::save_backend(path, Some(&self.lda), Some(&self.plda), json!({ "variant": system, "center": self.center, "plda_history": self.plda_history }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (lda, plda, h) = backend::load_backend(path)?;
        let bad = |what: &str| Error::Format { offset: 0, msg: format!("{}: {what}", path.display()) };
        Ok(Backend {
            center: serde_json::from_value(h["center"].clone()).map_err(|_| bad("missing centering mean"))?,
            lda: lda.ok_or_else(|| bad("missing LDAP section"))?,
            plda: plda.ok_or_else(|| bad("missing PLDA section"))?,
            plda_history: serde_json::from_value(h["plda_history"].clone()).unwrap_or_default(),
        })
    }
}

/// Loads an embedding archive keyed by utterance.
pub fn embeddings_by_id(path: &Path) -> Result<HashMap<String, Embedding>> {
    Ok(embedding_map(read_embeddings(path)?))
}
