//! Trial lists, scoring, EER and the results grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::backend::{cosine_score, PldaModel};
use crate::embedding::Embedding;
use crate::error::{invalid, Error, Result};
use crate::fsutil::{missing, write_atomic};
use crate::synth::{CorpusManifest, CorpusRecord};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Same(String),
    Cross(String, String),
}

impl Condition {
    pub fn name(&self) -> String {
        match self {
            Condition::Same(l) => format!("{l}-{l}"),
            Condition::Cross(a, b) => format!("{a}/{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some((a, b)) = s.split_once('/') {
            if !a.is_empty() && !b.is_empty() && a != b {
                return Ok(Condition::Cross(a.into(), b.into()));
            }
        } else if let Some((a, b)) = s.split_once('-') {
            if !a.is_empty() && a == b {
                return Ok(Condition::Same(a.into()));
            }
        }
        Err(invalid!("unrecognised condition {s:?} (expected L-L or A/B)"))
    }

    /// `A-A`, `B-B`, `A/B`.
    pub fn standard(a: &str, b: &str) -> Vec<Condition> {
        vec![Condition::Same(a.into()), Condition::Same(b.into()), Condition::Cross(a.into(), b.into())]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialList {
    pub condition: Condition,
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{}\t{}\t{}", t.enroll, t.test, if t.target { "target" } else { "nontarget" });
        }
        s
    }

    pub fn from_text(condition: Condition, text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let target = match f.as_slice() {
                [_, _, "target"] => true,
                [_, _, "nontarget"] => false,
                _ => return Err(Error::Format { offset: i as u64 + 1, msg: format!("trial line {}: expected enroll<TAB>test<TAB>target|nontarget", i + 1) }),
            };
            trials.push(Trial { enroll: f[0].into(), test: f[1].into(), target });
        }
        Ok(TrialList { condition, trials })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path, condition: Condition) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
        Self::from_text(condition, &text)
    }
}

fn by_language<'a>(records: &[&'a CorpusRecord], lang: &str) -> Vec<&'a CorpusRecord> {
    let mut v: Vec<&CorpusRecord> = records.iter().copied().filter(|r| r.language_id == lang).collect();
    v.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    v
}

pub fn make_trials(manifest: &CorpusManifest, condition: &Condition) -> Result<TrialList> {
    let eval: Vec<&CorpusRecord> = manifest.eval().collect();
    make_trials_from(&eval, condition)
}

/// Exhaustive pair enumeration over a record set.
pub fn make_trials_from(records: &[&CorpusRecord], condition: &Condition) -> Result<TrialList> {
    let langs: Vec<&str> = match condition {
        Condition::Same(l) => vec![l],
        Condition::Cross(a, b) => vec![a, b],
    };
    let speakers: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    for s in &speakers {
        for l in &langs {
            if !records.iter().any(|r| r.speaker_id == *s && r.language_id == *l) {
                return Err(invalid!("speaker {s} has no utterances in language {l}"));
            }
        }
    }
    let pair = |a: &CorpusRecord, b: &CorpusRecord| Trial { enroll: a.utterance_id.clone(), test: b.utterance_id.clone(), target: a.speaker_id == b.speaker_id };
    let mut trials = Vec::new();
    match condition {
        Condition::Same(l) => {
            let u = by_language(records, l);
            for i in 0..u.len() {
                for j in i + 1..u.len() {
                    trials.push(pair(u[i], u[j]));
                }
            }
        }
        Condition::Cross(a, b) => {
            let (ua, ub) = (by_language(records, a), by_language(records, b));
            for x in &ua {
                for y in &ub {
                    trials.push(pair(x, y));
                }
            }
        }
    }
    Ok(TrialList { condition: condition.clone(), trials })
}

pub trait Scorer: Sync {
    fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64>;

    /// Per-embedding transform applied once before pair scoring.
    fn prepare(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.to_vec())
    }

    fn score_prepared(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        self.score(enroll, test)
    }
}

pub struct Cosine;

impl Scorer for Cosine {
    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        cosine_score(a, b)
    }

    fn prepare(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 1e-12 {
            return Err(Error::Degenerate("cosine: zero-length vector".into()));
        }
        Ok(v.iter().map(|x| x / n).collect())
    }

    fn score_prepared(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(invalid!("cosine: dimensions {} and {} differ", a.len(), b.len()));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
    }
}

impl Scorer for PldaModel {
    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        PldaModel::score(self, a, b)
    }

    fn prepare(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.diagonal_coordinates(v)
    }

    fn score_prepared(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let s = crate::backend::pair_llr(self.psi(), a, b);
        if !s.is_finite() {
            return Err(Error::Numeric("plda: non-finite score".into()));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub condition: Condition,
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn targets(&self) -> Vec<f64> {
        self.trials.iter().zip(&self.scores).filter(|(t, _)| t.target).map(|(_, s)| *s).collect()
    }

    pub fn nontargets(&self) -> Vec<f64> {
        self.trials.iter().zip(&self.scores).filter(|(t, _)| !t.target).map(|(_, s)| *s).collect()
    }

    /// `enroll<TAB>test<TAB>score`, one line per trial.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, x) in self.trials.iter().zip(&self.scores) {
            let _ = writeln!(s, "{}\t{}\t{:.9e}", t.enroll, t.test, x);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Reads a score file and labels it from a trial list with the same pairs.
    pub fn read(path: &Path, trials: &TrialList) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
        let mut scores = Vec::with_capacity(trials.len());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for (i, t) in trials.trials.iter().enumerate() {
            let line = lines.next().ok_or_else(|| Error::Format { offset: i as u64 + 1, msg: format!("{}: only {i} scores for {} trials", path.display(), trials.len()) })?;
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format { offset: i as u64 + 1, msg: format!("{}: line {} does not match trial {} {}", path.display(), i + 1, t.enroll, t.test) };
            if f.len() != 3 || f[0] != t.enroll || f[1] != t.test {
                return Err(bad());
            }
            scores.push(f[2].parse::<f64>().map_err(|_| bad())?);
        }
        if lines.next().is_some() {
            return Err(Error::Format { offset: trials.len() as u64 + 1, msg: format!("{}: more scores than trials", path.display()) });
        }
        Ok(ScoreSet { condition: trials.condition.clone(), trials: trials.trials.clone(), scores })
    }
}

pub fn score_trials(scorer: &dyn Scorer, embeddings: &HashMap<String, Embedding>, list: &TrialList) -> Result<ScoreSet> {
    let mut ids: Vec<&str> = list.trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
    ids.sort_unstable();
    ids.dedup();
    let prepared: HashMap<&str, Vec<f64>> = ids
        .par_iter()
        .map(|&id| {
            let e = embeddings.get(id).ok_or_else(|| invalid!("no embedding for utterance {id}"))?;
            Ok((id, scorer.prepare(&e.vector)?))
        })
        .collect::<Result<_>>()?;
    let scores = list
        .trials
        .par_iter()
        .map(|t| {
            let s = scorer.score_prepared(&prepared[t.enroll.as_str()], &prepared[t.test.as_str()])?;
            if !s.is_finite() {
                return Err(Error::Numeric(format!("non-finite score for trial {} {}", t.enroll, t.test)));
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreSet { condition: list.condition.clone(), trials: list.trials.clone(), scores })
}

pub fn embedding_map(embs: impl IntoIterator<Item = Embedding>) -> HashMap<String, Embedding> {
    embs.into_iter().map(|e| (e.utterance_id.clone(), e)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

fn check_classes(t: &[f64], n: &[f64]) -> Result<()> {
    if t.is_empty() || n.is_empty() {
        return Err(invalid!("EER needs target and nontarget trials (got {} and {})", t.len(), n.len()));
    }
    if t.iter().chain(n).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("EER: non-finite score".into()));
    }
    Ok(())
}

/// Candidate thresholds: below the minimum, every midpoint between
/// adjacent distinct scores, above the maximum.
fn thresholds(t: &[f64], n: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = t.iter().chain(n).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut th = Vec::with_capacity(all.len() + 1);
    th.push(all[0] - 1.0);
    th.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    th.push(all[all.len() - 1] + 1.0);
    th
}

/// Interpolated crossing of FRR (rising) and FAR (falling) over the
/// operating points `(threshold, n_rejected_targets, n_accepted_nontargets)`.
fn crossing(points: &[(f64, usize, usize)], nt: usize, nn: usize) -> EerResult {
    let rate = |p: &(f64, usize, usize)| (p.1 as f64 / nt as f64, p.2 as f64 / nn as f64);
    let mut i = 0;
    while i + 1 < points.len() {
        let (frr1, far1) = rate(&points[i + 1]);
        if frr1 - far1 >= 0.0 {
            break;
        }
        i += 1;
    }
    let (frr0, far0) = rate(&points[i]);
    let d0 = frr0 - far0;
    let (eer, threshold) = if d0 >= 0.0 || i + 1 == points.len() {
        (frr0, points[i].0)
    } else {
        let (frr1, far1) = rate(&points[i + 1]);
        let d1 = frr1 - far1;
        let a = d0 / (d0 - d1);
        (frr0 + a * (frr1 - frr0), points[i].0 + a * (points[i + 1].0 - points[i].0))
    };
    EerResult { eer, threshold, n_target: nt, n_nontarget: nn }
}

/// Trials with score above the threshold are accepted.
pub fn compute_eer_scores(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    check_classes(targets, nontargets)?;
    let th = thresholds(targets, nontargets);
    let mut t: Vec<f64> = targets.to_vec();
    let mut n: Vec<f64> = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let (mut it, mut inn) = (0, 0);
    let points: Vec<(f64, usize, usize)> = th
        .iter()
        .map(|&x| {
            while it < t.len() && t[it] < x {
                it += 1;
            }
            while inn < n.len() && n[inn] < x {
                inn += 1;
            }
            (x, it, n.len() - inn)
        })
        .collect();
    Ok(crossing(&points, t.len(), n.len()))
}

pub fn compute_eer(set: &ScoreSet) -> Result<EerResult> {
    compute_eer_scores(&set.targets(), &set.nontargets())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsGrid {
    pub conditions: Vec<String>,
    cells: BTreeMap<(String, String, String), EerResult>,
    systems: Vec<String>,
    metrics: Vec<String>,
}

impl ResultsGrid {
    pub fn new(conditions: Vec<String>) -> Self {
        ResultsGrid { conditions, ..Default::default() }
    }

    pub fn insert(&mut self, system: &str, metric: &str, condition: &str, r: EerResult) {
        if !self.systems.iter().any(|s| s == system) {
            self.systems.push(system.into());
        }
        if !self.metrics.iter().any(|s| s == metric) {
            self.metrics.push(metric.into());
        }
        if !self.conditions.iter().any(|s| s == condition) {
            self.conditions.push(condition.into());
        }
        self.cells.insert((system.into(), metric.into(), condition.into()), r);
    }

    pub fn get(&self, system: &str, metric: &str, condition: &str) -> Option<&EerResult> {
        self.cells.get(&(system.into(), metric.into(), condition.into()))
    }

    /// Rows in order of first insertion, grouped by system then metric.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for s in &self.systems {
            for m in &self.metrics {
                if self.conditions.iter().any(|c| self.get(s, m, c).is_some()) {
                    out.push((s.clone(), m.clone()));
                }
            }
        }
        out
    }

    fn table(&self) -> Vec<Vec<String>> {
        let mut rows = vec![["System", "Metric"].iter().map(|s| s.to_string()).chain(self.conditions.iter().cloned()).collect::<Vec<_>>()];
        for (s, m) in self.rows() {
            let mut r = vec![s.clone(), m.clone()];
            r.extend(self.conditions.iter().map(|c| self.get(&s, &m, c).map_or("-".into(), |e| format!("{:.2}", 100.0 * e.eer))));
            rows.push(r);
        }
        rows
    }

    /// EER in percent, two decimals.
    pub fn to_tsv(&self) -> String {
        self.table().iter().map(|r| r.join("\t") + "\n").collect()
    }

    pub fn to_aligned(&self) -> String {
        let t = self.table();
        let w: Vec<usize> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for (i, r) in t.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| if j < 2 { format!("{c:<w$}", w = w[j]) } else { format!("{c:>w$}", w = w[j]) })
                .collect();
            s += cells.join("  ").trim_end();
            s.push('\n');
            if i == 0 {
                s += &"-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1));
                s.push('\n');
            }
        }
        s
    }
}

/// Same TSV parse as `to_tsv` writes; EER values are in percent.
pub fn parse_results_tsv(text: &str) -> Result<Vec<(String, String, Vec<Option<f64>>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid!("empty results table"))?;
    let n = header.split('\t').count();
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != n {
                return Err(invalid!("results row {l:?} has {} fields, header has {n}", f.len()));
            }
            let vals = f[2..].iter().map(|v| if *v == "-" { Ok(None) } else { v.parse().map(Some).map_err(|_| invalid!("bad EER value {v:?}")) }).collect::<Result<_>>()?;
            Ok((f[0].into(), f[1].into(), vals))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use rand::Rng;

    fn rec(spk: &str, lang: &str, k: usize) -> CorpusRecord {
        CorpusRecord { utterance_id: format!("{spk}-{lang}{k:02}"), speaker_id: spk.into(), language_id: lang.into(), path: String::new(), duration_s: 1.0, label_starts: vec![] }
    }

    fn records(n_spk: usize, u: usize) -> Vec<CorpusRecord> {
        let mut v = Vec::new();
        for s in 0..n_spk {
            for l in ["A", "B"] {
                for k in 0..u {
                    v.push(rec(&format!("v{s:03}"), l, k));
                }
            }
        }
        v
    }

    fn choose2(n: usize) -> usize {
        n * n.saturating_sub(1) / 2
    }

    #[test]
    fn trial_counts_small() {
        let r = records(2, 2);
        let refs: Vec<&CorpusRecord> = r.iter().collect();
        let t = make_trials_from(&refs, &Condition::Same("A".into())).unwrap();
        assert_eq!(t.n_targets(), 2);
        assert_eq!(t.len() - t.n_targets(), 4);
        assert!(t.trials.iter().all(|x| x.enroll != x.test));
    }

    #[test]
    fn trial_count_formulas() {
        for n_spk in 1..=4 {
            for u in 1..=4 {
                let r = records(n_spk, u);
                let refs: Vec<&CorpusRecord> = r.iter().collect();
                let same = make_trials_from(&refs, &Condition::Same("B".into())).unwrap();
                // enumerate independently
                let b: Vec<&CorpusRecord> = r.iter().filter(|x| x.language_id == "B").collect();
                let mut tg = 0;
                let mut all = 0;
                for i in 0..b.len() {
                    for j in 0..b.len() {
                        if i < j {
                            all += 1;
                            tg += (b[i].speaker_id == b[j].speaker_id) as usize;
                        }
                    }
                }
                assert_eq!(same.n_targets(), tg);
                assert_eq!(same.n_targets(), n_spk * choose2(u));
                assert_eq!(same.len(), all);
                let cross = make_trials_from(&refs, &Condition::Cross("A".into(), "B".into())).unwrap();
                assert_eq!(cross.len(), n_spk * n_spk * u * u);
                assert_eq!(cross.n_targets(), n_spk * u * u);
                for t in &cross.trials {
                    let (e, s) = (refs.iter().find(|r| r.utterance_id == t.enroll).unwrap(), refs.iter().find(|r| r.utterance_id == t.test).unwrap());
                    assert_ne!(e.language_id, s.language_id);
                    assert_eq!(t.target, e.speaker_id == s.speaker_id);
                }
            }
        }
        assert_eq!(181 * choose2(10), 8145);
    }

    #[test]
    fn trials_need_language_coverage() {
        let mut r = records(2, 2);
        r.retain(|x| !(x.speaker_id == "v001" && x.language_id == "B"));
        let refs: Vec<&CorpusRecord> = r.iter().collect();
        let e = make_trials_from(&refs, &Condition::Cross("A".into(), "B".into())).unwrap_err();
        assert!(e.to_string().contains("v001"));
        let t = make_trials_from(&refs, &Condition::Same("A".into())).unwrap();
        let again = make_trials_from(&refs, &Condition::Same("A".into())).unwrap();
        assert_eq!(t.to_text(), again.to_text());
        assert_eq!(TrialList::from_text(t.condition.clone(), &t.to_text()).unwrap(), t);
    }

    #[test]
    fn condition_names() {
        for c in Condition::standard("A", "B") {
            assert_eq!(Condition::parse(&c.name()).unwrap(), c);
        }
        assert!(Condition::parse("A-B").is_err());
    }

    #[test]
    fn eer_cases() {
        assert_eq!(compute_eer_scores(&[0.9, 0.8], &[0.1, 0.2]).unwrap().eer, 0.0);
        assert_eq!(compute_eer_scores(&[0.1, 0.5, 0.7], &[0.5, 0.7, 0.1]).unwrap().eer, 0.5);
        assert_eq!(compute_eer_scores(&[1.0], &[1.0]).unwrap().eer, 0.5);
        assert!(compute_eer_scores(&[], &[1.0]).is_err());
        assert!(compute_eer_scores(&[1.0], &[]).is_err());
    }

    /// Counts every operating point directly.
    pub fn brute_force_eer(t: &[f64], n: &[f64]) -> f64 {
        let mut all: Vec<f64> = t.iter().chain(n).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut th = vec![all[0] - 1.0];
        for i in 0..all.len() - 1 {
            th.push((all[i] + all[i + 1]) / 2.0);
        }
        th.push(all[all.len() - 1] + 1.0);
        let pts: Vec<(f64, usize, usize)> = th.iter().map(|&x| (x, t.iter().filter(|&&s| s < x).count(), n.iter().filter(|&&s| s > x).count())).collect();
        let (nt, nn) = (t.len() as f64, n.len() as f64);
        let d: Vec<f64> = pts.iter().map(|p| p.1 as f64 / nt - p.2 as f64 / nn).collect();
        let k = d.iter().position(|&v| v >= 0.0).unwrap();
        if k == 0 || d[k] == 0.0 {
            return pts[k].1 as f64 / nt;
        }
        let (f0, f1) = (pts[k - 1].1 as f64 / nt, pts[k].1 as f64 / nt);
        f0 + d[k - 1] / (d[k - 1] - d[k]) * (f1 - f0)
    }

    #[test]
    fn eer_matches_brute_force() {
        let mut r = rng(3);
        for case in 0..200 {
            let nt = r.random_range(1..30);
            let nn = r.random_range(1..30);
            // coarse grid on some sets to force ties
            let q = if case % 3 == 0 { 4.0 } else { 1e6 };
            let mut draw = |m: f64| ((r.random::<f64>() + m) * q).round() / q;
            let t: Vec<f64> = (0..nt).map(|_| draw(0.3)).collect();
            let n: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
            assert_eq!(compute_eer_scores(&t, &n).unwrap().eer, brute_force_eer(&t, &n), "case {case}");
        }
    }

    #[test]
    fn eer_invariances() {
        let mut r = rng(4);
        let t: Vec<f64> = (0..40).map(|_| r.random::<f64>() + 0.4).collect();
        let n: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
        let e = compute_eer_scores(&t, &n).unwrap().eer;
        let map = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&x| f(x)).collect::<Vec<_>>();
        assert_eq!(compute_eer_scores(&map(&t, f64::exp), &map(&n, f64::exp)).unwrap().eer, e);
        assert_eq!(compute_eer_scores(&map(&t, |x| 2.0 * x + 1.0), &map(&n, |x| 2.0 * x + 1.0)).unwrap().eer, e);
        let neg = |x: f64| -x;
        assert!((compute_eer_scores(&map(&n, neg), &map(&t, neg)).unwrap().eer - e).abs() < 1e-12);
        assert!((0.0..=0.5).contains(&e));
    }

    struct Dot;
    impl Scorer for Dot {
        fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
            Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
        }
    }

    #[test]
    fn scoring() {
        let r = records(3, 2);
        let refs: Vec<&CorpusRecord> = r.iter().collect();
        let mut g = rng(5);
        let embs = embedding_map(r.iter().map(|x| Embedding { utterance_id: x.utterance_id.clone(), speaker_id: x.speaker_id.clone(), language_id: x.language_id.clone(), vector: (0..4).map(|_| g.random::<f64>()).collect() }));
        let list = make_trials_from(&refs, &Condition::Cross("A".into(), "B".into())).unwrap();
        let full = score_trials(&Dot, &embs, &list).unwrap();
        assert_eq!(full.scores.len(), list.len());
        let one = TrialList { condition: list.condition.clone(), trials: vec![list.trials[3].clone()] };
        assert_eq!(score_trials(&Dot, &embs, &one).unwrap().scores, vec![full.scores[3]]);
        let sub = TrialList { condition: list.condition.clone(), trials: list.trials.iter().step_by(3).cloned().collect() };
        let s = score_trials(&Dot, &embs, &sub).unwrap();
        assert!(s.scores.iter().zip(full.scores.iter().step_by(3)).all(|(a, b)| a == b));
        let swapped = TrialList { condition: list.condition.clone(), trials: list.trials.iter().map(|t| Trial { enroll: t.test.clone(), test: t.enroll.clone(), target: t.target }).collect() };
        assert_eq!(score_trials(&Cosine, &embs, &swapped).unwrap().scores, score_trials(&Cosine, &embs, &list).unwrap().scores);
        let mut short = embs.clone();
        short.remove("v000-A00");
        assert!(score_trials(&Dot, &short, &list).unwrap_err().to_string().contains("v000-A00"));
        let dir = tempfile::tempdir().unwrap();
        full.write(&dir.path().join("s")).unwrap();
        let back = ScoreSet::read(&dir.path().join("s"), &list).unwrap();
        assert!(back.scores.iter().zip(&full.scores).all(|(a, b)| (a - b).abs() <= 1e-8 * b.abs()));
    }

    fn res(e: f64) -> EerResult {
        EerResult { eer: e, threshold: 0.0, n_target: 1, n_nontarget: 1 }
    }

    #[test]
    fn results_tables() {
        let conds = vec!["A-A".to_string(), "B-B".into(), "A/B".into()];
        let g = ResultsGrid::new(conds.clone());
        assert_eq!(g.to_tsv(), "System\tMetric\tA-A\tB-B\tA/B\n");
        let mut g1 = g.clone();
        g1.insert("i-vector", "Cosine", "B-B", res(0.1));
        assert_eq!(g1.to_tsv().lines().count(), 2);
        assert_eq!(g1.to_tsv().lines().nth(1).unwrap(), "i-vector\tCosine\t-\t10.00\t-");
        let mut full = g;
        let mut v = 0.01;
        for s in ["i-vector", "d-vector", "phone-aware"] {
            for m in ["Cosine", "LDA", "PLDA"] {
                for c in &conds {
                    full.insert(s, m, c, res(v));
                    v += 0.01;
                }
            }
        }
        let golden = "\
System\tMetric\tA-A\tB-B\tA/B
i-vector\tCosine\t1.00\t2.00\t3.00
i-vector\tLDA\t4.00\t5.00\t6.00
i-vector\tPLDA\t7.00\t8.00\t9.00
d-vector\tCosine\t10.00\t11.00\t12.00
d-vector\tLDA\t13.00\t14.00\t15.00
d-vector\tPLDA\t16.00\t17.00\t18.00
phone-aware\tCosine\t19.00\t20.00\t21.00
phone-aware\tLDA\t22.00\t23.00\t24.00
phone-aware\tPLDA\t25.00\t26.00\t27.00
";
        assert_eq!(full.to_tsv(), golden);
        let aligned = full.to_aligned();
        assert_eq!(aligned.lines().count(), 11);
        assert!(aligned.lines().nth(2).unwrap().starts_with("i-vector     Cosine   1.00"));
        let parsed = parse_results_tsv(golden).unwrap();
        assert_eq!(parsed.len(), 9);
        assert_eq!(parsed[8].2[2], Some(27.0));
    }
}
