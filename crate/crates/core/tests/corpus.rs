use std::collections::HashSet;

use xldv::synth::{build_corpus, CorpusConfig, CorpusManifest};

fn small() -> CorpusConfig {
    CorpusConfig {
        n_train_speakers: 3,
        train_utts_per_speaker: 2,
        n_eval_speakers: 2,
        eval_utts_per_language: 2,
        n_phones: 10,
        ..CorpusConfig::default()
    }
}

#[test]
fn small_corpus_layout() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_corpus(&small(), 11, dir.path()).unwrap();
    assert_eq!(m.train().count(), 6);
    assert_eq!(m.eval().count(), 8);
    let train: HashSet<_> = m.train().map(|r| r.speaker_id.clone()).collect();
    let eval: HashSet<_> = m.eval().map(|r| r.speaker_id.clone()).collect();
    assert!(train.is_disjoint(&eval));
    for s in &eval {
        for l in ["A", "B"] {
            assert_eq!(m.eval().filter(|r| &r.speaker_id == s && r.language_id == l).count(), 2);
        }
    }
    for r in &m.records {
        assert!(dir.path().join(&r.path).exists());
        assert!((2.0..=3.0).contains(&r.duration_s));
        let pcm = m.load_utterance(r).unwrap();
        assert_eq!(pcm.len() as f64 / 8000.0, r.duration_s);
    }
    let back = CorpusManifest::read(dir.path(), "E", ("A".into(), "B".into())).unwrap();
    assert_eq!(back.records, m.records);
}

#[test]
fn regeneration_is_byte_identical() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = build_corpus(&small(), 5, d1.path()).unwrap();
    build_corpus(&small(), 5, d2.path()).unwrap();
    let mut files = vec!["manifest.tsv".to_string(), "phones.tsv".to_string()];
    files.extend(m.records.iter().map(|r| r.path.clone()));
    for f in files {
        let a = std::fs::read(d1.path().join(&f)).unwrap();
        let b = std::fs::read(d2.path().join(&f)).unwrap();
        assert_eq!(xldv::util::sha256_hex(&a), xldv::util::sha256_hex(&b), "{f}");
    }
}

#[test]
fn default_counts() {
    let c = CorpusConfig::default();
    assert_eq!(c.n_train_speakers * c.train_utts_per_speaker, 4000);
    assert_eq!(c.n_eval_speakers * 2 * c.eval_utts_per_language, 800);
}
