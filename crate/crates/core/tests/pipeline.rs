use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use entlink::ensemble::{EnsembleManifest, VoteConfig};
use entlink::kb::{load_kb, Mode};
use entlink::linker::LinkRecord;
use entlink::pipeline::{artifacts, Paths, Pipeline, PipelineConfig};
use entlink::synth::SynthConfig;
use entlink::Error;

fn small_synth() -> SynthConfig {
    SynthConfig {
        entities: 200,
        documents: 40,
        ..Default::default()
    }
}

fn config_in(data: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        paths: Paths {
            kb: data.join("kb.jsonl"),
            corpus: data.join("corpus.jsonl"),
            model_dir: data.join("models"),
            out_dir: out.to_path_buf(),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// A small corpus with all three stages trained once for every test.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(config_in(dir.path(), &dir.path().join("out"))).unwrap();
        p.synth(&small_synth()).unwrap();
        p.train_all().unwrap();
        dir
    })
    .path()
}

fn read_links(path: PathBuf) -> Vec<LinkRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn eval_is_repeatable_and_links_known_entities() {
    let data = trained();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Pipeline::new(config_in(data, a.path())).unwrap().eval().unwrap();
    let rb = Pipeline::new(config_in(data, b.path())).unwrap().eval().unwrap();
    assert_eq!(ra, rb);
    for f in ["report.json", "report.txt", artifacts::TRACK1_LINKS, artifacts::TRACK2_LINKS, artifacts::SPANS] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }

    let kb = load_kb(data.join("kb.jsonl"), Mode::Track1).unwrap();
    for file in [artifacts::TRACK1_LINKS, artifacts::TRACK2_LINKS] {
        for link in read_links(a.path().join(file)) {
            assert!(kb.get(&link.entity_id).is_some(), "{} not in the KB", link.entity_id);
            assert_ne!(link.entity_id, entlink::kb::ERROR_ID);
        }
    }
    let t2 = ra.track2.unwrap();
    assert_eq!(read_links(a.path().join(artifacts::TRACK2_LINKS)).len(), t2.mentions);
    assert!(t2.accuracy > 0.5, "track 2 accuracy {}", t2.accuracy);
}

#[test]
fn oracle_spans_link_at_least_as_well_as_recognized_spans() {
    let data = trained();
    let out = tempfile::tempdir().unwrap();
    let recognized = Pipeline::new(config_in(data, out.path())).unwrap().run_track1().unwrap();
    let mut cfg = config_in(data, out.path());
    cfg.oracle_spans = true;
    let oracle = Pipeline::new(cfg).unwrap().run_track1().unwrap();
    let (r, o) = (recognized.track1.unwrap().linking, oracle.track1.unwrap().linking);
    assert!(o.f1 >= r.f1, "oracle {} < recognized {}", o.f1, r.f1);
    assert!(o.recall > 0.5);
}

#[test]
fn empty_test_file_gives_empty_outputs_and_zero_report() {
    let data = trained();
    let out = tempfile::tempdir().unwrap();
    let test = out.path().join("empty.jsonl");
    fs::write(&test, "").unwrap();
    let mut cfg = config_in(data, &out.path().join("out"));
    cfg.paths.test = Some(test);
    let report = Pipeline::new(cfg).unwrap().eval().unwrap();
    assert_eq!(report.eval_utterances, 0);
    assert_eq!(report.track2.unwrap().mentions, 0);
    assert_eq!(report.track1.unwrap().linking.f1, 0.0);
    for f in [artifacts::TRACK1_LINKS, artifacts::TRACK2_LINKS, artifacts::SPANS] {
        assert_eq!(fs::read_to_string(out.path().join("out").join(f)).unwrap(), "", "{f}");
    }
}

#[test]
fn ensemble_manifest_runs_both_tracks() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = config_in(data, &work.path().join("out"));
    cfg.paths.model_dir = work.path().join("models");
    // The members reuse the shared retriever.
    fs::create_dir_all(&cfg.paths.model_dir).unwrap();
    for f in fs::read_dir(data.join("models")).unwrap() {
        let f = f.unwrap().path();
        fs::copy(&f, cfg.paths.model_dir.join(f.file_name().unwrap())).unwrap();
    }
    let p = Pipeline::new(cfg.clone()).unwrap();
    let ner: Vec<PathBuf> = (0..3).map(|i| work.path().join(format!("ner{i}.bin"))).collect();
    for (i, path) in ner.iter().enumerate() {
        p.train_ner(Some(path), Some(10 + i as u64)).unwrap();
    }
    let second = work.path().join("linker2");
    p.train_linker(Some(&second), Some(7)).unwrap();

    let manifest = EnsembleManifest {
        ner_models: ner,
        vote: VoteConfig::recall(0.7),
        linker_models: vec![cfg.paths.model_dir.clone(), second],
        fusion: None,
    };
    let manifest_path = work.path().join("ensemble.json");
    manifest.save(&manifest_path).unwrap();
    cfg.paths.ensemble = Some(manifest_path);
    let report = Pipeline::new(cfg).unwrap().eval().unwrap();
    assert!(report.track1.unwrap().recognized > 0);
    assert!(report.track2.unwrap().accuracy > 0.5);
}

#[test]
fn track2_mode_never_drops() {
    let data = trained();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config_in(data, out.path());
    cfg.mode = Mode::Track2;
    let p = Pipeline::new(cfg).unwrap();
    let report = p.eval().unwrap();
    assert!(report.track1.is_none());
    let t2 = report.track2.unwrap();
    let links = read_links(out.path().join(artifacts::TRACK2_LINKS));
    assert_eq!(links.len(), t2.mentions);
    let spans: HashSet<_> = links.iter().map(|l| (&l.doc_id, l.sent_index, l.start, l.end)).collect();
    assert_eq!(spans.len(), links.len());
    assert!(matches!(p.run_track1(), Err(Error::Stage { .. })));
}

#[test]
fn missing_models_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config_in(dir.path(), &dir.path().join("out"))).unwrap();
    p.synth(&SynthConfig {
        entities: 50,
        documents: 10,
        ..Default::default()
    })
    .unwrap();
    let msg = p.run_track1().unwrap_err().to_string();
    assert!(msg.starts_with("[retrieval]"), "{msg}");
    let msg = p.run_track2().unwrap_err().to_string();
    assert!(msg.starts_with("[linker]"), "{msg}");
}
