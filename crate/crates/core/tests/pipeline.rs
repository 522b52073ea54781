use std::fs;

use padaforge_core::error::{Error, ErrorClass};
use padaforge_core::pipeline::{self, PipelineConfig, Stage, Workspace};
use padaforge_core::selection::DadMetric;

fn small() -> PipelineConfig {
    PipelineConfig::from_kv_str(
        "seed = 11\nsynth.samples_per_attack = 40\nsynth.target_samples = 60\nacquire.epochs = 2\ntrain.epochs = 5\nreport.evaluate = 1\n",
    )
    .unwrap()
}

#[test]
fn config_keys_round_into_fields() {
    let cfg = PipelineConfig::from_kv_str(
        "seed = 5\ntrain.lambda = 0.5\ntrain.gamma = 2\nselect.metric = mmd\ncluster.k_min = 3\ncluster.k_max = 5\nsynth.families = 4\nsynth.attacks_per_family = 2,2,3,3\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.train.lambda, 0.5);
    assert_eq!(cfg.train.gamma, 2.0);
    assert!(matches!(cfg.metric, DadMetric::Mmd(_)));
    assert_eq!((cfg.cluster_k_min, cfg.cluster_k_max), (Some(3), Some(5)));
    assert_eq!(cfg.synth.target_mixture, vec![0.25; 4]);
    assert!(!cfg.synth_seed_explicit);
}

#[test]
fn synth_seed_follows_root_unless_pinned() {
    let a = PipelineConfig::default().with_seed(1).unwrap();
    let b = PipelineConfig::default().with_seed(2).unwrap();
    assert_ne!(a.synth.seed, b.synth.seed);
    let pinned = PipelineConfig::from_kv_str("synth.seed = 99\n").unwrap().with_seed(4).unwrap();
    assert_eq!(pinned.synth.seed, 99);
}

#[test]
fn config_errors_name_the_field() {
    for (text, field) in [
        ("train.gamma = -1\n", "gamma"),
        ("cluster.k_min = 5\ncluster.k_max = 3\n", "cluster.k_min"),
        ("select.metric = cosine\n", "select.metric"),
        ("synth.dim = abc\n", "synth.dim"),
        ("nonsense = 1\n", "nonsense"),
    ] {
        match PipelineConfig::from_kv_str(text) {
            Err(Error::Config { field: f, .. }) => assert!(f.contains(field), "{text}: {f}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn select_without_assignment_is_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path(), small()).unwrap();
    for s in [Stage::Synth, Stage::Acquire, Stage::Embed] {
        ws.run(s).unwrap();
    }
    let err = ws.select().unwrap_err();
    assert_eq!(err.class(), ErrorClass::MissingArtifact);
    match err {
        Error::StageArtifactMissing(p) => assert!(p.ends_with(pipeline::ASSIGNMENT)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_stage_needs_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tmp.path(), small()).unwrap();
    for s in Stage::ALL.into_iter().skip(1) {
        assert_eq!(ws.run(s).unwrap_err().class(), ErrorClass::MissingArtifact, "{}", s.name());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = Workspace::new(tmp.path().join("a"), small()).unwrap();
    let b = Workspace::new(tmp.path().join("b"), small()).unwrap();
    let pa = a.pipeline().unwrap();
    let pb = b.pipeline().unwrap();
    assert_eq!(pa.len(), pb.len());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn csv_pool_format_feeds_later_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.set("pool.format", "csv").unwrap();
    let ws = Workspace::new(tmp.path(), cfg).unwrap();
    ws.pipeline().unwrap();
    let pads = ws.load_pads().unwrap();
    let k = fs::read_to_string(ws.path(pipeline::ASSIGNMENT)).unwrap();
    assert!(!pads.is_empty());
    assert!(!k.is_empty());
}
