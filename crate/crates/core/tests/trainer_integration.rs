//! End-to-end trainer contracts: determinism, the eta=0 reduction,
//! resume equivalence, and checkpoint round-trips.

use std::path::Path;

use memdlm_core::checkpoint;
use memdlm_core::config::RunConfig;
use memdlm_core::metrics::canonical_without_wall;
use memdlm_core::model::BaseModel;
use memdlm_core::taskgen::{generate as gen_task, write_toks, TaskKind, TaskSpec};
use memdlm_core::trainer::{self, TrainError};

fn write_data(dir: &Path) -> String {
    let spec = TaskSpec {
        context_len: 24,
        n_pairs: 2,
        value_width: 2,
        count: 64,
        seed: 7,
        ..TaskSpec::new(TaskKind::KvNiah, 32)
    };
    let pairs = gen_task(&spec).unwrap();
    let path = dir.join("train.toks");
    write_toks(&path, 32, &pairs).unwrap();
    path.display().to_string()
}

fn small_config(data: &str, out: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.vocab", "32"),
        ("model.d_model", "16"),
        ("model.n_heads", "2"),
        ("model.n_layers", "2"),
        ("model.max_len", "32"),
        ("train.steps", "30"),
        ("train.batch", "2"),
        ("train.eval_every", "10"),
        ("train.eval_batches", "2"),
        ("train.save_every", "10"),
        ("train.beta", "1e-3"),
        ("inner.rank", "2"),
        ("inner.fast_init", "random_a"),
        ("data.train", data),
        ("out.dir", out),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn fixed_seed_reproduces_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let mut cfg = small_config(&data, out.to_str().unwrap());
        cfg.set("train.method", "memdlm").unwrap();
        trainer::train(&cfg, &out, false).unwrap();
    }
    let ma = canonical_without_wall(&dir.path().join("a/metrics.jsonl")).unwrap();
    let mb = canonical_without_wall(&dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
    let ca = std::fs::read(dir.path().join("a/ckpt-30.bin")).unwrap();
    let cb = std::fs::read(dir.path().join("b/ckpt-30.bin")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn memdlm_with_zero_eta_reduces_to_standard() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());

    let out_std = dir.path().join("std");
    let cfg_std = small_config(&data, out_std.to_str().unwrap());
    trainer::train(&cfg_std, &out_std, false).unwrap();

    let out_mem = dir.path().join("mem0");
    let mut cfg_mem = small_config(&data, out_mem.to_str().unwrap());
    cfg_mem.set("train.method", "memdlm").unwrap();
    cfg_mem.set("inner.eta", "0").unwrap();
    trainer::train(&cfg_mem, &out_mem, false).unwrap();

    assert_eq!(
        canonical_without_wall(&out_std.join("metrics.jsonl")).unwrap(),
        canonical_without_wall(&out_mem.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());

    let out_full = dir.path().join("full");
    let mut cfg = small_config(&data, out_full.to_str().unwrap());
    cfg.set("train.method", "memdlm").unwrap();
    trainer::train(&cfg, &out_full, false).unwrap();

    // Emulate an interruption after step 20: keep the step-20 checkpoint and
    // the (over-long) metrics file, then resume to 30.
    let out_res = dir.path().join("resumed");
    std::fs::create_dir_all(&out_res).unwrap();
    std::fs::copy(out_full.join("ckpt-20.bin"), out_res.join("ckpt-20.bin")).unwrap();
    std::fs::copy(out_full.join("metrics.jsonl"), out_res.join("metrics.jsonl")).unwrap();
    let mut cfg2 = small_config(&data, out_res.to_str().unwrap());
    cfg2.set("train.method", "memdlm").unwrap();
    trainer::train(&cfg2, &out_res, true).unwrap();

    assert_eq!(
        canonical_without_wall(&out_full.join("metrics.jsonl")).unwrap(),
        canonical_without_wall(&out_res.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(out_full.join("ckpt-30.bin")).unwrap(),
        std::fs::read(out_res.join("ckpt-30.bin")).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = dir.path().join("run");
    let cfg = small_config(&data, out.to_str().unwrap());
    trainer::train(&cfg, &out, false).unwrap();

    let named = checkpoint::load_map(&out.join("ckpt-30.bin")).unwrap();
    let mut restored = BaseModel::new(cfg.model_config(), cfg.train_seed);
    restored.load_named(&named).unwrap();

    // A fresh save of the restored params is byte-identical on the model
    // tensors, and logits round-trip exactly.
    let tokens: Vec<u32> = vec![1, 5, 9, 3, 32, 2];
    let direct = {
        let mut trained = BaseModel::new(cfg.model_config(), cfg.train_seed);
        trained.load_named(&named).unwrap();
        trained.forward(None, &tokens).unwrap()
    };
    let roundtrip = restored.forward(None, &tokens).unwrap();
    for (a, b) in direct.iter().zip(&roundtrip) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn diverging_run_aborts_with_nonfinite_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = dir.path().join("diverge");
    let mut cfg = small_config(&data, out.to_str().unwrap());
    cfg.set("train.beta", "1e8").unwrap();
    cfg.set("train.warmup", "0").unwrap();
    cfg.set("train.schedule", "constant").unwrap();
    cfg.set("train.steps", "200").unwrap();
    cfg.set("train.save_every", "1").unwrap();
    match trainer::train(&cfg, &out, false) {
        Err(TrainError::NonFinite { step }) => {
            // A last-good checkpoint from before the failure is retained.
            let latest = trainer::find_latest_checkpoint(&out).unwrap();
            assert!(latest.0 < step);
        }
        other => panic!("expected non-finite abort, got {other:?}"),
    }
}
