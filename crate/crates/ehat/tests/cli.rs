use std::path::Path;
use std::process::{Command, Output};

use ehat::commands::{cmd_gen_corpus, cmd_train, Checkpoint};
use ehat::config::RunConfig;
use ehat::corpus_io::Corpus;
use ehat_core::train::Stage;

fn ehat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehat"))
        .args(args)
        .output()
        .expect("run ehat")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "scenes=30",
    "--set",
    "d_model=8",
    "--set",
    "layers=1",
    "--set",
    "max_steps=4",
];

fn gen(dir: &Path) -> String {
    let out = dir.join("corpus").display().to_string();
    let mut args = vec!["gen-corpus", "--out", &out];
    args.extend(SMALL);
    let o = ehat(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn corpus_has_ten_to_fifty_regions_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(dir.path());
    let c = Corpus::load(Path::new(&out)).unwrap();
    assert_eq!(c.examples.len(), 30);
    assert!(c.examples.iter().all(|e| (10..=50).contains(&e.features.rows())));
    let again = ehat(&["gen-corpus", "--out", &out]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let mut forced = vec!["gen-corpus", "--out", &out, "--force"];
    forced.extend(SMALL);
    assert!(ehat(&forced).status.success());
}

#[test]
fn bad_ratio_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c").display().to_string();
    let o = ehat(&["gen-corpus", "--out", &out, "--set", "split_train=0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sum to 1"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c").display().to_string();
    let o = ehat(&["gen-corpus", "--out", &out, "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key"));
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "lambda = 0.3\nlambda = 0.4\n").unwrap();
    let o = ehat(&["gen-corpus", "--out", &out, "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_and_rl_before_ce() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path());
    let o = ehat(&["eval", "--corpus", &corpus, "--checkpoint", "/nonexistent/ce_best.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
    let run = dir.path().join("run").display().to_string();
    let mut args = vec!["train", "--stage", "rl", "--run", &run, "--corpus", &corpus];
    args.extend(SMALL);
    let o = ehat(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cross-entropy checkpoint"));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path());
    let run = dir.path().join("run").display().to_string();
    let mut args = vec!["train", "--run", &run, "--corpus", &corpus];
    args.extend(SMALL);
    args.extend([
        "--set",
        "peak_lr=1e300",
        "--set",
        "post_warmup_lr=1e300",
        "--set",
        "warmup_steps=1",
    ]);
    let o = ehat(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
}

#[test]
fn ce_then_rl_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path());
    let mut cfg = RunConfig::default();
    for kv in ["d_model=8", "layers=1", "max_steps=4", "eval_interval=2"] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.corpus_dir = corpus;
    let run = dir.path().join("run");
    let (_, ce) = cmd_train(&cfg, &run, false).unwrap();
    assert_eq!(ce.outcome.steps, 4);
    let ck = Checkpoint::load(&ce.best).unwrap();
    assert_eq!(ck.stage, Stage::Ce);
    assert!(ck.step == 2 || ck.step == 4);
    // the run directory is append-only
    assert!(cmd_train(&cfg, &run, false).is_err());

    let mut rl = cfg.clone();
    rl.train.stage = Stage::Rl;
    rl.train.max_steps = 2;
    let (_, s) = cmd_train(&rl, &run, false).unwrap();
    assert_eq!(s.outcome.records.len(), 2);
    assert!(s.outcome.records.iter().all(|r| r.mean_reward.is_some()));
    let log = std::fs::read_to_string(run.join("rl_metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let back = Checkpoint::load(&s.last).unwrap();
    assert_eq!(back.config.decoder, ck.config.decoder);
}

#[test]
fn gradcheck_lists_every_block() {
    let o = ehat(&["gradcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for b in ehat_core::gradcheck::Block::ALL {
        assert!(text.lines().any(|l| l.starts_with(b.name())), "{} missing", b.name());
    }
    let bad = ehat(&["gradcheck", "--corrupt-backward", "sigmoid"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn decode_caps_length_and_exports_attention() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("corpus");
    let mut cfg = RunConfig::default();
    for kv in ["scenes=30", "d_model=8", "layers=1", "max_steps=2"] {
        cfg.apply_override(kv).unwrap();
    }
    cmd_gen_corpus(&cfg, &c, false).unwrap();
    cfg.corpus_dir = c.display().to_string();
    let (_, s) = cmd_train(&cfg, &dir.path().join("run"), false).unwrap();
    let out = dir.path().join("dec").display().to_string();
    let att = dir.path().join("att.txt").display().to_string();
    let o = ehat(&[
        "decode",
        "--checkpoint",
        s.best.to_str().unwrap(),
        "--corpus",
        &cfg.corpus_dir,
        "--split",
        "train",
        "--limit",
        "3",
        "--out",
        &out,
        "--export-attention",
        &att,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let caps = std::fs::read_to_string(Path::new(&out).join("captions.jsonl")).unwrap();
    assert_eq!(caps.lines().count(), 3);
    for l in caps.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for lang in ["a", "b"] {
            assert!(v[lang].as_str().unwrap().split_whitespace().count() <= 20);
        }
    }
    let att = std::fs::read_to_string(att).unwrap();
    let headers: Vec<&str> = att.lines().filter(|l| l.starts_with("matrix ")).collect();
    assert!(!headers.is_empty());
    assert!(headers.iter().any(|h| h.contains(".omega_a ")) && headers.iter().any(|h| h.contains(".hca_b ")));
}
