use std::path::Path;
use std::process::{Command, Output};

use flowgspo::numcore::load_checkpoint;
use flowgspo::trainer::METRICS_CSV_HEADER;

const SMALL: &str = "\
# tiny run
demos = 120
sft_epochs = 2
hidden_dims = 16
horizon = 4
denoise_steps = 3
rl_steps = 3
buffer_refresh = 2
group_size = 3
eval_episodes = 8
";

fn flowgspo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowgspo"))
        .args(args)
        .env("FLOWGSPO_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn mask_demo_grids() {
    let o = flowgspo(&[
        "mask-demo",
        "--spatial",
        "2",
        "--semantic",
        "2",
        "--action",
        "2",
        "--chunk",
        "1",
    ]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "####..\n####..\n####..\n####..\n#####.\n######\n"
    );
    let o = flowgspo(&[
        "mask-demo",
        "--spatial",
        "0",
        "--semantic",
        "0",
        "--action",
        "3",
        "--chunk",
        "1",
    ]);
    assert_eq!(stdout(&o), "#..\n##.\n###\n");
    let o = flowgspo(&["mask-demo", "--action", "3", "--chunk", "2"]);
    assert!(!o.status.success());
}

#[test]
fn pretrain_rl_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sft = dir.path().join("sft");
    let o = flowgspo(&["pretrain", "--config", &cfg, "--out", s(&sft)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = sft.join("sft.ckpt");
    let params = load_checkpoint(&ckpt).unwrap();
    assert!(params.is_finite());
    let pre = std::fs::read_to_string(sft.join("pretrain_metrics.csv")).unwrap();
    assert_eq!(pre.lines().next(), Some("epoch,loss,wall_ms"));
    assert_eq!(pre.lines().count(), 3);

    for algo in ["flow-gspo", "grpo"] {
        let out = dir.path().join(algo);
        let o = flowgspo(&[
            "rl",
            "--config",
            &cfg,
            "--checkpoint",
            s(&ckpt),
            "--algo",
            algo,
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(out.join("final.ckpt").exists());
    }

    let fin = dir.path().join("flow-gspo").join("final.ckpt");
    let a = flowgspo(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&fin),
        "--mode",
        "shifted",
    ]);
    let b = flowgspo(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&fin),
        "--mode",
        "shifted",
    ]);
    assert!(a.status.success());
    let line = stdout(&a);
    assert!(
        line.starts_with("success_rate=") && line.contains(" mean_return="),
        "{line}"
    );
    assert_eq!(line.lines().count(), 1);
    assert_eq!(line, stdout(&b));

    let zero = flowgspo(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&fin),
        "--episodes",
        "0",
    ]);
    assert!(!zero.status.success());
}

#[test]
fn pretrain_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(
        flowgspo(&["pretrain", "--config", &cfg, "--seed", "5", "--out", s(&a)])
            .status
            .success()
    );
    assert!(
        flowgspo(&["pretrain", "--config", &cfg, "--seed", "5", "--out", s(&b)])
            .status
            .success()
    );
    for f in ["sft.ckpt", "pretrain_metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_or_bad_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = flowgspo(&[
        "pretrain",
        "--config",
        s(&dir.path().join("nope.cfg")),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(!out.exists());

    let cfg = write_config(dir.path(), "unknown_key = 1\n");
    let o = flowgspo(&["pretrain", "--config", &cfg, "--out", s(&out)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 11"), "{err}");
    assert!(!out.exists());
}

#[test]
fn rl_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sft = dir.path().join("sft");
    assert!(flowgspo(&["pretrain", "--config", &cfg, "--out", s(&sft)])
        .status
        .success());
    let wide = write_config(dir.path(), "hidden_dims = 24\n");
    let out = dir.path().join("rl");
    let o = flowgspo(&[
        "rl",
        "--config",
        &wide,
        "--checkpoint",
        s(&sft.join("sft.ckpt")),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn exploding_lr_exits_nonzero_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sft = dir.path().join("sft");
    assert!(flowgspo(&["pretrain", "--config", &cfg, "--out", s(&sft)])
        .status
        .success());
    let hot = write_config(dir.path(), "lr = 1e300\n");
    let out = dir.path().join("rl");
    let o = flowgspo(&[
        "rl",
        "--config",
        &hot,
        "--checkpoint",
        s(&sft.join("sft.ckpt")),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(load_checkpoint(&out.join("last_good.ckpt"))
        .unwrap()
        .is_finite());
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn trace_prints_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = flowgspo(&["trace", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 5));
}
