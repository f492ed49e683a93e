use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
seeds = 2

[demos]
per_task = 10
held_out_per_task = 3

[vae]
latent_width = 6
hidden_width = 12
epochs = 2
batch_size = 32

[lae]
hidden_width = 5
epochs = 2
batch_size = 8

[agent]
hidden = 8
batch_size = 16
warmup = 40

[bgpo]
concurrent_episodes = 6
continual_episodes = 6
milestones = [2, 4]
eval_window = 3
"#;

fn bgpo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgpo"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("exp");

    let missing = bgpo(&["train", "--config", c], &out);
    assert_eq!(missing.status.code(), Some(3));

    let text = ok(&bgpo(&["gen-demos", "--config", c], &out));
    assert!(text.starts_with("30 demonstrations (21 train, 9 held out)"), "{text}");
    assert_eq!(bgpo(&["train", "--config", c], &out).status.code(), Some(3));
    ok(&bgpo(&["pretrain", "--config", c], &out));
    for f in ["demos.bin", "split.json", "vae.ckpt", "lae.ckpt", "vae_loss.csv", "lae_loss.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let text = ok(&bgpo(&["train", "--config", c, "--mode", "gwr-only", "--schedule", "continual"], &out));
    assert!(text.contains("gwr-only seed 3: final success") && text.contains("gwr-only seed 4"), "{text}");
    for seed in [3, 4] {
        let m = std::fs::read_to_string(out.join(format!("metrics_continual_gwr-only_seed{seed}.csv"))).unwrap();
        let mut lines = m.lines();
        assert_eq!(
            lines.next().unwrap(),
            "episode,seed,mode,schedule,task,train_return,intrinsic,success,ep_len,gwr_nodes,eval_task,eval_success,eval_return"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("gwr-only")));
        assert!(out.join(format!("runs/continual_gwr-only_seed{seed}/agent_final.ckpt")).exists());
    }
    let agg = std::fs::read_to_string(out.join("aggregate_continual_gwr-only.csv")).unwrap();
    assert_eq!(agg.lines().count(), 7);
    assert!(agg.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));

    let text = ok(&bgpo(&["eval", "--config", c, "--mode", "gwr-only", "--schedule", "continual", "--episodes", "4"], &out));
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("seed 3: task 1 "));

    let text = ok(&bgpo(&["pca", "--config", c, "--mode", "gwr-only", "--schedule", "continual", "--seeds", "1"], &out));
    assert!(text.contains("nodes projected"), "{text}");
    let pca = std::fs::read_to_string(out.join("pca_continual_gwr-only_seed3.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "node_id,pc1,pc2,dominant_task");
    assert!(pca.lines().count() > 2);

    assert_eq!(bgpo(&["pca", "--config", c, "--mode", "neither"], &out).status.code(), Some(3));
}

#[test]
fn ablate_covers_every_mode_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("exp");
    ok(&bgpo(&["gen-demos", "--config", c], &out));
    ok(&bgpo(&["pretrain", "--config", c], &out));
    let text = ok(&bgpo(&["ablate", "--config", c, "--seeds", "1"], &out));
    for mode in ["full", "gwr-only", "rint-only", "neither"] {
        assert!(text.contains(&format!("{mode} mean final success")), "{text}");
        assert!(out.join(format!("aggregate_concurrent_{mode}.csv")).exists());
    }
    let path = out.join("metrics_concurrent_full_seed3.csv");
    let first = std::fs::read(&path).unwrap();
    ok(&bgpo(&["train", "--config", c, "--seeds", "1", "--sequential"], &out));
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sede = 1\n").unwrap();
    let out = dir.path().join("exp");
    assert_eq!(bgpo(&["gen-demos", "--config", bad.to_str().unwrap()], &out).status.code(), Some(2));
    assert_eq!(bgpo(&["gen-demos", "--config", "/no/such/file.toml"], &out).status.code(), Some(2));
    assert_eq!(bgpo(&["gen-demos", "--seeds", "0"], &out).status.code(), Some(2));
    assert_eq!(bgpo(&["train", "--mode", "both"], &out).status.code(), Some(2));
    assert!(!out.exists());
}
