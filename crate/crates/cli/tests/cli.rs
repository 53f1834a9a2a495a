use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybrid_lora_core::checkpoint;
use hybrid_lora_core::{attach_lora, AllocationPlan, Direction};

const TINY: &str = r#"
rank = 4
partitions = 4
pretrain_steps = 5
r_fft = 0.2

[model]
num_layers = 2
d_model = 16
num_heads = 2
d_ff = 32

[train]
warmup_steps = 5
total_steps = 20
eval_every = 5
batch_size = 8
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-lora"))
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("-c").arg(config).arg("-o").arg(out).output().unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("out");
    (tmp, cfg, out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_rank_exits_one_and_names_field() {
    let (_t, cfg, out) = setup("r_fft = 0.2\n");
    let o = run(&["probe"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rank"), "{}", stderr(&o));
}

#[test]
fn invalid_field_exits_one() {
    let (_t, cfg, out) = setup(TINY);
    let o = run(&["probe", "--r-fft", "1.5"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("r_fft"));
}

#[test]
fn missing_checkpoint_exits_two() {
    let (_t, cfg, out) = setup(TINY);
    for stage in ["score", "train", "oracle"] {
        let o = run(&[stage], &cfg, &out);
        assert_eq!(o.status.code(), Some(2), "{stage}: {}", stderr(&o));
    }
    let o = run(&["allocate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn existing_outputs_need_overwrite() {
    let (_t, cfg, out) = setup(TINY);
    assert!(run(&["probe"], &cfg, &out).status.success());
    let o = run(&["probe"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--overwrite"));
    assert!(run(&["probe", "--overwrite"], &cfg, &out).status.success());
}

#[test]
fn pipeline_artifacts_and_report() {
    let (_t, cfg, out) = setup(TINY);
    let o = run(&["pipeline", "--oracle"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));

    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "layer,query,key,value,output,gate,up,down");
    assert_eq!(lines.len(), 1 + 2);
    for row in &lines[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert!(cells[1..].iter().all(|c| *c == "FFT" || *c == "LoRA"));
    }

    let jsonl = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 20 / 5);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 / 5);

    let rep = bin().arg("report").arg(&out).output().unwrap();
    assert!(rep.status.success());
    let text = String::from_utf8(rep.stdout).unwrap();
    assert!(text.contains("verified"), "{text}");
    assert!(text.contains("oracle"), "{text}");
}

#[test]
fn tampered_artifact_fails_report() {
    let (_t, cfg, out) = setup(TINY);
    assert!(run(&["pipeline"], &cfg, &out).status.success());
    let plan = out.join("plan.json");
    let mut bytes = std::fs::read(&plan).unwrap();
    bytes.extend_from_slice(b" ");
    std::fs::write(&plan, bytes).unwrap();
    let rep = bin().arg("report").arg(&out).output().unwrap();
    assert_eq!(rep.status.code(), Some(3));

    let rep = bin().arg("report").arg(out.join("nowhere")).output().unwrap();
    assert_eq!(rep.status.code(), Some(2));
}

#[test]
fn zero_warmup_keeps_attach_state() {
    let (_t, cfg, out) = setup(TINY);
    let o = run(&["probe", "--warmup-steps", "0", "--seed", "3"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut m0 = checkpoint::load(&out.join("m0.ckpt")).unwrap();
    let probe = checkpoint::load(&out.join("probe.ckpt")).unwrap();
    let u = m0.universe();
    attach_lora(&mut m0, &u, 4, 3).unwrap();
    assert_eq!(m0.full_digest(), probe.full_digest());
}

#[test]
fn descending_direction_is_recorded_and_valid() {
    let (_t, cfg, out) = setup(TINY);
    assert!(run(&["probe"], &cfg, &out).status.success());
    assert!(run(&["score"], &cfg, &out).status.success());
    let o = run(&["allocate", "--direction", "descending-from-fft"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let down: AllocationPlan = serde_json::from_slice(&std::fs::read(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(down.direction, Direction::DescendingFromFft);
    assert!(down.used_ratio <= down.budget_ratio);

    assert!(run(&["allocate", "--overwrite"], &cfg, &out).status.success());
    let up: AllocationPlan = serde_json::from_slice(&std::fs::read(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(up.direction, Direction::AscendingFromLora);
    assert!(up.used_ratio <= up.budget_ratio);
}

#[test]
fn relative_output_uses_root_variable() {
    let (t, cfg, _) = setup(TINY);
    let o = bin()
        .args(["probe", "-o", "rel"])
        .arg("-c")
        .arg(&cfg)
        .env(hybrid_lora_cli::OUTPUT_ROOT_ENV, t.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t.path().join("rel").join("probe.ckpt").exists());
}
