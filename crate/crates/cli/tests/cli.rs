use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const EXE: &str = env!("CARGO_BIN_EXE_einfuse");

fn einfuse(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn builtin_cascades_validate() {
    for name in [
        "mamba1",
        "pair-ri",
        "pair-rsb",
        "pair-rsp",
        "pair-rd",
        "chain5",
        "running-product",
    ] {
        let o = einfuse(&["validate", "--builtin", name]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).starts_with("valid: "));
    }
}

#[test]
fn invalid_cascade_exits_with_one_and_lists_problems() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "bad.ein",
        "rank M(2)\ntensor A : M\ntensor Z : M\neinsum 1: Z[m] = A[m] * Q[m]\neinsum 2: Z[m] = A[m]\n",
    );
    let o = einfuse(&["validate", "--cascade", &path, "--error-json"]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["status"], "error");
    assert_eq!(v["exit_code"], 1);
    let kinds: Vec<String> = v["diagnostics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["kind"].as_str().unwrap_or_default().to_string())
        .collect();
    assert!(kinds.iter().any(|k| k == "UndeclaredTensor"), "{kinds:?}");
    assert!(kinds.iter().any(|k| k == "MultipleProducers"), "{kinds:?}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(
        einfuse(&["stitch", "--builtin", "nope"]).status.code(),
        Some(2)
    );
    assert_eq!(
        einfuse(&["stitch", "--builtin", "chain5", "--policy", "greedy"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        einfuse(&["validate", "--cascade", "/no/such/file.ein"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(einfuse(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(einfuse(&[]).status.code(), Some(2));

    let o = einfuse(&[
        "compare",
        "--builtin",
        "mamba1",
        "--params",
        "B=0",
        "--error-json",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["kind"], "usage");
}

#[test]
fn stitch_reports_twelve_groups_for_interleaved_only() {
    let o = einfuse(&["stitch", "--builtin", "mamba1", "--policy", "ri"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).starts_with("policy ri: 12 fusion groups"),
        "{}",
        stdout(&o)
    );
    let o = einfuse(&["stitch", "--builtin", "mamba1", "--policy", "fully-fused"]);
    assert!(
        stdout(&o).starts_with("policy fully-fused: 1 fusion groups"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn lower_prints_the_fused_listing() {
    let o = einfuse(&["lower", "--builtin", "pair-rsb", "--policy", "ri-rsb"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("Z_reg += A[m,k] * B[k]  # E1"), "{text}");
    assert!(text.contains("Y[m] = Z_reg / C[m]  # E2"), "{text}");
}

#[test]
fn run_reports_equivalence_for_every_policy() {
    let o = einfuse(&["run", "--builtin", "mamba1", "--tiny"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    for policy in ["ri:", "ri-rsb:", "ri-rsb-rsp:", "fully-fused:"] {
        let line = text
            .lines()
            .find(|l| l.starts_with(policy))
            .unwrap_or_else(|| panic!("{policy} missing:\n{text}"));
        assert!(line.contains("EQUIVALENT"), "{line}");
    }
}

#[test]
fn cost_and_compare_write_csv_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = einfuse(&[
        "cost",
        "--builtin",
        "mamba1",
        "--tiny",
        "--policy",
        "unfused,ri",
        "--out",
        out,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let cost = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert!(
        cost.starts_with("variant,phase,group_id,einsum_ids,bound,"),
        "{cost}"
    );
    assert!(cost.lines().any(|l| l.starts_with("ri,prefill,")));
    let bare = einfuse(&[
        "cost",
        "--builtin",
        "chain5",
        "--policy",
        "ri-rsb-rsp",
        "--phase",
        "prefill",
    ]);
    assert!(stdout(&bare).starts_with("variant,phase,group_id,einsum_ids,bound,"));

    let o = einfuse(&["compare", "--builtin", "mamba1", "--tiny", "--out", out]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csvs: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert!(!csvs.is_empty());
    for name in csvs {
        let text = fs::read_to_string(dir.path().join(&name)).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let width = header.split(',').count();
        assert!(width > 1, "{name}: {header}");
        assert!(
            lines.all(|l| l.split(',').count() == width),
            "{name}: ragged rows"
        );
    }
}

#[test]
fn manifest_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = einfuse(&[
        "compare",
        "--builtin",
        "mamba1",
        "--tiny",
        "--scenarios",
        "16:4,4:16",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let manifest = first.join("manifest.json");
    let again = einfuse(&["--manifest", manifest.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(o.stdout, again.stdout);

    let mut files: Vec<_> = fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let before: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    let third = einfuse(&["--manifest", manifest.to_str().unwrap()]);
    assert_eq!(third.status.code(), Some(0));
    let after: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn hardware_file_changes_latency() {
    let dir = tempfile::tempdir().unwrap();
    let slow = write(
        dir.path(),
        "slow.hw",
        "# a tenth of the default bandwidth\nbandwidth_bytes_per_s = 1e11\n",
    );
    let base = einfuse(&[
        "cost",
        "--builtin",
        "mamba1",
        "--tiny",
        "--policy",
        "unfused",
        "--phase",
        "prefill",
    ]);
    let slowed = einfuse(&[
        "cost",
        "--builtin",
        "mamba1",
        "--tiny",
        "--policy",
        "unfused",
        "--phase",
        "prefill",
        "--hw",
        &slow,
    ]);
    assert_eq!(
        slowed.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&slowed.stderr)
    );
    assert_ne!(base.stdout, slowed.stdout);

    let broken = write(dir.path(), "broken.hw", "pes_2d = 0\n");
    let o = einfuse(&["cost", "--builtin", "chain5", "--hw", &broken]);
    assert_eq!(o.status.code(), Some(2));
}
