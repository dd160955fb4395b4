use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_otfs-scma"))
}

fn quick_args(out: &Path) -> Vec<String> {
    [
        "--override",
        "grid.m=8",
        "--override",
        "grid.n=4",
        "--override",
        "ebn0_db=[6.0, 60.0]",
        "--override",
        "budget.max_frames=5",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

#[test]
fn simulate_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let st = bin().arg("compare").args(quick_args(out)).output().unwrap();
        assert!(st.status.success());
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# otfs-scma results v1");
    assert_eq!(lines.len(), 2 + 8);
    assert!(dir.path().join("a.csv.meta.json").exists());
}

#[test]
fn config_file_with_relative_graph_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("g.json"),
        r#"{"J": 6, "neighbors": [[5, 1, 2], [0, 2, 4], [0, 1, 3], [2, 4, 5], [1, 3, 5], [0, 3, 4]]}"#,
    )
    .unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n[coop]\ngraph = \"g.json\"\n").unwrap();
    let out = bin()
        .arg("validate-config")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("seed = 5"));
}

#[test]
fn invalid_config_is_rejected() {
    let out = bin()
        .args(["validate-config", "--override", "ebn0_db=[]"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["validate-config", "--override", "grid.mm=3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn codebook_metrics_prints_json() {
    let out = bin().arg("codebook-metrics").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("{\"med\": 0.5"), "{text}");
}

#[test]
fn frame_log_shares_channels_across_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("frames.csv");
    let st = bin()
        .arg("compare")
        .args(quick_args(&dir.path().join("r.csv")))
        .arg("--frame-log")
        .arg(&log)
        .output()
        .unwrap();
    assert!(st.status.success());
    let text = std::fs::read_to_string(&log).unwrap();
    let mut by_frame = std::collections::BTreeMap::<(String, String), Vec<String>>::new();
    for line in text.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        by_frame
            .entry((f[0].into(), f[2].into()))
            .or_default()
            .push(f[3].into());
    }
    assert_eq!(by_frame.len(), 10);
    for prints in by_frame.values() {
        assert_eq!(prints.len(), 4);
        assert!(prints.iter().all(|p| p == &prints[0]));
    }
}
