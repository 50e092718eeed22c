use std::process::Command;

fn kp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kp"));
    c.env_remove("KP_SEED");
    c
}

fn solve_args(out: &std::path::Path) -> Vec<String> {
    [
        "solve", "--matrix", "gen:poisson2d:8", "--method", "ppcg,pcg", "--nodes", "4", "--nredu", "1", "--fail-at", "0.5",
        "--victims", "2", "--reps", "1", "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

#[test]
fn solve_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let st = kp().args(solve_args(dir.path())).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("poisson2d_8,pcg,"));
    assert!(rows[1].starts_with("poisson2d_8,ppcg,"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json[1]["failure"]["recovery"][0]["failed_ranks"][0], 2);
}

#[test]
fn seed_env_changes_the_right_hand_side() {
    let run = |seed: Option<&str>| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = kp();
        if let Some(s) = seed {
            c.env("KP_SEED", s);
        }
        assert!(c.args(solve_args(dir.path())).status().unwrap().success());
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
        (v[0]["seed"].as_u64().unwrap(), v[0]["baseline"]["gamma_trace"][0].as_f64().unwrap())
    };
    let (s1, g1) = run(None);
    let (s2, g2) = run(Some("7"));
    assert_eq!((s1, s2), (42, 7));
    assert_ne!(g1, g2);
}

#[test]
fn dump_plan_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = solve_args(dir.path());
    args.push("--dump-redundancy-plan".into());
    assert!(kp().args(args).status().unwrap().success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("redundancy_plan.json")).unwrap()).unwrap();
    let rows = v["poisson2d_8"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for key in ["node", "k", "target", "pattern_sends", "redundant_sends"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn failure_script_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("f.json");
    std::fs::write(&script, r#"[{"at_iteration": 5, "phase": "before_reduction_complete", "victims": [1]}]"#).unwrap();
    let st = kp()
        .args(["solve", "--matrix", "gen:tridiag:64", "--method", "pcg", "--nodes", "4", "--nredu", "1", "--reps", "1"])
        .arg("--failure-script")
        .arg(&script)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    for args in [
        vec!["solve", "--matrix", "gen:poisson2d:8", "--method", "gmres", "--out", &out],
        vec!["solve", "--matrix", "gen:poisson2d:8", "--nodes", "4", "--fail-at", "0.5", "--out", &out],
        vec!["solve", "--matrix", "gen:poisson2d:8", "--nodes", "4", "--nredu", "1", "--fail-at", "0.5", "--victims", "0,1", "--out", &out],
        vec!["solve", "--matrix", "gen:poisson2d:8", "--fail-phase", "during", "--out", &out],
        vec!["solve", "--matrix", "/nonexistent.mtx", "--nodes", "2", "--reps", "1", "--out", &out],
    ] {
        let st = kp().args(&args).output().unwrap();
        assert!(!st.status.success(), "{args:?}");
        assert!(!st.stderr.is_empty());
    }
}
