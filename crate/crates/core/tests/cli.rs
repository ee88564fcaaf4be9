use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agestruct::io::{parse_dataset, read_graph};
use agestruct::search::read_results;

fn agestruct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agestruct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", s(dir)];
    args.extend_from_slice(extra);
    let out = agestruct(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn inputs(dir: &Path) -> (String, String) {
    (
        s(&dir.join("data.csv")).to_string(),
        s(&dir.join("adjacency.txt")).to_string(),
    )
}

#[test]
fn simulate_defaults_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    for f in ["data.csv", "adjacency.txt", "truth.json", "rates.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let g = read_graph(&dir.path().join("adjacency.txt")).unwrap();
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let d = parse_dataset(text.as_bytes(), Some(&g)).unwrap();
    let mut again = Vec::new();
    agestruct::io::write_dataset_to(&mut again, &d).unwrap();
    assert_eq!(String::from_utf8(again).unwrap(), text);
}

#[test]
fn simulate_is_seed_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simulate(a.path(), &["--seed", "11"]);
    simulate(b.path(), &["--seed", "11"]);
    for f in ["data.csv", "truth.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn simulate_full_size_lattice_row_count() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        &[
            "--rows",
            "10",
            "--cols",
            "10",
            "--periods",
            "7",
            "--ages",
            "16",
            "--spec",
            "delta=iid",
        ],
    );
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 11200);
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"simulate": {"spec": "delta=rw1;gamma=rw1", "ages": 8,
            "population": {"kind": "constant", "population": 1e8}}}"#,
    )
    .unwrap();
    let clean = dir.path().join("clean");
    simulate(&clean, &["--config", s(&config)]);
    let (data, adj) = inputs(&clean);
    let out = agestruct(&[
        "check",
        "--data",
        &data,
        "--adjacency",
        &adj,
        "--out",
        s(&clean),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = fs::read_to_string(clean.join("proportionality.csv")).unwrap();
    assert!(report.starts_with("area_id,period,slope,r2,flag,assessed\n"));
    assert!(report
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(4) == Some("false")));
    let points = fs::read_to_string(clean.join("proportionality_points.csv")).unwrap();
    assert!(points.starts_with("area_id,period,age_group,q,rate\n"));

    let bent = dir.path().join("bent");
    simulate(&bent, &["--config", s(&config), "--violation", "2"]);
    let (data, adj) = inputs(&bent);
    let out = agestruct(&[
        "check",
        "--data",
        &data,
        "--adjacency",
        &adj,
        "--out",
        s(&bent),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report = fs::read_to_string(bent.join("proportionality.csv")).unwrap();
    assert!(report.lines().any(|l| l.split(',').nth(4) == Some("true")));

    let broken = dir.path().join("broken.csv");
    fs::write(
        &broken,
        "area_id,period,observed,population\nr0c0,t1,3,100\n",
    )
    .unwrap();
    let out = agestruct(&[
        "check",
        "--data",
        s(&broken),
        "--adjacency",
        &adj,
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 1") && msg.contains("age_group"), "{msg}");
}

#[test]
fn fit_two_interaction_model_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        &[
            "--rows",
            "3",
            "--cols",
            "3",
            "--periods",
            "4",
            "--ages",
            "3",
        ],
    );
    let (data, adj) = inputs(dir.path());
    let run = |out: &Path| {
        let o = agestruct(&[
            "fit",
            "--data",
            &data,
            "--adjacency",
            &adj,
            "--out",
            s(out),
            "--spec",
            "delta=rw1;gamma=rw1;z1=II;z2=II;z3=-",
            "--seed",
            "5",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        fs::read(out.join("fit.json")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    let doc: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(doc["spec"], "delta=rw1;gamma=rw1;z1=II;z2=II;z3=-");
    let effects = fs::read_to_string(dir.path().join("a/fit_effects.csv")).unwrap();
    assert!(effects.starts_with("block,area,period,age,mean,sd,exp_mean\n"));
}

#[test]
fn fit_rejects_interaction_without_main_effect() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        &[
            "--rows",
            "2",
            "--cols",
            "2",
            "--periods",
            "3",
            "--ages",
            "3",
        ],
    );
    let (data, adj) = inputs(dir.path());
    let out = agestruct(&[
        "fit",
        "--data",
        &data,
        "--adjacency",
        &adj,
        "--out",
        s(dir.path()),
        "--spec",
        "delta=-;gamma=-;z1=I;z2=-;z3=-",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("fit.json").exists());
}

#[test]
fn search_specs_file_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        &[
            "--rows",
            "2",
            "--cols",
            "3",
            "--periods",
            "3",
            "--ages",
            "3",
        ],
    );
    let (data, adj) = inputs(dir.path());
    let specs = dir.path().join("specs.txt");
    fs::write(
        &specs,
        "delta=rw1\ndelta=iid;gamma=rw1\n# comment\ndelta=rw1;gamma=rw1;z1=II\n",
    )
    .unwrap();
    let out_dir = dir.path().join("search");
    let run = |resume: bool| {
        let mut args = vec![
            "search",
            "--data",
            &data,
            "--adjacency",
            &adj,
            "--out",
            s(&out_dir),
            "--specs-file",
            s(&specs),
            "--seed",
            "9",
        ];
        if resume {
            args.push("--resume");
        }
        let o = agestruct(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        read_results(&out_dir.join("search_results.csv")).unwrap()
    };
    let first = run(false);
    assert_eq!(first.len(), 3);
    let summary = fs::read_to_string(out_dir.join("search_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    assert!(summary.starts_with("family,delta,gamma,zeta1,zeta2,zeta3,waic\n"));

    // Drop the last row as if the run had been interrupted.
    let text = fs::read_to_string(out_dir.join("search_results.csv")).unwrap();
    let kept: Vec<&str> = text.lines().take(3).collect();
    fs::write(out_dir.join("search_results.csv"), kept.join("\n") + "\n").unwrap();
    let second = run(true);
    assert_eq!(second.len(), 3);
    // Reused rows keep their recorded wall times; the refit row matches bit for bit.
    assert_eq!(first[0], second[0]);
    assert_eq!(first[1], second[1]);
    assert_eq!(first[2].waic.to_bits(), second[2].waic.to_bits());
}
