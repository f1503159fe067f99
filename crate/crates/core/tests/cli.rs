use std::fs;
use std::path::Path;

use revrisk::cli::{main_with_args, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_VERIFICATION};

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("revrisk").chain(args.iter().copied()))
}

const UNIFORM2: &str = r#"{"n": 2, "k": 1, "dists": [{"family": "uniform"}]}"#;
const UNIFORM3_1: &str = r#"{"n": 3, "k": 1, "dists": [{"family": "uniform"}]}"#;
const UNIFORM3_2: &str = r#"{"n": 3, "k": 2, "dists": [{"family": "uniform"}]}"#;
const UNIFORM5_3: &str = r#"{"n": 5, "k": 3, "dists": [{"family": "uniform"}]}"#;

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn verify_wpb_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "uniform2.json", UNIFORM2);
    let out = dir.path().join("ret.csv");
    assert_eq!(
        run(&[
            "verify",
            "--env",
            &env,
            "--rule",
            "wpb",
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let (header, rows) = read_csv(&out);
    assert_eq!(
        header,
        ["bidder", "v", "expected_payment", "z", "abs_error"]
    );
    for r in rows {
        assert!(r[4].parse::<f64>().unwrap() < 1e-8);
    }
}

#[test]
fn psi_on_single_item_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "u31.json", UNIFORM3_1);
    assert_eq!(run(&["solve-psi", "--env", &env]), EXIT_CONFIG);
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "u2.json", UNIFORM2);
    assert_eq!(
        run(&["verify", "--env", "/nonexistent/env.json", "--rule", "wpb"]),
        EXIT_CONFIG
    );
    assert_eq!(
        run(&["verify", "--env", &env, "--rule", "dutch"]),
        EXIT_CONFIG
    );
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"n": 2, "k": 1, "dists": [{"family": "uniform"}], "colour": 1}"#,
    );
    assert_eq!(
        run(&["verify", "--env", &bad, "--rule", "wpb"]),
        EXIT_CONFIG
    );
    assert_eq!(
        run(&[
            "simulate",
            "--env",
            &env,
            "--rule",
            "wpb",
            "--samples",
            "1.5"
        ]),
        EXIT_CONFIG
    );
}

#[test]
fn compare_flags_the_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "u53.json", UNIFORM5_3);
    let out = dir.path().join("cmp.csv");
    let args = [
        "compare",
        "--formats",
        "wpb,uniform_kplus1",
        "--env",
        &env,
        "--samples",
        "2e5",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(run(&args), EXIT_OK);
    let (header, rows) = read_csv(&out);
    assert_eq!(header.last().unwrap(), "left_le_right");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][9], "true");
    let var_d: f64 = rows[0][4].parse().unwrap();
    let var_u: f64 = rows[0][5].parse().unwrap();
    assert!(var_d < var_u);

    let first = fs::read(&out).unwrap();
    assert_eq!(run(&args), EXIT_OK);
    assert_eq!(
        fs::read(&out).unwrap(),
        first,
        "same seed must give identical bytes"
    );
}

#[test]
fn simulate_by_quadrature_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "u2.json", UNIFORM2);
    let out = dir.path().join("sim.csv");
    let args = [
        "simulate",
        "--env",
        &env,
        "--rule",
        "all_pay",
        "--method",
        "quadrature",
        "--risk",
        "power:2,exp:1,hinge:0.3",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(run(&args), EXIT_OK);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["statistic", "value", "stderr"]);
    let get = |name: &str| -> f64 {
        rows.iter().find(|r| r[0] == name).unwrap()[1]
            .parse()
            .unwrap()
    };
    assert!((get("mean") - 1.0 / 3.0).abs() < 1e-10);
    assert!((get("variance") - 2.0 / 45.0).abs() < 1e-10);
    assert!((get("risk:power:2") - get("second_moment")).abs() < 1e-12);
    assert_eq!(rows.len(), 6);
}

#[test]
fn scenario_files_run_each_task() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            r#"{"kind": "solve-asymmetric", "grid": 256}"#,
            r#"{"n": 2, "k": 1, "dists": [{"family": "uniform"}, {"family": "power", "alpha": 2}]}"#,
            vec!["bidder", "v", "pi", "G_at_pi", "residual"],
        ),
        (
            r#"{"kind": "solve-psi", "grid": 64, "debug_bounds": true}"#,
            UNIFORM3_2,
            vec!["v", "N", "D", "psi", "H", "K", "Y"],
        ),
        (
            r#"{"kind": "solve-qp", "m": 20}"#,
            UNIFORM3_2,
            vec!["v1", "v2", "P1", "P2"],
        ),
        (
            r#"{"kind": "histogram", "rule": "wpb", "bins": 10, "samples": "1e4"}"#,
            UNIFORM2,
            vec!["bin_lo", "bin_hi", "count", "density"],
        ),
        (
            r#"{"kind": "simulate", "rule": "eso_futo", "samples": 1e4, "risk": "exp:2"}"#,
            UNIFORM3_2,
            vec!["statistic", "value", "stderr"],
        ),
    ];
    for (j, (task, env, header)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("out{j}.csv"));
        let cfg = format!(
            r#"{{"env": {env}, "task": {task}, "out": {:?}, "seed": 4}}"#,
            out.to_str().unwrap()
        );
        let path = write(dir.path(), &format!("cfg{j}.json"), &cfg);
        assert_eq!(run(&["run", "--config", &path]), EXIT_OK, "{task}");
        let (h, rows) = read_csv(&out);
        assert_eq!(&h, header, "{task}");
        assert!(!rows.is_empty());
        for r in rows {
            assert_eq!(r.len(), h.len());
            for cell in &r[1..] {
                assert!(
                    cell.parse::<f64>().is_ok() || cell == "true" || cell == "false",
                    "{cell}"
                );
            }
        }
    }
}

#[test]
fn qp_surface_files() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "u32.json", UNIFORM3_2);
    let out = dir.path().join("qp.csv");
    assert_eq!(
        run(&[
            "solve-qp",
            "--env",
            &env,
            "--m",
            "12",
            "--surface",
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    for name in ["qp.P1.csv", "qp.P2.csv"] {
        let (h, rows) = read_csv(&dir.path().join(name));
        assert_eq!(h.len(), 13);
        assert_eq!(rows.len(), 12);
        assert!(rows[0][2].parse::<f64>().unwrap().is_nan());
    }
}

#[test]
fn verification_and_convergence_failures() {
    let dir = tempfile::tempdir().unwrap();
    let asym = write(
        dir.path(),
        "asym.json",
        r#"{"n": 2, "k": 1, "dists": [{"family": "uniform"}, {"family": "power", "alpha": 2}]}"#,
    );
    assert_eq!(
        run(&[
            "solve-asymmetric",
            "--env",
            &asym,
            "--grid",
            "256",
            "--max-iter",
            "2"
        ]),
        EXIT_NOT_CONVERGED
    );
    assert_eq!(
        run(&[
            "verify",
            "--env",
            &asym,
            "--rule",
            "pi_rule",
            "--pi-grid",
            "256",
            "--threshold",
            "1e-14"
        ]),
        EXIT_VERIFICATION
    );
    let env = write(dir.path(), "u32.json", UNIFORM3_2);
    assert_eq!(
        run(&["solve-qp", "--env", &env, "--m", "40", "--max-iter", "5"]),
        EXIT_NOT_CONVERGED
    );
}

#[test]
fn version_flag() {
    assert_eq!(run(&["--version"]), EXIT_OK);
}
