use std::path::Path;
use std::process::{Command, Output};

fn fal(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fal"));
    cmd.args(args).env_remove(fal_cli::OUT_DIR_ENV);
    if let Some(p) = env_out {
        cmd.env(fal_cli::OUT_DIR_ENV, p);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn prop44_summary_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "experiment = \"prop44\"\nseeds = [1]\n[prop44]\nepsilon = 0.02\n");
    let out = tmp.path().join("out");
    let o = fal(&["run", "prop44", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["experiment"], "prop44");
    assert!((s["per_seed"]["1"]["kappa_star"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    assert!((s["per_seed"]["1"]["kappa_hat"].as_f64().unwrap() - 1.0202).abs() < 1e-4);
    assert!(s["aggregate"]["mean"].is_object() && s["aggregate"]["std"].is_object());
    assert!(s["rng_algorithm"].as_str().unwrap().contains("splitmix64"));
}

#[test]
fn protonet_four_seeds_four_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeds = [1, 10, 100, 1000]\n[protonet]\nsteps = 4\n");
    let out = tmp.path().join("out");
    let o = fal(&["run", "protonet", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["protonet_seed1.csv", "protonet_seed10.csv", "protonet_seed100.csv", "protonet_seed1000.csv", "summary.json"]);
    assert_eq!(summary(&out)["seeds"], serde_json::json!([1, 10, 100, 1000]));
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[proseco]\nsteps = 5\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = fal(&["run", "proseco", "--config", &cfg, "--seed", "3", "--seed", "4", "--out", d.to_str().unwrap()], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["proseco_seed3.csv", "proseco_seed4.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("proseco_seed3.csv")).unwrap(), std::fs::read(a.join("proseco_seed4.csv")).unwrap());
}

#[test]
fn env_var_overrides_config_but_not_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let from_file = tmp.path().join("file");
    let from_env = tmp.path().join("env");
    let from_flag = tmp.path().join("flag");
    let cfg = write_config(tmp.path(), &format!("seeds = [2]\nout_dir = {:?}\n", from_file.to_str().unwrap()));
    assert!(fal(&["run", "carbon", "--config", &cfg], None).status.success());
    assert!(from_file.join("carbon_seed2.csv").exists());
    assert!(fal(&["run", "carbon", "--config", &cfg], Some(&from_env)).status.success());
    assert!(from_env.join("carbon_seed2.csv").exists());
    assert!(fal(&["run", "carbon", "--config", &cfg, "--out", from_flag.to_str().unwrap()], Some(&from_env)).status.success());
    assert!(from_flag.join("summary.json").exists());
}

#[test]
fn bad_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let cases = [
        ("seeds = [1]\n", "resnet"),
        ("seeds = [1]\n[mtdetr]\nlamda_u = 4.0\n", "mtdetr"),
        ("[prop44]\nepsilon = 0.02\n", "prop44"),
        ("seeds = [1]\n[prop44]\nepsilon = 2.0\n", "prop44"),
        ("experiment = \"prop44\"\nseeds = [1]\n", "protonet"),
        ("seeds = [1]\n[carbon]\nshares = [0.5, 0.6, 0.1]\n", "carbon"),
        ("seeds = [1\n", "carbon"),
    ];
    for (text, exp) in cases {
        let cfg = write_config(tmp.path(), text);
        let o = fal(&["run", exp, "--config", &cfg, "--out", out], None);
        assert_eq!(o.status.code(), Some(2), "{text:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let o = fal(&["run", "prop44", "--config", "/nonexistent/cfg.toml", "--seed", "1", "--out", out], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(out).join("summary.json").exists());
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeds = [1]\n[protonet]\nlr = 1e200\nsteps = 20\n");
    let o = fal(&["run", "protonet", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn carbon_command() {
    let o = fal(&["carbon", "--hours", "2000", "--watts", "300", "--shares", "0.47,0.34,0.19", "--intensities", "379,633,442"], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("= 286.4 kgCO2eq"));
    let o = fal(&["carbon", "--hours", "85000"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("= 12171.9 kgCO2eq"));
    let o = fal(&["carbon", "--hours", "0"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("= 0.0 kgCO2eq"));
    let o = fal(&["carbon", "--hours", "10", "--shares", "0.5,0.4,0.2"], None);
    assert_eq!(o.status.code(), Some(2));
}
