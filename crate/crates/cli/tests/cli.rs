use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distaudit"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn shipped_configs_reproduce_golden_outputs() {
    let golden_root = configs().join("golden");
    let mut checked = 0;
    for entry in fs::read_dir(&golden_root).unwrap() {
        let golden = entry.unwrap().path();
        let name = golden.file_name().unwrap().to_str().unwrap().to_string();
        let config = configs().join(format!("{name}.toml"));
        let out = tempfile::tempdir().unwrap();
        let o = run(&["audit", config.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        for file in fs::read_dir(&golden).unwrap() {
            let file = file.unwrap().path();
            let fname = file.file_name().unwrap();
            let expected = fs::read(&file).unwrap();
            let actual = fs::read(out.path().join(fname)).unwrap();
            assert!(expected == actual, "{name}/{} differs from golden", fname.to_string_lossy());
            checked += 1;
        }
    }
    assert!(checked >= 16, "only {checked} golden files compared");
}

#[test]
fn reruns_are_byte_identical() {
    let config = configs().join("p3-runs.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run(&["audit", config.to_str().unwrap(), "--out", d.path().to_str().unwrap()]).status.success());
    }
    for f in ["report.csv", "totals.csv", "summary.csv", "fit.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn analyze_recomputes_the_summary() {
    let golden = configs().join("golden/p1-small");
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "analyze",
        golden.join("report.csv").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for f in ["summary.csv", "fit.json", "means.dat"] {
        assert_eq!(fs::read(golden.join(f)).unwrap(), fs::read(out.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_2_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("p1-small.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, text.replace("trials = 3", "trials = 0")).unwrap();
    let o = run(&["audit", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:2: trials must be at least 1"), "{err}");
    assert!(!dir.path().join("report.csv").exists());

    fs::write(&bad, text.replace("protocol = 1", "protocol = 7")).unwrap();
    let o = run(&["audit", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml:16:"));

    assert_eq!(run(&["gen-sobol"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let o = run(&["analyze", "/nonexistent/report.csv", "--out", "/tmp"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["gen-sobol", "--poly", "x^3+x^2+x+1", "--init", "1,3,7", "--constant", "64"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["gf-roots", "--q", "84", "--coeffs", "1,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn small_subcommands() {
    let o = run(&["gen-sobol", "--poly", "x^3+x^2+1", "--init", "1,3,5", "--constant", "64", "--json"]);
    assert_eq!(stdout(&o), "[0,32,16,48,24,56,8,40,36,4,52,20,60]\n");
    let o = run(&["gf-roots", "--q", "83", "--coeffs", "63,3,36,1"]);
    assert!(stdout(&o).ends_with("roots: 9 13 25\n"), "{}", stdout(&o));
    let o = run(&["gf-roots", "--q", "7919", "--roots", "7918,1,2"]);
    assert!(stdout(&o).ends_with("roots: 1 2 7918\n"), "{}", stdout(&o));
    let o = run(&["recon-demo", "--a", "0110100111", "--b", "0110110111", "--injective", "--m-bar", "24"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("A learns: 0110110111"));
}
