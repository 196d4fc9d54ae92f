use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecgchip(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgchip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let o = ecgchip(&[flag], dir.path());
        assert_eq!(code(&o), 0, "{flag}");
        assert!(!o.stdout.is_empty());
    }
    assert_eq!(code(&ecgchip(&["run", "--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ecgchip(&[], dir.path())), 1);
    assert_eq!(code(&ecgchip(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&ecgchip(&["gen", "--bpm", "fast"], dir.path())), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&ecgchip(&["run", "--record", "missing.csv"], p)), 2);
    assert_eq!(code(&ecgchip(&["run", "-s", "synthetic.bpm=400"], p)), 2);
    assert_eq!(code(&ecgchip(&["run", "-s", "chip.no_such_key=1"], p)), 2);
    fs::write(p.join("bad.csv"), "index,millivolts\n0,0.1\n1,oops\n").unwrap();
    assert_eq!(code(&ecgchip(&["run", "--record", "bad.csv"], p)), 2);
    assert_eq!(code(&ecgchip(&["spi-dump", "missing.csv"], p)), 2);
}

#[test]
fn generate_run_score_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = ecgchip(&["gen", "--bpm", "90", "--duration", "30", "--out", "rec.csv", "--peaks", "peaks.csv"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = ecgchip(&["run", "--record", "rec.csv", "--annotations", "peaks.csv", "--out", "out"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("detections 45"), "{stdout}");
    assert!(stdout.contains("sensitivity 1.0000"), "{stdout}");

    let o = ecgchip(&["score", "out/detections.csv", "peaks.csv"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("\"true_positives\": 45"));

    let o = ecgchip(&["spi-dump", "out/spi_transcript.csv"], p);
    assert_eq!(code(&o), 0);
    let dump = String::from_utf8(o.stdout).unwrap();
    assert!(dump.contains("RegWrite { addr: 0, value: 1 }"));
    assert!(dump.contains("-> Ecg("));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("run.toml"), "seed = 3\n[synthetic]\nbpm = 120.0\nduration_s = 20.0\n").unwrap();
    let o = ecgchip(&["run", "-c", "run.toml", "-s", "synthetic.duration_s=10.0", "--print-config"], p);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("bpm = 120.0") && text.contains("duration_s = 10.0") && text.contains("seed = 3"));

    let o = ecgchip(&["run", "-c", "run.toml", "-o", "a"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("detections 40"));
}

#[test]
fn fifo_fuzz_small_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecgchip(&["fifo-fuzz", "--runs", "8", "--words", "200", "--json", "fuzz.json"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("failures 0"));
    assert!(dir.path().join("fuzz.json").is_file());
    assert_eq!(code(&ecgchip(&["fifo-fuzz", "--metastability", "2"], dir.path())), 2);
}
