use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dsnsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsnsim")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const FLEET: &str =
    "machine_count = 1\n\n[[generation]]\nname = \"small\"\nram_bytes = 17179869184\ncores = 8\nproportion = 100\n";
const TRACE: &str = "vm_id,kind,time,cores,memory_bytes\nvm1,start,0,2,4294967296\nvm1,stop,100\n";

#[test]
fn replay_writes_reports() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.csv", TRACE);
    let fleet = write(dir.path(), "f.toml", FLEET);
    let out = dir.path().join("out");
    let o =
        dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--variant", "opt1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let histogram = fs::read_to_string(out.join("opt1-histogram.csv")).unwrap();
    assert_eq!(histogram, "pct_1,pct_2,pct_3,pct_gt3\n100.000,0.000,0.000,0.000\n");
    let vms = fs::read_to_string(out.join("opt1-vms.csv")).unwrap();
    assert_eq!(vms.lines().nth(1), Some("vm1,0,0,4294967296,1,dsn,0"));
}

#[test]
fn replay_all_variants_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.csv", TRACE);
    let fleet = write(dir.path(), "f.toml", FLEET);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dsnsim(&[
            "replay",
            "--trace",
            &trace,
            "--fleet",
            &fleet,
            "--variant",
            "all",
            "--jobs",
            "4",
            "--format",
            "json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        ["baseline", "opt1", "opt2", "dynamic"].map(|v| fs::read(out.join(format!("{v}-report.json"))).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn replay_summary_without_out() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.csv", TRACE);
    let fleet = write(dir.path(), "f.toml", FLEET);
    let o = dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--variant", "baseline"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("baseline: starts=1 placed=1 rejected=0"), "{}", stdout(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let fleet = write(dir.path(), "f.toml", FLEET);
    let o = dsnsim(&["replay", "--trace", "/nonexistent/trace.csv", "--fleet", &fleet]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/trace.csv"));
}

#[test]
fn malformed_trace_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let trace =
        write(dir.path(), "t.csv", "vm_id,kind,time,cores,memory_bytes\nvm1,start,0,2,4096\nvm2,start,5,2,-1\n");
    let fleet = write(dir.path(), "f.toml", FLEET);
    let o = dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.csv", TRACE);
    let fleet = write(dir.path(), "f.toml", FLEET);
    let bad_fleet = write(dir.path(), "bad.toml", "machine_count = 0\ngeneration = []\n");
    assert_eq!(dsnsim(&["replay", "--trace", &trace, "--fleet", &bad_fleet]).status.code(), Some(2));
    assert_eq!(dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--n", "0"]).status.code(), Some(2));
    assert_eq!(dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--variant", "opt3"]).status.code(), Some(2));
    assert_eq!(dsnsim(&["replay", "--trace", &trace]).status.code(), Some(2));
}

#[test]
fn anomaly_threshold() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.csv", "ghost,stop,5\n");
    let fleet = write(dir.path(), "f.toml", FLEET);
    let o = dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--max-anomalies", "0"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("stop for an unknown vm"));
    let o = dsnsim(&["replay", "--trace", &trace, "--fleet", &fleet, "--max-anomalies", "1"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn bootstorm_counts_overflow() {
    let dir = TempDir::new().unwrap();
    let mut snapshot = String::from("vm_id,cores,memory_bytes,host_id,host_ram_bytes,host_cores\n");
    for i in 0..5 {
        snapshot.push_str(&format!("v{i},1,4294967296,h{},17179869184,8\n", i % 2));
    }
    let snap = write(dir.path(), "s.csv", &snapshot);
    let fleet = write(dir.path(), "f.toml", FLEET);
    // one 16 GiB machine holds four 4 GiB VMs
    let o = dsnsim(&["bootstorm", "--snapshot", &snap, "--fleet", &fleet, "--variant", "opt2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("starts=5 placed=4 rejected=1"), "{}", stdout(&o));
    assert!(stderr(&o).contains("replace the snapshot's hosts"));
    // the snapshot's own two hosts hold all five
    let o = dsnsim(&["bootstorm", "--snapshot", &snap, "--variant", "opt2"]);
    assert!(stdout(&o).contains("starts=5 placed=5 rejected=0"), "{}", stdout(&o));
    let bad = write(dir.path(), "bad.csv", "v0,1,4096,h0,8192\n");
    assert_eq!(dsnsim(&["bootstorm", "--snapshot", &bad]).status.code(), Some(3));
}

#[test]
fn gen_trace_is_seeded() {
    let a = dsnsim(&["gen-trace", "--vms", "200", "--seed", "9"]);
    let b = dsnsim(&["gen-trace", "--vms", "200", "--seed", "9"]);
    let c = dsnsim(&["gen-trace", "--vms", "200", "--seed", "10"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn gen_trace_covers_fourteen_flavors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.csv");
    let o =
        dsnsim(&["gen-trace", "--vms", "10000", "--seed", "1", "--lifetime", "never", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = dsn_sim::trace::parse_trace(fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(dsn_sim::report::demand_size_cdf(&trace).distinct, 14);
}

#[test]
fn gen_trace_with_zero_vms_is_empty() {
    let o = dsnsim(&["gen-trace", "--vms", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    assert_eq!(dsnsim(&["gen-trace", "--inter-arrival", "never"]).status.code(), Some(2));
}

#[test]
fn translate_examples() {
    let dir = TempDir::new().unwrap();
    let one = write(dir.path(), "one.kv", "n = 3\nhost_bases = 0x40000000\nlimit = 0x140000000\n");
    let two = write(
        dir.path(),
        "two.kv",
        "n = 3\nguest_bases = 0x80000000\nhost_bases = 0x100000000, 0x300000000\nlimit = 0x380000000\n",
    );
    assert_eq!(stdout(&dsnsim(&["translate", "--registers", &one, "--gpa", "0x1000"])).trim(), "0x40001000");
    assert_eq!(stdout(&dsnsim(&["translate", "--registers", &two, "--gpa", "0x80002000"])).trim(), "0x300002000");
    let o = dsnsim(&["translate", "--registers", &one, "--gpa", "0x100000000"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("violation"), "{}", stdout(&o));
    let broken = write(dir.path(), "broken.kv", "n = 3\nhost_bases = 0x10\n");
    assert_eq!(dsnsim(&["translate", "--registers", &broken, "--gpa", "0"]).status.code(), Some(3));
}

#[test]
fn costmodel_examples() {
    let dir = TempDir::new().unwrap();
    let counters = write(dir.path(), "c.kv", "n_tlb = 1e6\nc_1d = 100\nc_2d = 600\n");
    let cycles = |mode: &str| {
        let o = dsnsim(&["costmodel", "--counters", &counters, "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["total_cycles"].as_f64().unwrap()
    };
    assert_eq!(cycles("dsn"), 1e8);
    assert_eq!(cycles("shadow"), cycles("dsn"));
    assert_eq!(cycles("ept") / cycles("dsn"), 6.0);
    let o = dsnsim(&["costmodel", "--counters", &counters, "--mode", "all"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().map(Vec::len), Some(3));
}

#[test]
fn help_documents_flags() {
    let o = dsnsim(&["replay", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = stdout(&o);
    for flag in ["--trace", "--fleet", "--variant", "--n", "--seed", "--period-hours", "--out", "--format", "--jobs"] {
        assert!(help.contains(flag), "missing {flag}");
    }
}
