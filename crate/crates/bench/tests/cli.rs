use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().expect("bench binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).display().to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli");
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs the broadcast scenario and returns its trace path.
fn broadcast_trace(tag: &str) -> PathBuf {
    let (csv, trace) = (scratch(&format!("{tag}.csv")), scratch(&format!("{tag}.jsonl")));
    let o = bench(&[
        "run",
        "--scenario",
        "broadcast",
        "--config",
        &config("desk8.toml"),
        "--seed",
        "3",
        "--out",
        csv.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let rows = fs::read_to_string(&csv).unwrap();
    let header = rows.lines().next().unwrap();
    assert_eq!(
        header,
        "scenario,n_nodes,object_bytes,d,arrival_interval_s,trial,completed,latency_s,bytes_on_wire,predicted_T_d"
    );
    assert_eq!(rows.lines().count(), 3);
    trace
}

#[test]
fn list_names_every_scenario() {
    let o = bench(&["list"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(
        names,
        ["ablation_d", "allreduce", "broadcast", "fault_broadcast", "fault_reduce", "gather", "reduce", "rtt", "staggered"]
    );
}

#[test]
fn clean_trace_replays() {
    let trace = broadcast_trace("clean");
    let o = bench(&["replay", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("AssertionFailed"));
}

#[test]
fn duplicated_chunk_fails_replay() {
    let trace = broadcast_trace("dup");
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let at = lines.iter().position(|l| l.contains(r#""ev":"chunk_applied""#)).expect("trace has chunks");
    lines.insert(at + 1, lines[at]);
    let tampered = scratch("dup-tampered.jsonl");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();

    let o = bench(&["replay", "--trace", tampered.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("AssertionFailed exactly-once"), "{}", stdout(&o));
}

#[test]
fn bad_input_is_an_error_not_a_failure() {
    let out = scratch("unused.csv");
    let o = bench(&["run", "--scenario", "nope", "--config", &config("desk16.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown scenario"));

    let o = bench(&["run", "--scenario", "reduce", "--config", &config("tcp4.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));
}

#[test]
fn fault_reduce_passes_its_own_checks() {
    let out = scratch("fault_reduce.csv");
    let o = bench(&[
        "run",
        "--scenario",
        "fault_reduce",
        "--config",
        &config("desk16.toml"),
        "--trials",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("ok oracle (12/12)"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 13);
}
