use morphnas::arch::{
    expand_stack, random_architecture, to_json, Activation, Architecture, LayerSpec, Mode, OpKind, RandomLimits, Shape,
};
use morphnas::evaluation::surrogate::surrogate_performance;
use morphnas::resources::estimate;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_morphnas");

fn morphnas(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

const SMOKE: &str = r#"
seed = 7
output = "run"
[reinforce]
branches = 2
steps = 2
episodes = 2
topk = 2
[[constraints]]
metric = "model_size"
upper = 1e5
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn write_arch(dir: &Path, name: &str, arch: &Architecture) -> PathBuf {
    write(dir, name, &to_json(arch).unwrap())
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn smoke_search_emits_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", SMOKE);
    let start = Instant::now();
    let out = morphnas(&["search", "run.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(10));
    let history = String::from_utf8(read(dir.path().join("run/history.jsonl"))).unwrap();
    assert_eq!(history.lines().count(), 8);
    let report = stdout_json(&out);
    assert_eq!(report["completed"], true);
    assert_eq!(report["candidates"], 8);
    for f in ["report.json", "best_architecture.json", "config.json", "checkpoint.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", SMOKE);
    assert!(morphnas(&["search", "run.toml", "--output", "a", "--parallelism", "1"], dir.path()).status.success());
    assert!(morphnas(&["search", "run.toml", "--output", "b", "--parallelism", "4"], dir.path()).status.success());
    for f in ["history.jsonl", "report.json", "checkpoint.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &SMOKE.replace("episodes = 2", "episodes = 3"));
    assert!(morphnas(&["search", "run.toml", "--output", "full"], dir.path()).status.success());

    let first = morphnas(&["search", "run.toml", "--output", "cut", "--stop-after", "1"], dir.path());
    assert!(first.status.success());
    assert_eq!(stdout_json(&first)["completed"], false);
    assert!(!dir.path().join("cut/report.json").exists());
    // a crash between the history write and the next checkpoint leaves extra lines
    let hist = dir.path().join("cut/history.jsonl");
    let mut text = read(&hist);
    text.extend_from_slice(b"{\"partial\":");
    std::fs::write(&hist, text).unwrap();

    let again = morphnas(&["search", "run.toml", "--output", "cut"], dir.path());
    assert_eq!(again.status.code(), Some(2), "existing run needs --resume");
    let resumed = morphnas(&["search", "run.toml", "--output", "cut", "--resume"], dir.path());
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    for f in ["history.jsonl", "report.json", "best_architecture.json"] {
        assert_eq!(read(dir.path().join("full").join(f)), read(dir.path().join("cut").join(f)), "{f}");
    }
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", SMOKE);
    assert!(morphnas(&["search", "run.toml", "--stop-after", "1"], dir.path()).status.success());
    let out = morphnas(&["search", "run.toml", "--resume", "--seed", "8"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inverted_bounds_exit_2_naming_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMOKE}[[constraints]]\nmetric = \"compute_complexity\"\nlower = 50\nupper = 10\n");
    write(dir.path(), "run.toml", &text);
    let out = morphnas(&["search", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("constraints[1]"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &format!("{SMOKE}[reinforce_typo]\nx = 1\n"));
    assert_eq!(morphnas(&["search", "run.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn estimate_single_conv() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::Layers(vec![LayerSpec::conv(3, 32, Activation::None, -1)]);
    write_arch(dir.path(), "conv.json", &arch);
    let out = morphnas(&["estimate", "conv.json", "--input", "32x32x16"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["params"], 3 * 3 * 16 * 32 + 32);
    assert_eq!(v["flops"], 2 * 3 * 3 * 16 * 32 * 32 * 32);
    let bytes = 4 * (4640 + 32 * 32 * 16 + 32 * 32 * 32);
    assert_eq!(v["bytes"], bytes);
    assert!((v["flops_per_byte"].as_f64().unwrap() - 9_437_184.0 / bytes as f64).abs() < 1e-12);
}

#[test]
fn estimate_expands_cells() {
    let dir = tempfile::tempdir().unwrap();
    let input = Shape::new(32, 32, 3);
    let (arch, lowered) = (0..100)
        .map(|s| random_architecture(s, Mode::CellNet, &RandomLimits::default()))
        .find_map(|a| expand_stack(&a, input).ok().filter(|l| estimate(l, input).is_ok()).map(|l| (a, l)))
        .expect("some random cell stacks");
    let want = estimate(&lowered, input).unwrap();
    write_arch(dir.path(), "cell.json", &arch);
    let v = stdout_json(&morphnas(&["estimate", "cell.json"], dir.path()));
    assert_eq!((v["params"].as_u64(), v["flops"].as_u64()), (Some(want.params), Some(want.flops)));
}

#[test]
fn estimate_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", "{\"mode\": \"layer_net\", \"layers\": [");
    assert_eq!(morphnas(&["estimate", "bad.json"], dir.path()).status.code(), Some(2));
    assert_eq!(morphnas(&["estimate", "missing.json"], dir.path()).status.code(), Some(2));
}

fn peak_arch() -> Architecture {
    let input = Shape::new(32, 32, 3);
    (16u32..=160)
        .map(|c| {
            let mut layers =
                vec![LayerSpec::dep_sep(3, c, Activation::Relu, -1), LayerSpec::pool(OpKind::MaxPool2d, 2, 0)];
            for i in 2..12 {
                layers.push(LayerSpec::conv(3, c, Activation::Relu, i - 1));
            }
            Architecture::Layers(layers)
        })
        .max_by(|a, b| surrogate_performance(a, input).unwrap().total_cmp(&surrogate_performance(b, input).unwrap()))
        .unwrap()
}

#[test]
fn eval_surrogate_at_the_peak() {
    let dir = tempfile::tempdir().unwrap();
    let arch = peak_arch();
    let want = surrogate_performance(&arch, Shape::new(32, 32, 3)).unwrap();
    write_arch(dir.path(), "peak.json", &arch);
    let out = morphnas(&["eval", "peak.json"], dir.path());
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["performance"].as_f64().unwrap(), want);
    assert!(want > 0.999, "{want}");
}

#[test]
fn eval_through_external_echo_worker() {
    let dir = tempfile::tempdir().unwrap();
    let arch = peak_arch();
    write_arch(dir.path(), "a.json", &arch);
    let direct = stdout_json(&morphnas(&["eval", "a.json"], dir.path()));
    let cmd = format!("{BIN} echo-worker");
    let out = morphnas(&["eval", "a.json", "--evaluator", "external", "--cmd", &cmd], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["performance"], direct["performance"]);

    let fixed = format!("{BIN} echo-worker --behavior fixed:0.25");
    let v = stdout_json(&morphnas(&["eval", "a.json", "--evaluator", "external", "--cmd", &fixed], dir.path()));
    assert_eq!(v["performance"], 0.25);
}

#[test]
fn eval_timeout_reports_an_error_result() {
    let dir = tempfile::tempdir().unwrap();
    write_arch(dir.path(), "a.json", &peak_arch());
    let cmd = format!("{BIN} echo-worker --behavior silent");
    let start = Instant::now();
    let out = morphnas(
        &["eval", "a.json", "--evaluator", "external", "--cmd", &cmd, "--timeout-ms", "300", "--retries", "0"],
        dir.path(),
    );
    let took = start.elapsed();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["status"], "error");
    assert!(took < Duration::from_millis(300 + 2000), "{took:?}");
}

#[test]
fn eval_wrong_protocol_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    write_arch(dir.path(), "a.json", &peak_arch());
    let cmd = format!("{BIN} echo-worker --behavior wrong-protocol");
    let out = morphnas(&["eval", "a.json", "--evaluator", "external", "--cmd", &cmd], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stdout_json(&out)["status"], "error");
    let gone = morphnas(&["eval", "a.json", "--evaluator", "external", "--addr", "127.0.0.1:1"], dir.path());
    assert_eq!(gone.status.code(), Some(3));
}

#[test]
fn search_with_unreachable_worker_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMOKE}[evaluator]\nkind = \"external\"\naddress = \"127.0.0.1:1\"\nconnect_attempts = 1\nconnect_timeout_ms = 200\n"
    );
    write(dir.path(), "run.toml", &text);
    assert_eq!(morphnas(&["search", "run.toml"], dir.path()).status.code(), Some(3));
}

#[test]
fn search_through_external_worker_matches_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let ext = format!(
        "{SMOKE}[evaluator]\nkind = \"external\"\ncommand = [\"{BIN}\", \"echo-worker\"]\nworkers = 2\n"
    );
    write(dir.path(), "ext.toml", &ext);
    write(dir.path(), "run.toml", SMOKE);
    assert!(morphnas(&["search", "run.toml", "--output", "s"], dir.path()).status.success());
    let out = morphnas(&["search", "ext.toml", "--output", "e"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rewards = |d: &str| -> Vec<Value> {
        String::from_utf8(read(dir.path().join(d).join("history.jsonl")))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["reward"].clone())
            .collect()
    };
    assert_eq!(rewards("s"), rewards("e"));
}

#[test]
fn report_on_the_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", SMOKE);
    assert!(morphnas(&["search", "run.toml"], dir.path()).status.success());
    let out = morphnas(&["report", "run/history.jsonl", "--out", "tables"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let (episodes, pareto) = text.split_once("\n\n").unwrap();
    let rows: Vec<&str> = episodes.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,4,") && rows[2].starts_with("1,4,"));
    assert!(pareto.starts_with("metric,episode,branch,step,performance,value"));
    assert!(pareto.lines().skip(1).all(|l| l.starts_with("model_size,")));
    assert_eq!(read(dir.path().join("tables/episodes.csv")), format!("{episodes}\n").into_bytes());
}

#[test]
fn report_flags_tampered_rewards() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", SMOKE);
    assert!(morphnas(&["search", "run.toml"], dir.path()).status.success());
    let hist = dir.path().join("run/history.jsonl");
    let text = String::from_utf8(read(&hist)).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: Value = serde_json::from_str(&lines[0]).unwrap();
    v["reward"] = Value::from(v["reward"].as_f64().unwrap() * 0.5);
    lines[0] = v.to_string();
    lines.push("garbage".into());
    std::fs::write(&hist, lines.join("\n") + "\n").unwrap();
    let out = morphnas(&["report", "run/history.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 corrupt"));
}

#[test]
fn guide_run_file_is_accepted() {
    let guide = include_str!("../../../book/src/cli.md");
    let start = guide.find("```toml\n").unwrap() + "```toml\n".len();
    let text = &guide[start..start + guide[start..].find("```").unwrap()];
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", text);
    let out = morphnas(&["search", "run.toml", "--episodes", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 8 * 5);
    for f in ["config.json", "checkpoint.json", "report.json", "best_architecture.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}
