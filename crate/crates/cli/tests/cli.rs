use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MINIMAL: &str = r#"
[train]
algorithm = "grpopp"
iterations = 2
steps_per_iter = 15
learning_rate = 0.1
beta = 1.0
gamma = 0.5

[env]
mode = "learnable"
"#;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grpo-lab"))
        .args(args)
        .env_remove("GRPO_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn schema_columns(section: &str) -> Vec<String> {
    let text = fs::read_to_string(repo_root().join("schemas/csv-v1.toml")).unwrap();
    let schema: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(
        schema["version"].as_integer(),
        Some(grpo_cli::artifacts::SCHEMA_VERSION as i64)
    );
    schema[section]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

fn header(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("run");
    let res = lab(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("penalty-branch groups"), "{stdout}");

    let csv = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
    assert_eq!(header(&out.join("train.csv")), schema_columns("train"));

    let json = read_json(&out.join("train.json"));
    assert_eq!(json["config"]["train"]["ppo_steps"], 1);
    assert_eq!(json["config"]["env"]["num_contexts"], 21);
    assert_eq!(json["rows"].as_array().unwrap().len(), 30);
    assert_eq!(json["step_millis"].as_array().unwrap().len(), 30);

    let ckpt = grpo_cli::artifacts::read_checkpoint(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.config.unwrap().iterations, 2);
}

#[test]
fn format_flag_limits_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("run");
    let res = lab(&[
        "train",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(res.status.success());
    assert!(out.join("train.json").exists());
    assert!(!out.join("train.csv").exists());
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("from-env");
    let res = Command::new(env!("CARGO_BIN_EXE_grpo-lab"))
        .args(["train", "--config", &config, "--format", "csv"])
        .env("GRPO_LAB_OUT", &out)
        .output()
        .unwrap();
    assert!(res.status.success());
    assert!(out.join("train.csv").exists());
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();

    let config = write_config(
        dir.path(),
        &format!("reward_spec = \"missing.toml\"\n{MINIMAL}"),
    );
    let res = lab(&[
        "train",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("reward_spec"));

    let config = write_config(dir.path(), &format!("{MINIMAL}\nextra = true\n"));
    let res = lab(&["train", "--config", &config]);
    assert_eq!(res.status.code(), Some(1));

    let res = lab(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(res.status.code(), Some(1));

    let res = lab(&["train"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn numeric_abort_exits_2_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "learning_rate = 0.1",
        "learning_rate = 1.0\nkl_coeff = 1e308",
    );
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    let res = lab(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("abort.json"));
    let diag = read_json(&out.join("abort.json"));
    assert!(diag["step"].as_u64().unwrap() >= 1);
    assert!(diag["last_finite_params"]["values"].is_array());
}

#[test]
fn compare_writes_aligned_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("cmp");
    let res = lab(&[
        "compare",
        "--config",
        &config,
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("final-window mean >= GRPO in"), "{stdout}");

    let path = out.join("compare.csv");
    assert_eq!(header(&path), schema_columns("compare"));
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<grpo_cli::artifacts::CompareRow> =
        reader.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 30);
    assert_eq!(rows[0].seed, 0);
    assert_eq!(rows[30].seed, 1);
    assert_eq!(rows[29].step, 30);

    let json = read_json(&out.join("compare.json"));
    assert_eq!(json["summary"]["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(json["config"]["compare"]["seeds"], 2);

    let res = lab(&[
        "compare",
        "--config",
        &config,
        "--seeds",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let csv = fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
}

#[cfg(not(feature = "inject-sign-flip"))]
#[test]
fn verify_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = lab(&["verify", "--out", out]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stdout)
    );
    let report = read_json(&dir.path().join("verify.json"));
    assert_eq!(report["pass"], true);
    for key in [
        "failure_mode_1",
        "failure_mode_2",
        "identity",
        "bounds",
        "gradient_audit",
    ] {
        assert!(report.get(key).is_some(), "{key}");
    }

    // The per-response advantages that the advantage bar charts consume.
    let fm1 = read_json(&dir.path().join("failure_mode_1.json"));
    assert_eq!(
        fm1["grpo"]["advantages"],
        serde_json::json!([0.0, 0.0, 0.0])
    );
    assert_eq!(
        fm1["grpopp"]["advantages"],
        serde_json::json!([-0.5, -0.5, -0.5])
    );
    let fm2 = read_json(&dir.path().join("failure_mode_2.json"));
    let grpo = fm2["grpo"]["advantages"].as_array().unwrap();
    assert!(grpo.iter().any(|a| a.as_f64().unwrap() > 0.0));
    assert_eq!(fm2["responses"].as_array().unwrap().len(), 3);
}

#[cfg(not(feature = "inject-sign-flip"))]
#[test]
fn verify_only_selected_sections() {
    let dir = tempfile::tempdir().unwrap();
    let res = lab(&[
        "verify",
        "--only",
        "failure-modes",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let report = read_json(&dir.path().join("verify.json"));
    assert!(report.get("failure_mode_1").is_some());
    assert!(report.get("identity").is_none());
    assert!(report.get("bounds").is_none());
    assert!(report.get("gradient_audit").is_none());
}

#[cfg(feature = "inject-sign-flip")]
#[test]
fn flipped_penalty_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let res = lab(&["verify", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    let report = read_json(&dir.path().join("verify.json"));
    assert_eq!(report["pass"], false);
}

fn oracle_checkpoint(dir: &Path) -> PathBuf {
    use grpo_core::{make_env, EnvMode, EnvSpec};
    let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
    let ckpt =
        grpo_cli::artifacts::Checkpoint::new(None, env.spec().clone(), env.oracle_params(20.0));
    let path = dir.join("oracle.json");
    grpo_cli::artifacts::write_checkpoint(&path, &ckpt).unwrap();
    path
}

#[test]
fn eval_oracle_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let out = dir.path().join("eval");
    let res = lab(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n-per-class",
        "4",
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    for mode in ["single", "vote"] {
        let json = read_json(&out.join(format!("metrics_{mode}.json")));
        assert_eq!(json["outcome"]["metrics"]["macro_f1"], 1.0);
        let csv = out.join(format!("metrics_{mode}.csv"));
        assert_eq!(header(&csv), schema_columns("metrics"));
        let text = fs::read_to_string(&csv).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last, "macro,1.0,1.0,1.0,28");
    }
    let vote = read_json(&out.join("metrics_vote.json"));
    assert_eq!(vote["k"], 5);
    assert_eq!(
        vote["outcome"]["items"][0]["votes"]
            .as_array()
            .unwrap()
            .len(),
        5
    );
}

#[test]
fn eval_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let out = dir.path().to_str().unwrap();
    let res = lab(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--k",
        "0",
        "--out",
        out,
    ]);
    assert_eq!(res.status.code(), Some(1));

    let mut json = read_json(&ckpt);
    json["env"]["num_contexts"] = serde_json::json!(3);
    fs::write(&ckpt, json.to_string()).unwrap();
    let res = lab(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("shape"));
}

#[test]
fn shipped_experiments_parse() {
    for entry in fs::read_dir(repo_root().join("experiments")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            grpo_cli::config::load_config(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("run");
    assert!(
        lab(&["train", "--config", &config, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let res = lab(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.json").to_str().unwrap(),
        "--mode",
        "single",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(out.join("metrics_single.csv").exists());
    assert!(!out.join("metrics_vote.csv").exists());
}
