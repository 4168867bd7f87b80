use std::fs;
use std::path::{Path, PathBuf};

use grpo_core::eval::{majority_vote_eval, EvalOutcome, SoftmaxPredictor};
use grpo_core::verify::{
    check_bounds, check_penalty_identity, demo_failure_mode_1, demo_failure_mode_2, fuzz_groups,
    gradient_audit, BoundsReport, Check, Coefficients, FailureModeReport, GradientAuditReport,
    IdentityReport,
};
use grpo_core::{compare_runs, make_env, train, Algorithm, Error, TrainConfig, TrainReport};
use serde::Serialize;

use crate::artifacts::{
    metrics_rows, read_checkpoint, write_checkpoint, write_csv, write_json, write_train_csv,
    Checkpoint, CompareRow, COMPARE_COLUMNS, METRICS_COLUMNS, SCHEMA_VERSION,
};
use crate::config::{load_config, Format, Loaded};
use crate::{
    CliError, CompareArgs, EvalArgs, EvalMode, OutputArgs, Section, TrainArgs, VerifyArgs,
};

fn prepare_out(output: &OutputArgs, loaded: &Loaded) -> Result<(PathBuf, Format), CliError> {
    let dir = output
        .out
        .clone()
        .unwrap_or_else(|| loaded.config.out_dir.clone());
    create_dir(&dir)?;
    Ok((dir, output.format.unwrap_or(loaded.config.format)))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct AbortReport<'a> {
    schema_version: u32,
    step: usize,
    quantity: &'a str,
    last_finite_params: &'a grpo_core::PolicyParams,
}

/// Runs training and turns a numeric abort into a diagnostic file.
fn run_training(
    config: &TrainConfig,
    loaded: &Loaded,
    out: &Path,
) -> Result<TrainReport, CliError> {
    let env = make_env(&loaded.config.env)?;
    match train(config, &env, &loaded.reward_spec) {
        Ok(report) => Ok(report),
        Err(Error::NonFinite {
            step,
            quantity,
            snapshot,
        }) => {
            let path = out.join("abort.json");
            write_json(
                &path,
                &AbortReport {
                    schema_version: SCHEMA_VERSION,
                    step,
                    quantity,
                    last_finite_params: &snapshot,
                },
            )?;
            Err(CliError::Runtime(format!(
                "non-finite {quantity} at step {step}; diagnostic written to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub final_mean_reward: f64,
    pub final_window_mean: f64,
    pub penalty_group_fraction: f64,
    pub standard_group_fraction: f64,
}

fn summarise(report: &TrainReport, window: f64, out_dir: &Path) -> TrainSummary {
    let groups: usize = report
        .rows
        .iter()
        .map(|r| r.standard_groups + r.penalty_groups)
        .sum();
    let penalty: usize = report.rows.iter().map(|r| r.penalty_groups).sum();
    let penalty_group_fraction = penalty as f64 / groups as f64;
    TrainSummary {
        out_dir: out_dir.to_path_buf(),
        steps: report.rows.len(),
        final_mean_reward: report.rows.last().map_or(f64::NAN, |r| r.mean_reward),
        final_window_mean: report.final_window_mean(window),
        penalty_group_fraction,
        standard_group_fraction: 1.0 - penalty_group_fraction,
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let mut loaded = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        loaded.config.train.seed = seed;
    }
    let (out, format) = prepare_out(&args.output, &loaded)?;
    let report = run_training(&loaded.config.train, &loaded, &out)?;
    let summary = summarise(&report, loaded.config.compare.window, &out);

    if format.csv() {
        write_train_csv(&out.join("train.csv"), &report.rows)?;
    }
    if format.json() {
        #[derive(Serialize)]
        struct TrainJson<'a> {
            schema_version: u32,
            command: &'static str,
            config: crate::config::Resolved<'a>,
            summary: &'a TrainSummary,
            rows: &'a [grpo_core::StepRow],
            step_millis: &'a [f64],
        }
        write_json(
            &out.join("train.json"),
            &TrainJson {
                schema_version: SCHEMA_VERSION,
                command: "train",
                config: loaded.resolved(),
                summary: &summary,
                rows: &report.rows,
                step_millis: &report.step_millis,
            },
        )?;
    }
    let ckpt = Checkpoint::new(
        Some(loaded.config.train.clone()),
        loaded.config.env.clone(),
        report.final_params.clone(),
    );
    write_checkpoint(&out.join("checkpoint.json"), &ckpt)?;

    println!(
        "train: {} {} steps, final mean reward {:.4}, last-window mean {:.4}, penalty-branch groups {:.1}%, standard {:.1}%",
        loaded.config.train.algorithm.name(),
        summary.steps,
        summary.final_mean_reward,
        summary.final_window_mean,
        100.0 * summary.penalty_group_fraction,
        100.0 * summary.standard_group_fraction,
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub grpo_start: f64,
    pub grpo_final: f64,
    pub grpopp_start: f64,
    pub grpopp_final: f64,
    pub grpopp_wins: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareSummary {
    pub out_dir: PathBuf,
    pub window: f64,
    pub seeds: Vec<SeedSummary>,
    pub wins: usize,
    pub win_fraction: f64,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<CompareSummary, CliError> {
    let mut loaded = load_config(&args.config)?;
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(CliError::Validation("--seeds must be >= 1".into()));
        }
        loaded.config.compare.seeds = n;
    }
    if let Some(first) = args.first_seed {
        loaded.config.compare.first_seed = first;
    }
    let (out, format) = prepare_out(&args.output, &loaded)?;
    let c = &loaded.config.compare;
    let seeds: Vec<u64> = (c.first_seed..c.first_seed + c.seeds).collect();
    let grpo = TrainConfig {
        algorithm: Algorithm::Grpo,
        ..loaded.config.train.clone()
    };
    let grpopp = TrainConfig {
        algorithm: Algorithm::GrpoPlusPlus,
        ..loaded.config.train.clone()
    };
    let env = make_env(&loaded.config.env)?;
    let pairs = compare_runs(&grpo, &grpopp, &env, &loaded.reward_spec, &seeds)?;

    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    for pair in &pairs {
        for (a, b) in pair.a.rows.iter().zip(&pair.b.rows) {
            rows.push(CompareRow {
                step: a.step,
                grpo_reward: a.mean_reward,
                grpopp_reward: b.mean_reward,
                seed: pair.seed,
            });
        }
        let grpo_final = pair.a.final_window_mean(c.window);
        let grpopp_final = pair.b.final_window_mean(c.window);
        per_seed.push(SeedSummary {
            seed: pair.seed,
            grpo_start: pair.a.initial_window_mean(c.window),
            grpo_final,
            grpopp_start: pair.b.initial_window_mean(c.window),
            grpopp_final,
            grpopp_wins: grpopp_final >= grpo_final,
        });
    }
    let wins = per_seed.iter().filter(|s| s.grpopp_wins).count();
    let summary = CompareSummary {
        out_dir: out.clone(),
        window: c.window,
        win_fraction: wins as f64 / per_seed.len() as f64,
        seeds: per_seed,
        wins,
    };

    if format.csv() {
        write_csv(&out.join("compare.csv"), &COMPARE_COLUMNS, &rows)?;
    }
    if format.json() {
        #[derive(Serialize)]
        struct CompareJson<'a> {
            schema_version: u32,
            command: &'static str,
            config: crate::config::Resolved<'a>,
            summary: &'a CompareSummary,
        }
        write_json(
            &out.join("compare.json"),
            &CompareJson {
                schema_version: SCHEMA_VERSION,
                command: "compare",
                config: loaded.resolved(),
                summary: &summary,
            },
        )?;
    }
    for s in &summary.seeds {
        println!(
            "seed {:>3}: grpo {:8.4} -> {:8.4}   grpo++ {:8.4} -> {:8.4}",
            s.seed, s.grpo_start, s.grpo_final, s.grpopp_start, s.grpopp_final
        );
    }
    println!(
        "compare: GRPO++ final-window mean >= GRPO in {}/{} seeds ({:.2})",
        summary.wins,
        summary.seeds.len(),
        summary.win_fraction
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifySettings {
    pub sections: Vec<String>,
    pub coefficients: Coefficients,
    pub group_size: usize,
    pub fuzz_groups: usize,
    pub identity_groups: usize,
    pub audit_cases: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyOutput {
    pub schema_version: u32,
    pub command: &'static str,
    pub settings: VerifySettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_mode_1: Option<FailureModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_mode_2: Option<FailureModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_audit: Option<GradientAuditReport>,
    pub pass: bool,
}

impl VerifyOutput {
    fn sections(&self) -> Vec<(&'static str, &[Check])> {
        let mut out: Vec<(&'static str, &[Check])> = Vec::new();
        if let Some(r) = &self.failure_mode_1 {
            out.push(("failure_mode_1", &r.checks));
        }
        if let Some(r) = &self.failure_mode_2 {
            out.push(("failure_mode_2", &r.checks));
        }
        if let Some(r) = &self.identity {
            out.push(("identity", &r.checks));
        }
        if let Some(r) = &self.bounds {
            out.push(("bounds", &r.checks));
        }
        if let Some(r) = &self.gradient_audit {
            out.push(("gradient_audit", &r.checks));
        }
        out
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifyOutput, CliError> {
    let coef = Coefficients {
        beta: args.beta,
        gamma: args.gamma,
        eps: args.eps,
    };
    let estimator = coef.estimator()?;
    let mut sections = args.only.clone();
    if sections.is_empty() {
        sections = vec![
            Section::FailureModes,
            Section::Identity,
            Section::Bounds,
            Section::Gradient,
        ];
    }
    sections.sort();
    sections.dedup();
    create_dir(&args.out)?;

    let mut output = VerifyOutput {
        schema_version: SCHEMA_VERSION,
        command: "verify",
        settings: VerifySettings {
            sections: sections.iter().map(|s| format!("{s:?}")).collect(),
            coefficients: coef,
            group_size: args.m,
            fuzz_groups: args.n,
            identity_groups: args.identity_groups,
            audit_cases: args.cases,
            seed: args.seed,
        },
        failure_mode_1: None,
        failure_mode_2: None,
        identity: None,
        bounds: None,
        gradient_audit: None,
        pass: false,
    };
    for section in &sections {
        match section {
            Section::FailureModes => {
                let fm1 = demo_failure_mode_1(args.m, args.seed, coef)?;
                let fm2 = demo_failure_mode_2(args.m, args.seed, coef)?;
                write_json(&args.out.join("failure_mode_1.json"), &fm1)?;
                write_json(&args.out.join("failure_mode_2.json"), &fm2)?;
                output.failure_mode_1 = Some(fm1);
                output.failure_mode_2 = Some(fm2);
            }
            Section::Identity => {
                output.identity = Some(check_penalty_identity(
                    &estimator,
                    coef,
                    args.identity_groups,
                    args.seed,
                )?);
            }
            Section::Bounds => {
                let cases = fuzz_groups(args.n, args.seed)?;
                output.bounds = Some(check_bounds(&cases, &estimator, coef)?);
            }
            Section::Gradient => {
                output.gradient_audit = Some(gradient_audit(args.cases, args.seed)?);
            }
        }
    }
    output.pass = output
        .sections()
        .iter()
        .all(|(_, checks)| checks.iter().all(|c| c.pass));
    write_json(&args.out.join("verify.json"), &output)?;

    println!(
        "{:<16} {:<42} {:>14} {:>14}  result",
        "section", "check", "measured", "threshold"
    );
    for (name, checks) in output.sections() {
        for c in checks {
            println!(
                "{:<16} {:<42} {:>14.6e} {:>14.6e}  {}",
                name,
                c.name,
                c.measured,
                c.threshold,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
    }
    if !output.pass {
        return Err(CliError::VerificationFailed(format!(
            "verification failed; report written to {}",
            args.out.join("verify.json").display()
        )));
    }
    println!("verify: all checks passed");
    Ok(output)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub single: Option<EvalOutcome>,
    pub vote: Option<EvalOutcome>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary, CliError> {
    if args.k == 0 {
        return Err(CliError::Validation("--k must be >= 1".into()));
    }
    if args.n_per_class == 0 {
        return Err(CliError::Validation("--n-per-class must be >= 1".into()));
    }
    if !(args.temperature > 0.0 && args.temperature.is_finite()) {
        return Err(CliError::Validation(
            "--temperature must be positive".into(),
        ));
    }
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let env = make_env(&ckpt.env)?;
    let dataset = env.eval_dataset(args.n_per_class)?;
    let predictor = SoftmaxPredictor {
        params: &ckpt.params,
        temperature: args.temperature,
    };
    create_dir(&args.out)?;

    #[derive(Serialize)]
    struct EvalJson<'a> {
        schema_version: u32,
        command: &'static str,
        checkpoint: &'a Path,
        mode: &'static str,
        k: usize,
        n_per_class: usize,
        temperature: f64,
        seed: u64,
        tie_break: &'static str,
        env: &'a grpo_core::EnvSpec,
        outcome: &'a EvalOutcome,
    }

    let mut summary = EvalSummary {
        single: None,
        vote: None,
    };
    let runs = match args.mode {
        EvalMode::Single => vec![("single", 1)],
        EvalMode::Vote => vec![("vote", args.k)],
        EvalMode::Both => vec![("single", 1), ("vote", args.k)],
    };
    for (mode, k) in runs {
        let outcome = majority_vote_eval(&predictor, &dataset, k, args.seed)?;
        if args.format.csv() {
            write_csv(
                &args.out.join(format!("metrics_{mode}.csv")),
                &METRICS_COLUMNS,
                &metrics_rows(&outcome.metrics),
            )?;
        }
        if args.format.json() {
            write_json(
                &args.out.join(format!("metrics_{mode}.json")),
                &EvalJson {
                    schema_version: SCHEMA_VERSION,
                    command: "eval",
                    checkpoint: &args.checkpoint,
                    mode,
                    k,
                    n_per_class: args.n_per_class,
                    temperature: args.temperature,
                    seed: args.seed,
                    tie_break: "canonical label order",
                    env: &ckpt.env,
                    outcome: &outcome,
                },
            )?;
        }
        println!(
            "eval {mode} (k={k}): {} items, accuracy {:.4}, macro F1 {:.4}, invalid {}",
            dataset.len(),
            outcome.metrics.accuracy,
            outcome.metrics.macro_f1,
            outcome.confusion.invalid()
        );
        match mode {
            "single" => summary.single = Some(outcome),
            _ => summary.vote = Some(outcome),
        }
    }
    Ok(summary)
}
