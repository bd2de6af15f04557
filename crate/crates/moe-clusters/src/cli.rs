//! Command-line interface.
//!
//! Five subcommands cover the experiment workflow:
//!
//! - `train` — one full training run; writes `metrics.csv`, `fractions.csv`
//!   (per-step per-expert dispatch shares), and `checkpoint.txt`.
//! - `sweep` — trains across one varied dimension with paired seeds; writes
//!   `sweep.csv`. A dropout-rate sweep automatically runs both the
//!   cluster-level and global dropout variants so the two are directly
//!   comparable.
//! - `check-grads` — compares every analytic gradient against finite
//!   differences and prints the worst relative error per component.
//! - `validate-oracles` — re-evaluates the built-in reference identities
//!   (closed-form loss values, capacity formulas, dropout counts, exact
//!   masking) and reports each one.
//! - `stats` — routing statistics of a freshly initialized model on one
//!   batch; writes `stats.csv`.
//!
//! Exit codes are a stable contract: 0 success, 1 check or run failure,
//! 2 usage/config error. `--seed` beats the config's seed. All artifacts
//! land under `--out` (created if missing); nothing is written elsewhere.

use crate::config::ExperimentConfig;
use crate::dispatch::cluster_fractions;
use crate::dropout::{cluster_level_mask, inference_mask, DropoutLevel};
use crate::error::{Error, Result};
use crate::gating::{gate_values, GatingKind, MASK_SENTINEL};
use crate::losses::{balance_loss, clustering_loss, ClusterConfig, RoutingStats};
use crate::model::{save_checkpoint, MoEModel};
use crate::numerics::{Tape, Tensor};
use crate::simulator::gradreport::run_gradient_report;
use crate::simulator::sweep::{run_sweep, SweepAxis, SweepPoint};
use crate::simulator::synthetic::SyntheticTask;
use crate::simulator::trainer::{derive_seed, train};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Top-level argument parser.
#[derive(Debug, Parser)]
#[command(
    name = "moe-clusters",
    version,
    about = "Train and probe a mixture-of-expert-clusters router on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes metrics.csv, fractions.csv, checkpoint.txt.
    Train(RunArgs),
    /// Train across one varied dimension; writes sweep.csv.
    Sweep(RunArgs),
    /// Compare analytic gradients against finite differences.
    CheckGrads(CheckGradsArgs),
    /// Re-evaluate the built-in reference identities.
    ValidateOracles(ValidateOraclesArgs),
    /// Routing statistics of a fresh model on one batch; writes stats.csv.
    Stats(RunArgs),
}

/// Flags shared by the artifact-producing commands.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML). Omitting it runs the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for output artifacts (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override the config's experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress progress output (errors still print).
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    /// Seed for the probe-point generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Suppress per-component output.
    #[arg(long)]
    pub quiet: bool,
    /// Sabotage the clustering-loss gradient (value preserved, gradient
    /// negated) to demonstrate that the checker catches wrong gradients.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct ValidateOraclesArgs {
    /// Suppress per-check output.
    #[arg(long)]
    pub quiet: bool,
}

/// Executes a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Sweep(args) => run_sweep_cmd(args),
        Command::CheckGrads(args) => run_check_grads(args),
        Command::ValidateOracles(args) => run_validate_oracles(args),
        Command::Stats(args) => run_stats(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    match &args.config {
        Some(path) => ExperimentConfig::from_path(path),
        None => {
            let config = ExperimentConfig::default();
            config.validate()?;
            Ok(config)
        }
    }
}

/// Shortest round-trip decimal formatting: identical floats always produce
/// identical bytes, so reruns with the same seed write identical files.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + 64);
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Builds the task and a fresh model from the config's seed streams.
fn build_experiment(config: &ExperimentConfig, seed: u64) -> Result<(SyntheticTask, MoEModel)> {
    let mut task_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "task"));
    let task = SyntheticTask::generate(config.task_spec(), &mut task_rng)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
    let model = MoEModel::init(&config.model_spec()?, &mut init_rng)?;
    Ok((task, model))
}

fn run_train(args: &RunArgs) -> Result<i32> {
    let config = load_config(args)?;
    let settings = config.train_settings(args.seed);
    let (task, model) = build_experiment(&config, settings.seed)?;
    let say = |line: String| {
        if !args.quiet {
            println!("{line}");
        }
    };
    say(format!(
        "training: {} experts in {} clusters, {} steps, seed {}",
        config.model.experts, config.model.clusters, settings.steps, settings.seed
    ));
    let outcome = train(model, &task, &settings)?;

    std::fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.csv");
    let metrics_rows: Vec<Vec<String>> = outcome
        .metrics
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt(r.total),
                fmt(r.task),
                fmt(r.balance),
                fmt(r.clustering),
                fmt(r.c_intra),
                fmt(r.c_inter),
                fmt(r.overflow_rate),
                fmt(r.temperature),
                fmt(r.val_task),
            ]
        })
        .collect();
    write_csv(
        &metrics_path,
        &[
            "step",
            "total",
            "task",
            "balance",
            "clustering",
            "c_intra",
            "c_inter",
            "overflow_rate",
            "temperature",
            "val_task",
        ],
        &metrics_rows,
    )?;

    // Long-format expert shares: training-batch rows per logged step, then
    // the final validation batch with every expert alive.
    let clusters = &outcome.model.layer.clusters;
    let mut fraction_rows: Vec<Vec<String>> = Vec::new();
    for (step, fractions) in &outcome.fraction_rows {
        for (expert, &fraction) in fractions.iter().enumerate() {
            fraction_rows.push(vec![
                step.to_string(),
                "train".into(),
                expert.to_string(),
                clusters.cluster_of(expert).to_string(),
                fmt(fraction),
            ]);
        }
    }
    let last_step = settings.steps - 1;
    for (expert, &fraction) in outcome.val_fractions.iter().enumerate() {
        fraction_rows.push(vec![
            last_step.to_string(),
            "val".into(),
            expert.to_string(),
            clusters.cluster_of(expert).to_string(),
            fmt(fraction),
        ]);
    }
    let fractions_path = args.out.join("fractions.csv");
    write_csv(
        &fractions_path,
        &["step", "phase", "expert", "cluster", "fraction"],
        &fraction_rows,
    )?;

    let checkpoint_path = args.out.join("checkpoint.txt");
    save_checkpoint(&outcome.model, &checkpoint_path)?;

    let last = outcome.metrics.last().expect("final step always logged");
    say(format!(
        "done: total {} | task {} | balance {} | clustering {}",
        fmt(last.total),
        fmt(last.task),
        fmt(last.balance),
        fmt(last.clustering)
    ));
    say(format!(
        "validation: final {} | best {} at step {} | intra-cluster variance {}",
        fmt(outcome.final_val_task),
        fmt(outcome.best_val_task),
        outcome.best_val_step,
        fmt(outcome.final_val_c_intra)
    ));
    say(format!(
        "artifacts: {} {} {}",
        metrics_path.display(),
        fractions_path.display(),
        checkpoint_path.display()
    ));
    Ok(0)
}

fn sweep_row_to_csv(row: &SweepPoint, level: DropoutLevel) -> Vec<String> {
    vec![
        row.axis.to_string(),
        fmt(row.value),
        level.to_string(),
        row.seed.to_string(),
        fmt(row.final_val_task),
        fmt(row.best_val_task),
        row.best_val_step.to_string(),
        fmt(row.final_val_c_intra),
        fmt(row.mean_overflow),
        fmt(row.final_balance),
        fmt(row.final_clustering),
    ]
}

fn run_sweep_cmd(args: &RunArgs) -> Result<i32> {
    let config = load_config(args)?;
    let plan = config.sweep_plan(args.seed)?;
    let say = |line: String| {
        if !args.quiet {
            println!("{line}");
        }
    };

    // A dropout-rate sweep compares the two dropout granularities head to
    // head: the same rates, seeds, tasks, and inits run once per level.
    let passes: Vec<DropoutLevel> = match plan.axis {
        SweepAxis::DropoutRate(_) => vec![DropoutLevel::Cluster, DropoutLevel::Global],
        _ => vec![plan.settings.dropout],
    };
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for &level in &passes {
        let mut pass_plan = plan.clone();
        pass_plan.settings.dropout = level;
        let rows = run_sweep(&pass_plan)?;
        // Paired-comparison invariant: every axis value sees the same seeds.
        let per_value = plan.seeds.len();
        debug_assert!(rows
            .chunks(per_value)
            .all(|chunk| { chunk.iter().map(|r| r.seed).collect::<Vec<_>>() == plan.seeds }));
        for row in &rows {
            csv_rows.push(sweep_row_to_csv(row, level));
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let sweep_path = args.out.join("sweep.csv");
    write_csv(
        &sweep_path,
        &[
            "axis",
            "value",
            "dropout_level",
            "seed",
            "final_val_task",
            "best_val_task",
            "best_val_step",
            "final_val_c_intra",
            "mean_overflow",
            "final_balance",
            "final_clustering",
        ],
        &csv_rows,
    )?;
    say(format!(
        "sweep over {}: {} rows ({} values x {} seeds x {} passes), seeds paired across values",
        plan.axis.name(),
        csv_rows.len(),
        csv_rows.len() / (plan.seeds.len() * passes.len()),
        plan.seeds.len(),
        passes.len()
    ));
    say(format!("artifacts: {}", sweep_path.display()));
    Ok(0)
}

fn run_check_grads(args: &CheckGradsArgs) -> Result<i32> {
    let reports = run_gradient_report(args.seed, args.inject_sign_flip)?;
    let mut failed = Vec::new();
    for report in &reports {
        if !args.quiet {
            println!(
                "{} {}: max relative error {} (tolerance {})",
                if report.pass { "[ok]  " } else { "[FAIL]" },
                report.name,
                fmt(report.max_rel_err),
                fmt(report.tolerance)
            );
        }
        if !report.pass {
            failed.push(report.name);
        }
    }
    if failed.is_empty() {
        if !args.quiet {
            println!("all {} gradient checks passed", reports.len());
        }
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

fn run_validate_oracles(args: &ValidateOraclesArgs) -> Result<i32> {
    let checks = reference_checks();
    let mut failed = Vec::new();
    for (name, outcome) in &checks {
        match outcome {
            Ok(()) => {
                if !args.quiet {
                    println!("[ok]   {name}");
                }
            }
            Err(detail) => {
                if !args.quiet {
                    println!("[FAIL] {name}: {detail}");
                }
                failed.push(*name);
            }
        }
    }
    if failed.is_empty() {
        if !args.quiet {
            println!("all {} reference identities hold", checks.len());
        }
        Ok(0)
    } else {
        eprintln!("reference identities violated: {}", failed.join(", "));
        Ok(1)
    }
}

fn run_stats(args: &RunArgs) -> Result<i32> {
    let config = load_config(args)?;
    let settings = config.train_settings(args.seed);
    let (task, model) = build_experiment(&config, settings.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "stats-data"));
    let batch = task.sample(&mut rng, settings.val_size)?;
    let n = model.layer.num_experts();
    let mask = inference_mask(n);

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &batch.inputs, &mask)?;
    let stats = RoutingStats::collect(
        &out.routing.dispatch,
        tape.value(out.routing.mean_probs).data(),
        &model.layer.clusters,
        &mask,
    )?;
    let clusters = cluster_fractions(&out.routing.dispatch, &model.layer.clusters)?;

    std::fs::create_dir_all(&args.out)?;
    let stats_path = args.out.join("stats.csv");
    let rows: Vec<Vec<String>> = (0..n)
        .map(|e| {
            vec![
                e.to_string(),
                model.layer.clusters.cluster_of(e).to_string(),
                stats.counts[e].to_string(),
                fmt(stats.fractions[e]),
                fmt(stats.mean_probs[e]),
                fmt(clusters.within_cluster[e]),
            ]
        })
        .collect();
    write_csv(
        &stats_path,
        &[
            "expert",
            "cluster",
            "tokens",
            "fraction",
            "mean_prob",
            "within_cluster",
        ],
        &rows,
    )?;
    if !args.quiet {
        println!(
            "untrained routing on {} tokens: capacity {}, overflow rate {}, intra-cluster variance {}",
            stats.tokens,
            out.routing.dispatch.capacity,
            fmt(out.routing.dispatch.overflow_rate()),
            fmt(stats.c_intra())
        );
        println!("artifacts: {}", stats_path.display());
    }
    Ok(0)
}

type Check = (&'static str, std::result::Result<(), String>);

/// The built-in reference identities: closed-form values and exact invariants
/// the library must reproduce at runtime, independent of the test suite.
fn reference_checks() -> Vec<Check> {
    vec![
        (
            "balance-loss-at-uniform-equals-coefficient",
            check_balance_uniform(),
        ),
        (
            "balance-loss-floor-under-matched-fractions",
            check_balance_floor(),
        ),
        ("expert-capacity-formula-cases", check_capacity_cases()),
        (
            "cluster-dropout-exact-survivor-counts",
            check_cluster_dropout_counts(),
        ),
        (
            "global-dropout-exact-drop-count",
            check_global_dropout_count(),
        ),
        (
            "clustering-loss-closed-form-case",
            check_clustering_closed_form(),
        ),
        (
            "inter-cluster-term-closed-form-case",
            check_inter_cluster_closed_form(),
        ),
        (
            "masked-experts-gate-to-exact-zero",
            check_masked_gate_zero(),
        ),
        ("gate-transfer-closed-form-cases", check_gate_closed_forms()),
    ]
}

fn check(ok: bool, detail: String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(detail)
    }
}

fn check_balance_uniform() -> std::result::Result<(), String> {
    // Uniform gates and uniform dispatch: coef · N · Σ (1/N)·(1/N) = coef.
    let run = || -> Result<f64> {
        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::filled(8, 4, 0.25))?;
        let p = crate::losses::mean_routing_prob(&mut tape, alpha)?;
        let loss = balance_loss(&mut tape, &[0.25; 4], p, 0.01, 4)?;
        tape.value(loss).item()
    };
    match run() {
        Ok(v) => check(
            (v - 0.01).abs() <= 1e-12,
            format!("expected exactly the coefficient 0.01, got {v}"),
        ),
        Err(e) => Err(e.to_string()),
    }
}

fn check_balance_floor() -> std::result::Result<(), String> {
    // With fractions matched to probabilities, Σ p² ≥ 1/N pins the loss at
    // or above the coefficient for every distribution.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let raw: Vec<f64> = (0..4)
            .map(|_| rand::Rng::random_range(&mut rng, 0.05..1.0))
            .collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let run = || -> Result<f64> {
            let mut tape = Tape::new();
            let pv = tape.leaf(Tensor::row_vector(p.clone()))?;
            let loss = balance_loss(&mut tape, &p, pv, 0.01, 4)?;
            tape.value(loss).item()
        };
        match run() {
            Ok(v) => {
                if v < 0.01 - 1e-12 {
                    return Err(format!("trial {trial}: loss {v} fell below the floor 0.01"));
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}

fn check_capacity_cases() -> std::result::Result<(), String> {
    for (factor, tokens, experts, want) in [
        (2.0, 8usize, 4usize, 4usize),
        (1.0, 10, 4, 3),
        (0.25, 4, 4, 1),
    ] {
        match crate::dispatch::expert_capacity(factor, tokens, experts) {
            Ok(got) if got == want => {}
            Ok(got) => {
                return Err(format!(
                    "capacity({factor}, {tokens}, {experts}) = {got}, expected {want}"
                ))
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}

fn check_cluster_dropout_counts() -> std::result::Result<(), String> {
    // 8 experts in 2 clusters at rate 0.5: every cluster keeps exactly 2
    // survivors, for every seed.
    let cfg = ClusterConfig::new(8, 2).map_err(|e| e.to_string())?;
    for seed in 0..100 {
        let mask = cluster_level_mask(&cfg, 0.5, seed).map_err(|e| e.to_string())?;
        for c in 0..2 {
            let alive = cfg.members(c).filter(|&e| mask.is_alive(e)).count();
            if alive != 2 {
                return Err(format!(
                    "seed {seed}: cluster {c} kept {alive} of 4, expected 2"
                ));
            }
        }
    }
    // Rate 0.75 on clusters of 4 drops ⌊3⌋ and keeps 1.
    let mask = cluster_level_mask(&cfg, 0.75, 3).map_err(|e| e.to_string())?;
    for c in 0..2 {
        let alive = cfg.members(c).filter(|&e| mask.is_alive(e)).count();
        if alive != 1 {
            return Err(format!("rate 0.75: cluster {c} kept {alive}, expected 1"));
        }
    }
    Ok(())
}

fn check_global_dropout_count() -> std::result::Result<(), String> {
    for seed in 0..100 {
        let mask = crate::dropout::global_level_mask(8, 0.5, seed).map_err(|e| e.to_string())?;
        if mask.num_alive() != 4 {
            return Err(format!(
                "seed {seed}: global rate 0.5 kept {} of 8, expected 4",
                mask.num_alive()
            ));
        }
    }
    Ok(())
}

fn check_clustering_closed_form() -> std::result::Result<(), String> {
    // p = [0.4, 0.2, 0.3, 0.1] in two clusters of two: both cluster
    // variances are 0.01 so C_intra = 0.01; cluster means are [0.3, 0.2] so
    // C_inter = exp(-1/3); loss = 0.01·4·0.01·exp(-1/3).
    let run = || -> Result<(f64, f64, f64)> {
        let cfg = ClusterConfig::new(4, 2)?;
        let mask = inference_mask(4);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row_vector(vec![0.4, 0.2, 0.3, 0.1]))?;
        let terms = clustering_loss(&mut tape, p, &cfg, &mask, 0.01, 1.0)?;
        Ok((
            tape.value(terms.loss).item()?,
            tape.value(terms.c_intra).item()?,
            tape.value(terms.c_inter).item()?,
        ))
    };
    let want = 0.01 * 4.0 * 0.01 * (-1.0f64 / 3.0).exp();
    match run() {
        Ok((loss, c_intra, c_inter)) => check(
            (loss - want).abs() <= 1e-9
                && (c_intra - 0.01).abs() <= 1e-9
                && (c_inter - (-1.0f64 / 3.0).exp()).abs() <= 1e-9,
            format!("loss {loss} (want {want}), C_intra {c_intra}, C_inter {c_inter}"),
        ),
        Err(e) => Err(e.to_string()),
    }
}

fn check_inter_cluster_closed_form() -> std::result::Result<(), String> {
    // Cluster means [0.3, 0.2] at sharpness 1: exp(-(0.3-0.2)/0.3) ≈ 0.716531.
    let run = || -> Result<f64> {
        let mut tape = Tape::new();
        let means = tape.leaf(Tensor::row_vector(vec![0.3, 0.2]))?;
        let c = crate::losses::inter_cluster_constraint(&mut tape, means, 1.0)?;
        tape.value(c).item()
    };
    match run() {
        Ok(v) => check(
            (v - 0.716531).abs() <= 1e-6,
            format!("expected ≈0.716531, got {v}"),
        ),
        Err(e) => Err(e.to_string()),
    }
}

fn check_masked_gate_zero() -> std::result::Result<(), String> {
    // A masked column must come out of the gate as exactly 0.0 — not merely
    // small — for both transfer functions.
    let run = |kind: GatingKind| -> Result<f64> {
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::row_vector(vec![0.3, MASK_SENTINEL, -0.8]))?;
        let alpha = gate_values(&mut tape, scores, kind)?;
        Ok(tape.value(alpha).get(0, 1))
    };
    for kind in [GatingKind::Softmax, GatingKind::Sigmoid] {
        match run(kind) {
            Ok(v) => {
                if v != 0.0 {
                    return Err(format!("{kind:?}: masked gate is {v:e}, expected exact 0"));
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}

fn check_gate_closed_forms() -> std::result::Result<(), String> {
    let run = |scores: Vec<f64>, kind: GatingKind| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::row_vector(scores))?;
        let alpha = gate_values(&mut tape, s, kind)?;
        Ok(tape.value(alpha).data().to_vec())
    };
    // softmax([0, ln 2]) = [1/3, 2/3].
    match run(vec![0.0, 2.0f64.ln()], GatingKind::Softmax) {
        Ok(v) => {
            if (v[0] - 1.0 / 3.0).abs() > 1e-12 || (v[1] - 2.0 / 3.0).abs() > 1e-12 {
                return Err(format!("softmax([0, ln 2]) = {v:?}, expected [1/3, 2/3]"));
            }
        }
        Err(e) => return Err(e.to_string()),
    }
    // sigmoid(0) = 1/2 and sigmoid(ln 3) = 3/4.
    match run(vec![0.0, 3.0f64.ln()], GatingKind::Sigmoid) {
        Ok(v) => check(
            (v[0] - 0.5).abs() <= 1e-12 && (v[1] - 0.75).abs() <= 1e-12,
            format!("sigmoid([0, ln 3]) = {v:?}, expected [0.5, 0.75]"),
        ),
        Err(e) => Err(e.to_string()),
    }
}
