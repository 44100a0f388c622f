use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use soc_core::bench::{
    compare, expected_gradient, gradient_variance, oracle_check, probe_points, run_experiment, EvalMeasure,
    ExperimentSpec, GradientProbe, GradientStats,
};
use soc_core::control::{Activation, MlpControl};
use soc_core::losses::{LossKind, LossOptions, TaxonomyClass};
use soc_core::problem::{make_setting, Setting, SettingConfig};
use soc_core::simulate::TimeGrid;
use soc_core::train::derive_seed;

#[derive(Parser)]
#[command(name = "socbench", version, about = "Stochastic optimal control loss benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured loss and write curves plus a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's evaluation measure.
        #[arg(long)]
        eval_measure: Option<EvalMeasure>,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare expected gradients of losses at a fixed random control.
    Equivalence {
        #[command(flatten)]
        probe: ProbeArgs,
        /// `class:<I..VI>` for every pair in a class, or `<loss>:<loss>`.
        #[arg(long, required = true)]
        pairs: Vec<String>,
        #[arg(long, default_value_t = 100_000)]
        m: usize,
        #[arg(long, default_value_t = 50)]
        chunks: usize,
        #[arg(long, default_value_t = 3.0)]
        multiplier: f64,
    },
    /// Per-batch gradient variance of losses at a fixed random control.
    Variance {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        losses: Vec<LossKind>,
        #[arg(long, default_value_t = 64)]
        m_per_sample: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Print the ground-truth value at probe points, optionally against Monte Carlo.
    Oracle {
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        d: Option<usize>,
        /// Compare with Feynman–Kac estimates and fail on a mismatch.
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 100_000)]
        m: usize,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value = "lq2d")]
    setting: Setting,
    #[arg(long)]
    d: Option<usize>,
    /// Time steps.
    #[arg(long = "steps", short = 'k', default_value_t = 40)]
    steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    /// Seed of the random control.
    #[arg(long, default_value_t = 1)]
    theta_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn setting_config(setting: Setting, d: Option<usize>) -> SettingConfig {
    SettingConfig { d, ..SettingConfig::named(setting) }
}

fn parse_pairs(specs: &[String]) -> Result<Vec<(LossKind, LossKind)>> {
    let mut out = vec![];
    for s in specs {
        let (l, r) = s.split_once(':').with_context(|| format!("pair `{s}` needs a `:`"))?;
        if l == "class" {
            let members = r.parse::<TaxonomyClass>()?.members();
            for (i, a) in members.iter().enumerate() {
                out.extend(members[i + 1..].iter().map(|b| (*a, *b)));
            }
        } else {
            out.push((l.parse()?, r.parse()?));
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    soc_core::parallel::init_thread_pool();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, eval_measure, output } => {
            let mut spec = ExperimentSpec::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(m) = eval_measure {
                spec.train.eval_measure = m;
            }
            if let Some(o) = output {
                spec.output = o;
            }
            let outcome = run_experiment(&spec)?;
            for r in &outcome.runs {
                let err = r.final_l2_error_ema.map_or("-".into(), |e| format!("{e:.4e}"));
                println!("{:<26} seed {:<3} {:<7} final EMA error {err}", r.loss.name(), r.seed, r.status);
            }
            println!("wrote {}", spec.output.join("manifest.json").display());
            Ok(outcome.all_ok())
        }
        Command::Equivalence { probe, pairs, m, chunks, multiplier } => {
            let pairs = parse_pairs(&pairs)?;
            let (problem, _) = make_setting(&setting_config(probe.setting, probe.d))?;
            let ctrl = MlpControl::new_random(problem.dim, &probe.hidden, Activation::Silu, probe.theta_seed, 1.0);
            let grid = TimeGrid::uniform(problem.horizon, probe.steps);
            let gp = GradientProbe { problem: &problem, ctrl: &ctrl, family: None, grid: &grid, options: LossOptions::default() };
            let mut losses: Vec<LossKind> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
            losses.sort_by_key(|k| LossKind::ALL.iter().position(|x| x == k));
            losses.dedup();
            let mut stats: Vec<(LossKind, GradientStats)> = vec![];
            for (i, &k) in losses.iter().enumerate() {
                stats.push((k, expected_gradient(&gp, k, m, chunks, derive_seed(probe.seed, i as u64))?));
            }
            let get = |k: LossKind| &stats.iter().find(|s| s.0 == k).unwrap().1;
            let mut all = true;
            for (a, b) in pairs {
                let r = compare(get(a), get(b), multiplier);
                all &= r.pass;
                println!(
                    "{} {:<26} vs {:<26} diff {:.3e}  se {:.3e}  ratio {:>6.2}  rel {:.2e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    a.name(),
                    b.name(),
                    r.difference,
                    r.pooled_se,
                    r.ratio(),
                    r.relative
                );
            }
            Ok(all)
        }
        Command::Variance { probe, losses, m_per_sample, samples } => {
            let (problem, _) = make_setting(&setting_config(probe.setting, probe.d))?;
            let ctrl = MlpControl::new_random(problem.dim, &probe.hidden, Activation::Silu, probe.theta_seed, 1.0);
            let grid = TimeGrid::uniform(problem.horizon, probe.steps);
            let gp = GradientProbe { problem: &problem, ctrl: &ctrl, family: None, grid: &grid, options: LossOptions::default() };
            println!("loss,m_per_sample,samples,trace,mean_norm");
            for (i, k) in losses.into_iter().enumerate() {
                let r = gradient_variance(&gp, k, m_per_sample, samples, derive_seed(probe.seed, i as u64))?;
                let norm = r.mean.iter().map(|g| g * g).sum::<f64>().sqrt();
                println!("{},{},{},{:.6e},{:.6e}", k.name(), m_per_sample, samples, r.trace, norm);
            }
            Ok(true)
        }
        Command::Oracle { setting, d, check, m, steps, probes, seed } => {
            let (problem, gt) = make_setting(&setting_config(setting, d))?;
            let points = probe_points(&problem, probes, seed);
            if !check {
                for (x, t) in &points {
                    println!("t={t:.3} x={x:?} V={:.6}", gt.value(x, *t));
                }
                return Ok(true);
            }
            if m < 2 {
                bail!("--m must be at least 2");
            }
            let report = oracle_check(&problem, &gt, &points, m, steps, seed, 3.0);
            for p in &report {
                println!(
                    "{} t={:.3} x0={:+.3} oracle {:.5} mc {:.5} ± {:.5}",
                    if p.pass { "PASS" } else { "FAIL" },
                    p.t,
                    p.x[0],
                    p.oracle,
                    p.monte_carlo,
                    p.se
                );
            }
            Ok(report.iter().all(|p| p.pass))
        }
    }
}
