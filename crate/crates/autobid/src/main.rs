use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use autobid::config::KvFile;
use autobid::data::{Dataset, NoiseKind};
use autobid::iql::{self, IqlConfig};
use autobid::nn;
use autobid::pipeline::{self, ablate, RunConfig, SafetyMode};
use autobid::policy::{NoiseConfig, Policy};
use autobid::rollout::evaluate_policy;
use autobid::tabular;

#[derive(Parser)]
#[command(name = "autobid", version, about = "Iterative offline RL for budget-constrained auto-bidding")]
struct Cli {
    /// Run configuration file (key=value lines); defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    None,
    Psn,
    Asn,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an exploration dataset around the distilled pacing policy.
    Collect {
        #[arg(long, value_enum, default_value = "psn")]
        noise: NoiseArg,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        transitions: Option<usize>,
        /// Wrap exploration in the adaptive safe-action selector.
        #[arg(long)]
        safety: bool,
    },
    /// Train a policy offline from a dataset CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Uniform sampling instead of robust trajectory weighting.
        #[arg(long)]
        uniform: bool,
    },
    /// Run the full iterative loop.
    Iterate {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a saved policy.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
    },
    /// Experiment recipes.
    Ablate {
        #[command(subcommand)]
        which: AblateCommand,
    },
    /// Exact small-MDP verification oracles.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Action-noise scale sweep: exploration and trained returns per sigma.
    Noise {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.5, 1.0, 2.0])]
        sigmas: Vec<f64>,
    },
    /// Exploration/exploitation four-way matrix across budget levels.
    Tee {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1500.0, 2000.0, 2500.0, 3000.0])]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Reward-model usefulness across environment stochasticity levels.
    Stochasticity {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Safety-method comparison plus the epsilon sweep.
    Safety {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.4, 0.3, 0.2, 0.1, 0.05, 0.01])]
        eps_grid: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Exact safety-bound verification on randomized tabular MDPs.
    Theorem1 {
        /// Optional MDP definition file (key=value with table sections).
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Exact weighted-behaviour-policy dominance verification.
    AppendixA {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::from_kv(&KvFile::load(path)?)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(&cli.config, cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Collect { noise, sigma, transitions, safety } => {
            let (base, _) = pipeline::initial_safe_policy(&cfg)?;
            let kind = match noise {
                NoiseArg::None => NoiseKind::None,
                NoiseArg::Psn => NoiseKind::Psn,
                NoiseArg::Asn => NoiseKind::Asn,
            };
            let noise_cfg = NoiseConfig {
                kind,
                sigma: sigma.unwrap_or(cfg.sigma),
                seed: cfg.master_seed,
            };
            let n = transitions.unwrap_or(cfg.transitions_per_iteration);
            let (dataset, stats) = if safety {
                let state = pipeline::bootstrap(&cfg)?;
                let safe_set = state.safe_set(cfg.safe_history, cfg.epsilon);
                pipeline::collect_dataset(
                    &state.initial.policy,
                    &noise_cfg,
                    &SafetyMode::Seas(&safe_set),
                    &cfg.world,
                    n,
                    0,
                    cfg.master_seed,
                )
            } else {
                pipeline::collect_dataset(
                    &base,
                    &noise_cfg,
                    &SafetyMode::None,
                    &cfg.world,
                    n,
                    0,
                    cfg.master_seed,
                )
            };
            let path = cli.out.join("dataset.csv");
            dataset.save(&path)?;
            println!(
                "collected {} transitions in {} episodes; mean return {:.3} (se {:.3}); exploratory rate {:.3}",
                dataset.n_transitions(),
                dataset.len(),
                stats.exploration.mean,
                stats.exploration.se,
                stats.exploratory_rate
            );
            println!("wrote {}", path.display());
        }
        Command::Train { dataset, uniform } => {
            let ds = Dataset::load(&dataset)?;
            ds.validate()?;
            let strategy = if uniform { ablate::Weighting::Uniform } else { ablate::Weighting::Robust };
            let weights = ablate::make_weights(&ds, strategy, &cfg, cfg.master_seed)?;
            let mut iql_cfg: IqlConfig = cfg.iql.clone();
            iql_cfg.gamma = cfg.gamma;
            iql_cfg.seed = cfg.master_seed;
            let bundle = iql::train_iql(&ds, &weights, &iql_cfg, cfg.world.lambda_range)?;
            let eval = evaluate_policy(&bundle.policy, &cfg.world, cfg.eval_episodes, cfg.master_seed);
            nn::save_params(&cli.out.join("policy.bin"), &bundle.policy.spec, &bundle.policy.theta)?;
            println!("trained policy mean return {:.3} (se {:.3})", eval.mean, eval.se);
            println!("wrote {}", cli.out.join("policy.bin").display());
        }
        Command::Iterate { iterations } => {
            let mut cfg = cfg;
            if let Some(k) = iterations {
                cfg.iterations = k;
            }
            let reports = pipeline::run(&cfg, Some(&cli.out))?;
            for r in &reports {
                println!(
                    "iter {}: exploration {:.3} (threshold {:.3}), trained {:.3} (se {:.3}), exploratory rate {:.3}",
                    r.iteration, r.exploration_mean, r.threshold, r.trained_mean, r.trained_se, r.seas_exploratory_rate
                );
            }
        }
        Command::Evaluate { policy, episodes } => {
            let (spec, theta) = nn::load_params(&policy)?;
            let policy = Policy::new(spec, theta);
            let eval = evaluate_policy(&policy, &cfg.world, episodes, cfg.master_seed);
            println!("mean return {:.6} (se {:.6}) over {episodes} episodes", eval.mean, eval.se);
        }
        Command::Ablate { which } => run_ablation(which, &cfg, &cli.out)?,
        Command::Oracle { which } => run_oracle(which, &cfg, &cli.out)?,
    }
    Ok(())
}

fn run_ablation(
    which: AblateCommand,
    cfg: &RunConfig,
    out: &std::path::Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let (base, _) = pipeline::initial_safe_policy(cfg)?;
    match which {
        AblateCommand::Noise { sigmas } => {
            let rows = ablate::noise_sweep(&base, &sigmas, cfg, cfg.master_seed)?;
            let path = out.join("noise_sweep.csv");
            ablate::noise_sweep_csv(&rows, &path)?;
            for r in &rows {
                println!(
                    "sigma {:.3}: exploration {:.3} (se {:.3}), trained {:.3} (se {:.3})",
                    r.sigma, r.exploration_mean, r.exploration_se, r.trained_mean, r.trained_se
                );
            }
            println!("wrote {}", path.display());
        }
        AblateCommand::Tee { budgets, seeds } => {
            let base_eval = evaluate_policy(&base, &cfg.world, cfg.eval_episodes, cfg.master_seed);
            let rows = ablate::tee_matrix(&base, &budgets, cfg, &seeds)?;
            let path = out.join("tee_matrix.csv");
            ablate::tee_csv(&rows, base_eval.mean, &path)?;
            for r in &rows {
                println!(
                    "{} (seed {}): avg {:.3} ({:+.2}% vs base)",
                    r.setting,
                    r.seed,
                    r.average,
                    100.0 * (r.average - base_eval.mean) / base_eval.mean
                );
            }
            println!("wrote {}", path.display());
        }
        AblateCommand::Stochasticity { seeds } => {
            let rows = ablate::stochasticity_sweep(&base, cfg, &seeds)?;
            let path = out.join("stochasticity.csv");
            ablate::stochasticity_csv(&rows, &path)?;
            for r in &rows {
                println!(
                    "level {} [{}, {}] seed {}: robust/raw {:.4}, raw/base {:.4}",
                    r.level,
                    r.impressions.0,
                    r.impressions.1,
                    r.seed,
                    r.r_robust / r.r_raw,
                    r.r_raw / r.r_base
                );
            }
            println!("wrote {}", path.display());
        }
        AblateCommand::Safety { seeds, eps_grid } => {
            let state = pipeline::bootstrap(cfg)?;
            let safe_set = state.safe_set(cfg.safe_history, cfg.epsilon);
            let rows = ablate::safety_baselines(&base, &safe_set, 0.01, 0.1, cfg, &seeds)?;
            let eps_rows = ablate::epsilon_sweep(
                &base,
                |eps| {
                    let mut s = state.safe_set(cfg.safe_history, eps);
                    s.j_s = state.j_s;
                    s
                },
                &eps_grid,
                2000,
                cfg,
                cfg.master_seed,
            )?;
            let path = out.join("safety.csv");
            ablate::safety_csv(&rows, &eps_rows, &path)?;
            for r in &rows {
                println!(
                    "{} (seed {}): trained {:.3}, exploration {:.3}, drop {:.4}",
                    r.setting, r.seed, r.trained_mean, r.exploration_mean, r.performance_drop
                );
            }
            for r in &eps_rows {
                println!(
                    "eps {:.2}: exploration {:.3}, drop {:.4} (bound {:.2})",
                    r.epsilon, r.exploration_mean, r.performance_drop, r.epsilon
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_oracle(
    which: OracleCommand,
    cfg: &RunConfig,
    out: &std::path::Path,
) -> Result<(), Box<dyn std::error::Error>> {
    match which {
        OracleCommand::Theorem1 { mdp, instances } => {
            let eps_grid = [0.4, 0.3, 0.2, 0.1, 0.05, 0.01];
            let mut rows = Vec::new();
            let mut all_pass = true;
            if let Some(path) = mdp {
                let parsed = tabular::TabularMdp::from_kv(&KvFile::load(&path)?)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                let pi_s = tabular::random_policy(&parsed, &mut rng);
                let j_s = tabular::conservative_j_s(&parsed, &pi_s);
                let safe = tabular::TabularSafeSet::exact(&parsed, vec![pi_s.clone()], j_s);
                for pi_e in tabular::adversarial_policies(&parsed, &pi_s) {
                    let report = tabular::verify_theorem1(&parsed, &pi_e, &safe, &eps_grid)?;
                    all_pass &= report.all_pass();
                    rows.extend(report.rows);
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                for _ in 0..instances {
                    let mdp = tabular::random_mdp(6, 3, 5, tabular::RewardStyle::DeterministicDyadic, &mut rng);
                    let pi_s = tabular::random_policy(&mdp, &mut rng);
                    let j_s = tabular::conservative_j_s(&mdp, &pi_s);
                    let safe = tabular::TabularSafeSet::exact(&mdp, vec![pi_s.clone()], j_s);
                    for pi_e in tabular::adversarial_policies(&mdp, &pi_s) {
                        let report = tabular::verify_theorem1(&mdp, &pi_e, &safe, &eps_grid)?;
                        all_pass &= report.all_pass();
                        rows.extend(report.rows);
                    }
                }
            }
            let mut text = String::from("epsilon,threshold,expected_return,slack,pass\n");
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.epsilon, r.threshold, r.expected_return, r.slack, r.pass
                ));
            }
            let path = out.join("theorem1.csv");
            pipeline::write_atomic(&path, &text)?;
            println!("{} checks, all pass: {all_pass}", rows.len());
            println!("wrote {}", path.display());
            if !all_pass {
                return Err("safety bound violated".into());
            }
        }
        OracleCommand::AppendixA { instances } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
            let mut all_pass = true;
            let mut text = String::from("instance,j_uniform,j_weighted,gain,pass\n");
            for i in 0..instances {
                let mdp = tabular::default_oracle_mdp(&mut rng);
                let mut collectors = Vec::new();
                for _ in 0..12 {
                    use rand::Rng;
                    let s0 = mdp.rho[rng.gen_range(0..mdp.rho.len())].0;
                    collectors.push((tabular::random_policy(&mdp, &mut rng), s0));
                }
                let report = tabular::verify_appendix_a(&mdp, &collectors, cfg.alpha)?;
                all_pass &= report.pass;
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    i, report.j_uniform, report.j_weighted, report.j_gain, report.pass
                ));
            }
            let path = out.join("appendix_a.csv");
            pipeline::write_atomic(&path, &text)?;
            println!("{instances} instances, all pass: {all_pass}");
            println!("wrote {}", path.display());
            if !all_pass {
                return Err("dominance violated".into());
            }
        }
    }
    Ok(())
}
