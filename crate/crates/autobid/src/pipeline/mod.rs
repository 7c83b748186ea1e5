//! The iterative loop: explore safely around the current policy, collect a
//! dataset, weight it, train the next policy offline, refresh the safe set,
//! and report. Also hosts the experiment recipes for the ablations.

pub mod ablate;
mod collect;

pub use collect::{collect_dataset, CollectStats, SafetyMode};

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::config::{text_hash, ConfigError, KvFile};
use crate::data::{DataError, NoiseKind};
use crate::env::WorldConfig;
use crate::iql::{self, IqlConfig, IqlError};
use crate::nn::{self, NnError, TrainConfig};
use crate::policy::{NoiseConfig, Policy};
use crate::rollout::evaluate_policy;
use crate::seas::{fit_q_sarsa, MlpQ, SafeEntry, SafePolicySet};
use crate::weighting;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Iql(#[from] IqlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("iteration {iteration} aborted ({reason}); prior policy retained")]
    IterationAborted { iteration: usize, reason: String },
    #[error("initial policy distillation error {err:.4} exceeds 5% of the action range")]
    DistillationError { err: f64 },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub iterations: usize,
    pub transitions_per_iteration: usize,
    pub noise_kind: NoiseKind,
    pub sigma: f64,
    /// Trajectory-weighting temperature.
    pub alpha: f64,
    /// Safety coefficient.
    pub epsilon: f64,
    pub gamma: f64,
    /// Safe-set size: the initial policy plus up to `safe_history - 1` recent
    /// trained policies.
    pub safe_history: usize,
    pub eval_episodes: usize,
    /// Episodes of mildly noised safe-policy rollouts used to fit its Q.
    pub q_fit_episodes: usize,
    pub q_fit_sigma: f64,
    pub world: WorldConfig,
    /// Reward-model and initial-value fits.
    pub model_train: TrainConfig,
    /// SARSA Q fits.
    pub q_train: TrainConfig,
    pub iql: IqlConfig,
    pub master_seed: u64,
}

impl RunConfig {
    /// Desk-scale profile: small enough for repeated runs on a laptop while
    /// keeping the full market structure (auction pressure, binding budgets).
    pub fn desk() -> Self {
        Self {
            iterations: 5,
            transitions_per_iteration: 20_000,
            noise_kind: NoiseKind::Psn,
            sigma: 0.05,
            alpha: 0.1,
            epsilon: 0.05,
            gamma: 1.0,
            safe_history: 3,
            eval_episodes: 2000,
            q_fit_episodes: 400,
            q_fit_sigma: 1.0,
            world: WorldConfig {
                num_advertisers: 8,
                episode_steps: 32,
                ..WorldConfig::default()
            },
            model_train: TrainConfig { gradient_steps: 3000, ..TrainConfig::default() },
            q_train: TrainConfig { gradient_steps: 4000, ..TrainConfig::default() },
            iql: IqlConfig { gradient_steps: 8000, ..IqlConfig::default() },
            master_seed: 0,
        }
    }

    /// The full-scale profile: 30 advertisers, 96 steps, 100k transitions.
    pub fn full() -> Self {
        Self {
            transitions_per_iteration: 100_000,
            world: WorldConfig::default(),
            ..Self::desk()
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, ConfigError> {
        let mut cfg = match kv.str_or("profile", "desk") {
            "full" => Self::full(),
            _ => Self::desk(),
        };
        cfg.iterations = kv.usize_or("iterations", cfg.iterations)?;
        cfg.transitions_per_iteration =
            kv.usize_or("transitions_per_iteration", cfg.transitions_per_iteration)?;
        cfg.noise_kind = match kv.str_or("noise_kind", "psn") {
            "psn" => NoiseKind::Psn,
            "asn" => NoiseKind::Asn,
            "none" => NoiseKind::None,
            other => {
                return Err(ConfigError::Value {
                    key: "noise_kind".into(),
                    msg: format!("unknown kind '{other}'"),
                })
            }
        };
        cfg.sigma = kv.f64_or("sigma", cfg.sigma)?;
        cfg.alpha = kv.f64_or("alpha", cfg.alpha)?;
        cfg.epsilon = kv.f64_or("epsilon", cfg.epsilon)?;
        cfg.gamma = kv.f64_or("gamma", cfg.gamma)?;
        cfg.safe_history = kv.usize_or("safe_history", cfg.safe_history)?;
        cfg.eval_episodes = kv.usize_or("eval_episodes", cfg.eval_episodes)?;
        cfg.q_fit_episodes = kv.usize_or("q_fit_episodes", cfg.q_fit_episodes)?;
        cfg.q_fit_sigma = kv.f64_or("q_fit_sigma", cfg.q_fit_sigma)?;
        cfg.master_seed = kv.u64_or("master_seed", cfg.master_seed)?;
        cfg.iql.gradient_steps = kv.usize_or("iql_gradient_steps", cfg.iql.gradient_steps)?;
        cfg.model_train.gradient_steps =
            kv.usize_or("model_gradient_steps", cfg.model_train.gradient_steps)?;
        cfg.q_train.gradient_steps = kv.usize_or("q_gradient_steps", cfg.q_train.gradient_steps)?;
        cfg.world = WorldConfig::from_kv(kv)?;
        if cfg.world.num_advertisers == WorldConfig::default().num_advertisers
            && kv.get("num_advertisers").is_none()
            && kv.str_or("profile", "desk") != "full"
        {
            // desk profile keeps its smaller market unless overridden
            cfg.world.num_advertisers = 8;
            cfg.world.episode_steps = kv.usize_or("episode_steps", 32)?;
        }
        if cfg.iterations == 0 {
            return Err(ConfigError::Invalid("iterations must be >= 1".into()));
        }
        if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
            return Err(ConfigError::Invalid("epsilon must be in (0,1)".into()));
        }
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        format!(
            "iterations={}\ntransitions_per_iteration={}\nnoise_kind={}\nsigma={}\nalpha={}\nepsilon={}\ngamma={}\nsafe_history={}\neval_episodes={}\nq_fit_episodes={}\nq_fit_sigma={}\nmaster_seed={}\niql_gradient_steps={}\nmodel_gradient_steps={}\nq_gradient_steps={}\n{}",
            self.iterations,
            self.transitions_per_iteration,
            self.noise_kind,
            self.sigma,
            self.alpha,
            self.epsilon,
            self.gamma,
            self.safe_history,
            self.eval_episodes,
            self.q_fit_episodes,
            self.q_fit_sigma,
            self.master_seed,
            self.iql.gradient_steps,
            self.model_train.gradient_steps,
            self.q_train.gradient_steps,
            self.world.dump()
        )
    }

    pub fn config_hash(&self) -> u64 {
        text_hash(&self.dump())
    }
}

/// Deterministic budget-pacing heuristic: the bidding parameter scales with
/// how far budget consumption runs ahead of time. On pace gives the geometric
/// middle of the action interval; an over-spent campaign bids down (higher
/// lambda), a campaign with surplus budget bids up.
pub fn pacing_rule(s: &crate::env::State, lambda_range: (f64, f64)) -> f64 {
    let (lo, hi) = lambda_range;
    let mid = (lo * hi).sqrt();
    let time_left = (1.0 - s.time_frac).max(0.05);
    let budget_left = (1.0 - s.consumed_frac).max(0.0);
    let pace = budget_left / time_left;
    (mid / pace.max(1e-3)).clamp(lo, hi)
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    /// Maximum |rule - policy| over the state grid, as a fraction of the
    /// action range.
    pub max_err_frac: f64,
    pub grid_points: usize,
}

/// The initial safe policy: the pacing rule distilled into the standard
/// policy network so parameter-space perturbations apply to it.
///
/// The fit runs in pre-squash space: the rule's clamped outputs are mapped
/// through the squash inverse (with a hair of margin so the inverse stays
/// finite) and regressed with an identity-output network whose parameters are
/// then reused under the squashed policy spec. This keeps the regression
/// well-conditioned where the rule saturates the action interval.
pub fn initial_safe_policy(cfg: &RunConfig) -> Result<(Policy, DistillReport), PipelineError> {
    let lambda_range = cfg.world.lambda_range;
    let (lo, hi) = lambda_range;
    let spec = Policy::spec_for(lambda_range);
    let fit_spec = nn::MlpSpec::new(
        spec.layer_sizes.clone(),
        spec.activation,
        nn::OutputTransform::Identity,
    )
    .expect("policy spec shape is valid");
    let margin = 1e-3 * (hi - lo);
    let unsquash = |y: f64| {
        let c = y.clamp(lo + margin, hi - margin);
        (2.0 * (c - lo) / (hi - lo) - 1.0).atanh()
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let b_hi_ratio = cfg.world.budget_range.1 / cfg.world.budget_scale;
    let b_lo_ratio = cfg.world.budget_range.0 / cfg.world.budget_scale;
    let grid = 17;
    for ti in 0..grid {
        for ci in 0..grid {
            for bi in 0..3 {
                let time_frac = ti as f64 / (grid - 1) as f64;
                let consumed = ci as f64 / (grid - 1) as f64;
                let b0 = b_lo_ratio + (b_hi_ratio - b_lo_ratio) * bi as f64 / 2.0;
                let s = crate::env::State {
                    time_frac,
                    consumed_frac: consumed,
                    budget_left_scaled: b0 * (1.0 - consumed),
                };
                let y = pacing_rule(&s, lambda_range);
                xs.push(s.as_array().to_vec());
                ys.push(y);
                zs.push(unsquash(y));
            }
        }
    }
    let train = TrainConfig {
        gradient_steps: 8000,
        batch_size: 256,
        step_size: 3e-3,
        seed: crate::rollout::derive_seed(cfg.master_seed, 0xD157, 0),
        ..TrainConfig::default()
    };
    let theta = nn::train_regression(&fit_spec, &xs, &zs, &train, nn::LossKind::Squared)?;
    let policy = Policy::new(spec.clone(), theta);
    let range = hi - lo;
    let mut max_err: f64 = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        let pred = nn::forward_scalar(&spec, &policy.theta, x);
        max_err = max_err.max((pred - y).abs() / range);
    }
    let report = DistillReport { max_err_frac: max_err, grid_points: xs.len() };
    if max_err > 0.05 {
        return Err(PipelineError::DistillationError { err: max_err });
    }
    Ok((policy, report))
}

/// One safe policy with its fitted Q and estimated performance.
pub struct SafeCandidate {
    pub policy: Policy,
    pub q: MlpQ,
    pub j_estimate: f64,
}

/// Mutable state threaded through the iterations.
pub struct RunState {
    pub current: Policy,
    /// Evaluation of `current` (known after its training iteration).
    pub current_eval: Option<(f64, f64)>,
    pub initial: SafeCandidate,
    pub trained: Vec<SafeCandidate>,
    pub j_s: f64,
    pub j_s_se: f64,
}

impl RunState {
    pub fn safe_set(&self, history: usize, epsilon: f64) -> SafePolicySet {
        let mut entries: Vec<SafeEntry> = vec![SafeEntry {
            policy: self.initial.policy.clone(),
            q: Box::new(self.initial.q.clone()),
        }];
        let extra = history.saturating_sub(1);
        let start = self.trained.len().saturating_sub(extra);
        for cand in &self.trained[start..] {
            entries.push(SafeEntry { policy: cand.policy.clone(), q: Box::new(cand.q.clone()) });
        }
        SafePolicySet::new(entries, self.j_s, self.j_s_se, epsilon)
    }
}

/// Bootstrap the run: distill the pacing policy, estimate its performance,
/// and fit its Q from its own mildly noised rollouts (underestimation is the
/// safe direction for the selection rule).
pub fn bootstrap(cfg: &RunConfig) -> Result<RunState, PipelineError> {
    let (policy, _report) = initial_safe_policy(cfg)?;
    let js = evaluate_policy(
        &policy,
        &cfg.world,
        cfg.eval_episodes,
        crate::rollout::derive_seed(cfg.master_seed, 0x15, 0),
    );
    let noise = NoiseConfig { kind: NoiseKind::Asn, sigma: cfg.q_fit_sigma, seed: 0 };
    let (q_data, _) = collect_dataset(
        &policy,
        &noise,
        &SafetyMode::None,
        &cfg.world,
        cfg.q_fit_episodes * cfg.world.episode_steps,
        0,
        crate::rollout::derive_seed(cfg.master_seed, 0x9F17, 0),
    );
    let mut q_train = cfg.q_train.clone();
    q_train.seed = crate::rollout::derive_seed(cfg.master_seed, 0x9F17, 1);
    let q = fit_q_sarsa(&q_data, cfg.gamma, &q_train, 1000)?;
    Ok(RunState {
        current: policy.clone(),
        current_eval: Some((js.mean, js.se)),
        initial: SafeCandidate { policy, q, j_estimate: js.mean },
        trained: Vec::new(),
        j_s: js.mean,
        j_s_se: js.se,
        // j_s is the initial safe policy's performance and stays fixed
    })
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: usize,
    pub exploration_mean: f64,
    pub exploration_se: f64,
    pub threshold: f64,
    pub j_s: f64,
    pub trained_mean: f64,
    pub trained_se: f64,
    pub a_hat_min: f64,
    pub a_hat_mean: f64,
    pub a_hat_max: f64,
    pub a_hat_std: f64,
    pub clamped_values: usize,
    pub seas_exploratory_rate: f64,
    pub seed: u64,
    pub config_hash: u64,
    pub version: String,
}

impl IterationReport {
    pub fn csv_header() -> &'static str {
        "iteration,exploration_mean,exploration_se,threshold,j_s,trained_mean,trained_se,a_hat_min,a_hat_mean,a_hat_max,a_hat_std,clamped_values,seas_exploratory_rate,seed,config_hash,version"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:016x},{}",
            self.iteration,
            self.exploration_mean,
            self.exploration_se,
            self.threshold,
            self.j_s,
            self.trained_mean,
            self.trained_se,
            self.a_hat_min,
            self.a_hat_mean,
            self.a_hat_max,
            self.a_hat_std,
            self.clamped_values,
            self.seas_exploratory_rate,
            self.seed,
            self.config_hash,
            self.version
        )
    }
}

/// Write a file atomically (temp file + rename).
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.flush()?;
    }
    fs::rename(&tmp, path)
}

/// One full iteration: safe exploration, weighting, offline training,
/// safe-set refresh. Returns the next policy and the report; on training
/// failure the caller keeps the prior policy.
pub fn run_iteration(
    k: usize,
    state: &mut RunState,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<IterationReport, PipelineError> {
    let seed = crate::rollout::derive_seed(cfg.master_seed, 0x17E2, k as u64);
    let safe_set = state.safe_set(cfg.safe_history, cfg.epsilon);
    let noise = NoiseConfig { kind: cfg.noise_kind, sigma: cfg.sigma, seed };
    let (dataset, stats) = collect_dataset(
        &state.current,
        &noise,
        &SafetyMode::Seas(&safe_set),
        &cfg.world,
        cfg.transitions_per_iteration,
        k as u32,
        seed,
    );
    if let Some(dir) = out_dir {
        let iter_dir = dir.join(format!("iter_{k:03}"));
        fs::create_dir_all(&iter_dir)?;
        dataset.save(&iter_dir.join("dataset.csv"))?;
    }

    // robust trajectory weighting
    let mut model_train = cfg.model_train.clone();
    model_train.seed = crate::rollout::derive_seed(seed, 0x3E4A, 1);
    let reward_model = weighting::fit_reward_model(&dataset, &model_train)?;
    let r_bar = weighting::relabel_returns(&dataset, &reward_model, cfg.gamma);
    let mut value_train = cfg.model_train.clone();
    value_train.seed = crate::rollout::derive_seed(seed, 0x3E4A, 2);
    let v_model = weighting::fit_initial_value(&dataset, &r_bar, &value_train)?;
    let qualities = weighting::qualities(&dataset, r_bar, &v_model, cfg.gamma);
    let weights = weighting::weights(&qualities, cfg.alpha, &dataset);
    if let Some(dir) = out_dir {
        weights.export_csv(&dataset, &dir.join(format!("iter_{k:03}")).join("weights.csv"))?;
    }

    // offline training
    let mut iql_cfg = cfg.iql.clone();
    iql_cfg.gamma = cfg.gamma;
    iql_cfg.seed = crate::rollout::derive_seed(seed, 0x101, 3);
    let bundle = match iql::train_iql(&dataset, &weights, &iql_cfg, cfg.world.lambda_range) {
        Ok(b) => b,
        Err(e) => {
            return Err(PipelineError::IterationAborted { iteration: k, reason: e.to_string() })
        }
    };
    let eval = evaluate_policy(
        &bundle.policy,
        &cfg.world,
        cfg.eval_episodes,
        crate::rollout::derive_seed(seed, 0xE7A1, 4),
    );

    // refresh the safe set: SARSA Q on this iteration's dataset evaluates the
    // collected behaviour around the current policy (an underestimate of the
    // current policy itself, which keeps the selection conservative)
    let mut q_train = cfg.q_train.clone();
    q_train.seed = crate::rollout::derive_seed(seed, 0x54A5, 5);
    let q_fit = fit_q_sarsa(&dataset, cfg.gamma, &q_train, 1000)?;
    let current_j = state.current_eval.map(|(m, _)| m).unwrap_or(f64::NEG_INFINITY);
    if current_j >= state.j_s {
        state.trained.push(SafeCandidate {
            policy: state.current.clone(),
            q: q_fit,
            j_estimate: current_j,
        });
    }

    let n = qualities.a_hat.len() as f64;
    let mean_a = qualities.a_hat.iter().sum::<f64>() / n;
    let var_a = qualities.a_hat.iter().map(|a| (a - mean_a) * (a - mean_a)).sum::<f64>() / n;
    let report = IterationReport {
        iteration: k,
        exploration_mean: stats.exploration.mean,
        exploration_se: stats.exploration.se,
        threshold: safe_set.threshold(),
        j_s: state.j_s,
        trained_mean: eval.mean,
        trained_se: eval.se,
        a_hat_min: qualities.a_hat.iter().cloned().fold(f64::INFINITY, f64::min),
        a_hat_mean: mean_a,
        a_hat_max: qualities.a_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        a_hat_std: var_a.sqrt(),
        clamped_values: qualities.clamped,
        seas_exploratory_rate: stats.exploratory_rate,
        seed,
        config_hash: cfg.config_hash(),
        version: CODE_VERSION.to_string(),
    };
    if let Some(dir) = out_dir {
        let iter_dir = dir.join(format!("iter_{k:03}"));
        write_atomic(
            &iter_dir.join("report.csv"),
            &format!("{}\n{}\n", IterationReport::csv_header(), report.csv_row()),
        )?;
        nn::save_params(
            &iter_dir.join("policy.bin"),
            &bundle.policy.spec,
            &bundle.policy.theta,
        )?;
    }

    state.current = bundle.policy;
    state.current_eval = Some((eval.mean, eval.se));
    Ok(report)
}

/// Run the full iterative loop, persisting per-iteration artifacts and a
/// cumulative report file.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<IterationReport>, PipelineError> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_manifest(cfg, dir)?;
    }
    let mut state = bootstrap(cfg)?;
    let mut reports = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let report = run_iteration(k, &mut state, cfg, out_dir)?;
        reports.push(report);
        if let Some(dir) = out_dir {
            let mut text = String::from(IterationReport::csv_header());
            text.push('\n');
            for r in &reports {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            write_atomic(&dir.join("reports.csv"), &text)?;
        }
    }
    Ok(reports)
}

pub fn write_manifest(cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
    let manifest = format!(
        "version={CODE_VERSION}\nconfig_hash={:016x}\n{}",
        cfg.config_hash(),
        cfg.dump()
    );
    write_atomic(&dir.join("manifest.txt"), &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.world.episode_steps = 8;
        cfg.world.num_advertisers = 4;
        cfg.world.impressions_per_step = (10, 30);
        cfg.world.budget_range = (60.0, 120.0);
        cfg.world.budget_scale = 120.0;
        cfg.transitions_per_iteration = 400;
        cfg.eval_episodes = 50;
        cfg.q_fit_episodes = 30;
        cfg.iterations = 1;
        cfg.model_train.gradient_steps = 200;
        cfg.q_train.gradient_steps = 200;
        cfg.iql.gradient_steps = 300;
        cfg
    }

    #[test]
    fn pacing_rule_anchor_points() {
        let range = (0.1, 10.0);
        // full budget at time zero: on pace, geometric middle
        let s0 = crate::env::State { time_frac: 0.0, consumed_frac: 0.0, budget_left_scaled: 1.0 };
        assert!((pacing_rule(&s0, range) - 1.0).abs() < 1e-12);
        // nearly exhausted early: bids must shrink, lambda at the high end
        let s1 = crate::env::State { time_frac: 0.1, consumed_frac: 0.99, budget_left_scaled: 0.01 };
        assert!(pacing_rule(&s1, range) > 9.0);
        // surplus budget late: bid up, lambda below the middle
        let s2 = crate::env::State { time_frac: 0.9, consumed_frac: 0.2, budget_left_scaled: 0.8 };
        assert!(pacing_rule(&s2, range) < 1.0);
    }

    #[test]
    fn pacing_rule_monotone_in_consumption() {
        let range = (0.1, 10.0);
        let mut last = 0.0;
        for ci in 0..20 {
            let consumed = ci as f64 / 20.0;
            let s = crate::env::State { time_frac: 0.5, consumed_frac: consumed, budget_left_scaled: 1.0 - consumed };
            let l = pacing_rule(&s, range);
            assert!(l >= last - 1e-12, "lambda must not decrease as consumption grows");
            last = l;
        }
    }

    #[test]
    fn distillation_matches_the_rule_on_the_grid() {
        let cfg = tiny_cfg();
        let (policy, report) = initial_safe_policy(&cfg).unwrap();
        assert!(report.max_err_frac <= 0.05, "max grid error {}", report.max_err_frac);
        // anchor point: on-pace state close to the geometric middle
        let s = crate::env::State { time_frac: 0.0, consumed_frac: 0.0, budget_left_scaled: 1.0 };
        let a = policy.act(&s);
        assert!((a - 1.0).abs() < 0.5, "distilled on-pace action {a}");
    }

    #[test]
    fn smoke_iteration_end_to_end() {
        let cfg = tiny_cfg();
        let dir = std::env::temp_dir().join("autobid_pipeline_smoke");
        let _ = fs::remove_dir_all(&dir);
        let reports = run(&cfg, Some(&dir)).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(dir.join("manifest.txt").exists());
        assert!(dir.join("reports.csv").exists());
        assert!(dir.join("iter_000").join("dataset.csv").exists());
        assert!(dir.join("iter_000").join("weights.csv").exists());
        assert!(dir.join("iter_000").join("policy.bin").exists());
        let loaded = Dataset::load(&dir.join("iter_000").join("dataset.csv")).unwrap();
        loaded.validate().unwrap();
        assert!(loaded.trajectories.iter().all(|t| t.provenance.seas));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = tiny_cfg();
        let a = run(&cfg, None).unwrap();
        let b = run(&cfg, None).unwrap();
        let rows_a: Vec<String> = a.iter().map(|r| r.csv_row()).collect();
        let rows_b: Vec<String> = b.iter().map(|r| r.csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }
}
