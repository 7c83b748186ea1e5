//! Experiment recipes: the action-noise scale sweep, the four-way
//! exploration/exploitation matrix, the reward-model stochasticity sweep, and
//! the safety-method comparison with its epsilon sweep.

use std::fmt;
use std::path::Path;

use crate::data::{Dataset, NoiseKind, WeightTable};
use crate::env::WorldConfig;
use crate::iql;
use crate::policy::{NoiseConfig, Policy};
use crate::rollout::{derive_seed, evaluate_policy, match_mean_sigma, MatchConfig};
use crate::seas::SafePolicySet;
use crate::weighting;

use super::{collect_dataset, write_atomic, PipelineError, RunConfig, SafetyMode};

/// Weighting strategy applied before offline training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    /// Relabeled-return weighting (reward model + initial-state value).
    Robust,
    /// Raw-return weighting: same construction without the reward model.
    RawReturn,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Weighting::Uniform => "uniform",
            Weighting::Robust => "robust",
            Weighting::RawReturn => "raw",
        };
        f.write_str(s)
    }
}

/// Compute the sampling weights for a collected dataset.
pub fn make_weights(
    dataset: &Dataset,
    strategy: Weighting,
    cfg: &RunConfig,
    seed: u64,
) -> Result<WeightTable, PipelineError> {
    match strategy {
        Weighting::Uniform => Ok(WeightTable::uniform(dataset.n_transitions())),
        Weighting::Robust => {
            let mut model_train = cfg.model_train.clone();
            model_train.seed = derive_seed(seed, 0xAB1E, 1);
            let reward_model = weighting::fit_reward_model(dataset, &model_train)?;
            let r_bar = weighting::relabel_returns(dataset, &reward_model, cfg.gamma);
            let mut value_train = cfg.model_train.clone();
            value_train.seed = derive_seed(seed, 0xAB1E, 2);
            let v_model = weighting::fit_initial_value(dataset, &r_bar, &value_train)?;
            let q = weighting::qualities(dataset, r_bar, &v_model, cfg.gamma);
            Ok(weighting::weights(&q, cfg.alpha, dataset))
        }
        Weighting::RawReturn => {
            let raw = dataset.returns(cfg.gamma);
            let mut value_train = cfg.model_train.clone();
            value_train.seed = derive_seed(seed, 0xAB1E, 3);
            let v_model = weighting::fit_initial_value(dataset, &raw, &value_train)?;
            let q = weighting::qualities(dataset, raw, &v_model, cfg.gamma);
            Ok(weighting::weights(&q, cfg.alpha, dataset))
        }
    }
}

/// Collect, weight, train, evaluate: the unit every recipe repeats.
pub fn collect_train_evaluate(
    base: &Policy,
    noise: &NoiseConfig,
    safety: &SafetyMode<'_>,
    strategy: Weighting,
    cfg: &RunConfig,
    world: &WorldConfig,
    seed: u64,
) -> Result<TrainedEvaluation, PipelineError> {
    let (dataset, stats) = collect_dataset(
        base,
        noise,
        safety,
        world,
        cfg.transitions_per_iteration,
        0,
        seed,
    );
    let weights = make_weights(&dataset, strategy, cfg, seed)?;
    let mut iql_cfg = cfg.iql.clone();
    iql_cfg.gamma = cfg.gamma;
    iql_cfg.seed = derive_seed(seed, 0x791, 0);
    let bundle = iql::train_iql(&dataset, &weights, &iql_cfg, world.lambda_range)
        .map_err(PipelineError::Iql)?;
    let eval = evaluate_policy(&bundle.policy, world, cfg.eval_episodes, derive_seed(seed, 0xE7A1, 1));
    Ok(TrainedEvaluation {
        exploration_mean: stats.exploration.mean,
        exploration_se: stats.exploration.se,
        trained_mean: eval.mean,
        trained_se: eval.se,
        policy: bundle.policy,
    })
}

pub struct TrainedEvaluation {
    pub exploration_mean: f64,
    pub exploration_se: f64,
    pub trained_mean: f64,
    pub trained_se: f64,
    pub policy: Policy,
}

// ---------------------------------------------------------------------------
// noise-scale sweep

#[derive(Debug, Clone)]
pub struct NoiseSweepRow {
    pub sigma: f64,
    pub exploration_mean: f64,
    pub exploration_se: f64,
    pub trained_mean: f64,
    pub trained_se: f64,
}

/// For each action-noise scale: collect, train uniformly, evaluate both the
/// exploration policy and the trained policy.
pub fn noise_sweep(
    base: &Policy,
    sigma_grid: &[f64],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<NoiseSweepRow>, PipelineError> {
    let mut rows = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let noise = NoiseConfig { kind: NoiseKind::Asn, sigma, seed };
        let out = collect_train_evaluate(
            base,
            &noise,
            &SafetyMode::None,
            Weighting::Uniform,
            cfg,
            &cfg.world,
            seed,
        )?;
        rows.push(NoiseSweepRow {
            sigma,
            exploration_mean: out.exploration_mean,
            exploration_se: out.exploration_se,
            trained_mean: out.trained_mean,
            trained_se: out.trained_se,
        });
    }
    Ok(rows)
}

pub fn noise_sweep_csv(rows: &[NoiseSweepRow], path: &Path) -> std::io::Result<()> {
    let mut text = String::from("sigma,exploration_mean,exploration_se,trained_mean,trained_se\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sigma, r.exploration_mean, r.exploration_se, r.trained_mean, r.trained_se
        ));
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// exploration/exploitation matrix

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeeSetting {
    /// Parameter noise + robust weighting.
    Tee,
    /// Action noise (strength matched to the parameter-noise mean return) +
    /// robust weighting.
    WithoutTExplore,
    /// Parameter noise + uniform sampling.
    WithoutTExploit,
    /// Action noise + uniform sampling.
    WithoutTee,
}

impl fmt::Display for TeeSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TeeSetting::Tee => "tee",
            TeeSetting::WithoutTExplore => "wo_t_explore",
            TeeSetting::WithoutTExploit => "wo_t_exploit",
            TeeSetting::WithoutTee => "wo_tee",
        };
        f.write_str(s)
    }
}

pub const TEE_SETTINGS: [TeeSetting; 4] = [
    TeeSetting::Tee,
    TeeSetting::WithoutTExplore,
    TeeSetting::WithoutTExploit,
    TeeSetting::WithoutTee,
];

#[derive(Debug, Clone)]
pub struct TeeRow {
    pub setting: TeeSetting,
    pub seed: u64,
    /// Evaluated mean return per requested budget level.
    pub per_budget: Vec<(f64, f64, f64)>,
    pub average: f64,
    pub exploration_mean: f64,
}

/// The four-way matrix at matched mean exploration return, evaluated across
/// budget levels. All settings consume identically seeded environments.
pub fn tee_matrix(
    base: &Policy,
    budgets: &[f64],
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<TeeRow>, PipelineError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        // match action-noise strength to the parameter-noise mean return once
        // per seed, on common random numbers
        let psn_probe = crate::rollout::exploration_mean_return(
            base,
            NoiseKind::Psn,
            cfg.sigma,
            &cfg.world,
            400,
            derive_seed(seed, 0x9A7C, 0),
        );
        let mc = MatchConfig {
            episodes: 400,
            seed: derive_seed(seed, 0x9A7C, 0),
            tolerance: 0.01,
            ..MatchConfig::default()
        };
        let matched = match match_mean_sigma(base, &cfg.world, psn_probe.mean, NoiseKind::Asn, &mc) {
            Ok(m) => m.sigma,
            // a bracket miss means even the widest action noise stays above /
            // below the target; fall back to the bracket edge
            Err(_) => mc.sigma_bracket.1,
        };
        for setting in TEE_SETTINGS {
            let (kind, sigma, strategy) = match setting {
                TeeSetting::Tee => (NoiseKind::Psn, cfg.sigma, Weighting::Robust),
                TeeSetting::WithoutTExplore => (NoiseKind::Asn, matched, Weighting::Robust),
                TeeSetting::WithoutTExploit => (NoiseKind::Psn, cfg.sigma, Weighting::Uniform),
                TeeSetting::WithoutTee => (NoiseKind::Asn, matched, Weighting::Uniform),
            };
            let noise = NoiseConfig { kind, sigma, seed };
            let out = collect_train_evaluate(
                base,
                &noise,
                &SafetyMode::None,
                strategy,
                cfg,
                &cfg.world,
                seed,
            )?;
            let mut per_budget = Vec::with_capacity(budgets.len());
            let mut total = 0.0;
            for &b in budgets {
                let world = WorldConfig { learner_budget: Some(b), ..cfg.world.clone() };
                let eval = evaluate_policy(
                    &out.policy,
                    &world,
                    cfg.eval_episodes,
                    derive_seed(seed, 0xB4D6, b.to_bits()),
                );
                per_budget.push((b, eval.mean, eval.se));
                total += eval.mean;
            }
            rows.push(TeeRow {
                setting,
                seed,
                per_budget,
                average: total / budgets.len() as f64,
                exploration_mean: out.exploration_mean,
            });
        }
    }
    Ok(rows)
}

pub fn tee_csv(rows: &[TeeRow], base_avg: f64, path: &Path) -> std::io::Result<()> {
    let mut text = String::from("setting,seed,budget,mean,se,average,improve_vs_base\n");
    for r in rows {
        for (b, m, se) in &r.per_budget {
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.setting,
                r.seed,
                b,
                m,
                se,
                r.average,
                (r.average - base_avg) / base_avg
            ));
        }
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// reward-model stochasticity sweep

#[derive(Debug, Clone)]
pub struct StochasticityRow {
    pub level: usize,
    pub impressions: (u32, u32),
    pub seed: u64,
    pub r_base: f64,
    pub r_robust: f64,
    pub r_raw: f64,
}

/// The five impression-count regimes from fully fixed to widest.
pub const STOCHASTICITY_LEVELS: [(u32, u32); 5] =
    [(175, 175), (144, 206), (113, 237), (82, 268), (50, 300)];

/// Train with relabeled-return weights and with raw-return weights on the
/// same dataset, per stochasticity level.
pub fn stochasticity_sweep(
    base: &Policy,
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<StochasticityRow>, PipelineError> {
    let mut rows = Vec::new();
    for (level, &imp) in STOCHASTICITY_LEVELS.iter().enumerate() {
        for &seed in seeds {
            let world = WorldConfig { impressions_per_step: imp, ..cfg.world.clone() };
            let noise = NoiseConfig { kind: NoiseKind::Psn, sigma: cfg.sigma, seed };
            let (dataset, _) = collect_dataset(
                base,
                &noise,
                &SafetyMode::None,
                &world,
                cfg.transitions_per_iteration,
                0,
                derive_seed(seed, 0x57C4, level as u64),
            );
            let r_base = evaluate_policy(
                base,
                &world,
                cfg.eval_episodes,
                derive_seed(seed, 0xE7A1, level as u64),
            )
            .mean;
            let mut trained = [0.0; 2];
            for (slot, strategy) in [Weighting::Robust, Weighting::RawReturn].iter().enumerate() {
                let weights = make_weights(&dataset, *strategy, cfg, derive_seed(seed, 0x57C4, level as u64))?;
                let mut iql_cfg = cfg.iql.clone();
                iql_cfg.gamma = cfg.gamma;
                iql_cfg.seed = derive_seed(seed, 0x791, level as u64);
                let bundle = iql::train_iql(&dataset, &weights, &iql_cfg, world.lambda_range)
                    .map_err(PipelineError::Iql)?;
                trained[slot] = evaluate_policy(
                    &bundle.policy,
                    &world,
                    cfg.eval_episodes,
                    derive_seed(seed, 0xE7A1, level as u64),
                )
                .mean;
            }
            rows.push(StochasticityRow {
                level,
                impressions: imp,
                seed,
                r_base,
                r_robust: trained[0],
                r_raw: trained[1],
            });
        }
    }
    Ok(rows)
}

pub fn stochasticity_csv(rows: &[StochasticityRow], path: &Path) -> std::io::Result<()> {
    let mut text =
        String::from("level,impressions_lo,impressions_hi,seed,r_base,r_robust,r_raw,robust_over_raw,raw_over_base\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.level,
            r.impressions.0,
            r.impressions.1,
            r.seed,
            r.r_base,
            r.r_robust,
            r.r_raw,
            r.r_robust / r.r_raw,
            r.r_raw / r.r_base
        ));
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// safety baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetySetting {
    NoConstraint,
    Seas,
    SmallNoise,
    FixedRange,
}

impl fmt::Display for SafetySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SafetySetting::NoConstraint => "no_constraint",
            SafetySetting::Seas => "seas",
            SafetySetting::SmallNoise => "small_noise",
            SafetySetting::FixedRange => "fixed_range",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SafetyRow {
    pub setting: SafetySetting,
    pub seed: u64,
    pub trained_mean: f64,
    pub trained_se: f64,
    pub exploration_mean: f64,
    pub exploration_se: f64,
    /// 1 - J(pi_e) / J_s.
    pub performance_drop: f64,
}

/// Compare safety methods at the same exploration base: adaptive selection,
/// a small-noise cap, a fixed clipping band, and no constraint at all.
pub fn safety_baselines(
    base: &Policy,
    safe_set: &SafePolicySet,
    small_sigma: f64,
    xi: f64,
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<SafetyRow>, PipelineError> {
    let settings = [
        SafetySetting::NoConstraint,
        SafetySetting::Seas,
        SafetySetting::SmallNoise,
        SafetySetting::FixedRange,
    ];
    let safe_policy = &safe_set.entries[0].policy;
    let mut rows = Vec::new();
    for &seed in seeds {
        for setting in settings {
            let (sigma, safety) = match setting {
                SafetySetting::NoConstraint => (cfg.sigma, SafetyMode::None),
                SafetySetting::Seas => (cfg.sigma, SafetyMode::Seas(safe_set)),
                SafetySetting::SmallNoise => (small_sigma, SafetyMode::None),
                SafetySetting::FixedRange => {
                    (cfg.sigma, SafetyMode::FixedRange { safe: safe_policy, xi })
                }
            };
            let noise = NoiseConfig { kind: NoiseKind::Psn, sigma, seed };
            let out = collect_train_evaluate(
                base,
                &noise,
                &safety,
                Weighting::Robust,
                cfg,
                &cfg.world,
                seed,
            )?;
            rows.push(SafetyRow {
                setting,
                seed,
                trained_mean: out.trained_mean,
                trained_se: out.trained_se,
                exploration_mean: out.exploration_mean,
                exploration_se: out.exploration_se,
                performance_drop: 1.0 - out.exploration_mean / safe_set.j_s,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EpsilonSweepRow {
    pub epsilon: f64,
    pub exploration_mean: f64,
    pub exploration_se: f64,
    pub j_s: f64,
    /// 1 - J(pi_e) / J_s; the safety property wants this at most epsilon.
    pub performance_drop: f64,
}

/// Safety-margin sweep: collect with adaptive selection at each epsilon and
/// report the rate of performance decrease against the safe level.
pub fn epsilon_sweep(
    base: &Policy,
    make_safe_set: impl Fn(f64) -> SafePolicySet,
    eps_grid: &[f64],
    episodes: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<EpsilonSweepRow>, PipelineError> {
    let mut rows = Vec::new();
    for &eps in eps_grid {
        let safe_set = make_safe_set(eps);
        let noise = NoiseConfig { kind: NoiseKind::Psn, sigma: cfg.sigma, seed };
        let (_, stats) = collect_dataset(
            base,
            &noise,
            &SafetyMode::Seas(&safe_set),
            &cfg.world,
            episodes * cfg.world.episode_steps,
            0,
            derive_seed(seed, 0xE9, (eps * 1e6) as u64),
        );
        rows.push(EpsilonSweepRow {
            epsilon: eps,
            exploration_mean: stats.exploration.mean,
            exploration_se: stats.exploration.se,
            j_s: safe_set.j_s,
            performance_drop: 1.0 - stats.exploration.mean / safe_set.j_s,
        });
    }
    Ok(rows)
}

pub fn safety_csv(rows: &[SafetyRow], eps_rows: &[EpsilonSweepRow], path: &Path) -> std::io::Result<()> {
    let mut text = String::from(
        "section,setting_or_eps,seed,trained_mean,trained_se,exploration_mean,exploration_se,performance_drop\n",
    );
    for r in rows {
        text.push_str(&format!(
            "baseline,{},{},{},{},{},{},{}\n",
            r.setting, r.seed, r.trained_mean, r.trained_se, r.exploration_mean, r.exploration_se, r.performance_drop
        ));
    }
    for r in eps_rows {
        text.push_str(&format!(
            "eps_sweep,{},0,,,{},{},{}\n",
            r.epsilon, r.exploration_mean, r.exploration_se, r.performance_drop
        ));
    }
    write_atomic(path, &text)
}
