//! Episode execution, policy evaluation, and noise-strength matching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{NoiseKind, Provenance, Trajectory, Transition};
use crate::env::{self, State, WorldConfig, WorldState};
use crate::policy::{asn_act, psn_sample, Policy};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("sigma bracket [{lo}, {hi}] does not contain the target mean return {target} (returns {at_lo} at lo, {at_hi} at hi)")]
    BracketFailure { lo: f64, hi: f64, target: f64, at_lo: f64, at_hi: f64 },
}

/// Anything that can emit a bidding parameter for a state. Stateful actors
/// (action noise) mutate their generator per call.
pub trait Actor {
    fn act(&mut self, s: &State) -> f64;
}

impl Actor for Policy {
    fn act(&mut self, s: &State) -> f64 {
        Policy::act(self, s)
    }
}

impl Actor for &Policy {
    fn act(&mut self, s: &State) -> f64 {
        Policy::act(self, s)
    }
}

pub struct AsnActor<'a> {
    pub policy: &'a Policy,
    pub sigma: f64,
    pub rng: ChaCha8Rng,
}

impl Actor for AsnActor<'_> {
    fn act(&mut self, s: &State) -> f64 {
        asn_act(self.policy, s, self.sigma, &mut self.rng)
    }
}

/// Closure adapter, mostly for tests and oracle policies.
pub struct FnActor<F: FnMut(&State) -> f64>(pub F);

impl<F: FnMut(&State) -> f64> Actor for FnActor<F> {
    fn act(&mut self, s: &State) -> f64 {
        (self.0)(s)
    }
}

/// Derive a per-episode seed from a master seed and stream coordinates so
/// parallel workers draw independent, reproducible streams.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the mixed words
    let mut z = master ^ stream.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Run one full episode, recording every transition.
pub fn run_episode<A: Actor>(
    actor: &mut A,
    world: &mut WorldState,
    campaign_id: u32,
    episode_id: u32,
    provenance: Provenance,
) -> Trajectory {
    let steps = world.episode_steps();
    let mut transitions = Vec::with_capacity(steps);
    let mut s = world.observe();
    for t in 0..steps {
        let a = actor.act(&s);
        let (s_next, out) = env::env_step(world, a).expect("episode length respected");
        transitions.push(Transition {
            campaign_id,
            episode_id,
            t: t as u32,
            s,
            a,
            r: out.reward,
            s_next,
            done: out.done,
        });
        s = s_next;
    }
    Trajectory { transitions, provenance }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub returns: Vec<f64>,
}

pub fn summarize(returns: Vec<f64>) -> Evaluation {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if returns.len() > 1 {
        returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Evaluation { mean, se: (var / n).sqrt(), returns }
}

/// Mean return and standard error of noiseless rollouts. Episodes fan out
/// across workers; per-episode seeds make the result order-independent.
pub fn evaluate_policy(policy: &Policy, cfg: &WorldConfig, episodes: usize, seed: u64) -> Evaluation {
    assert!(episodes >= 1);
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut world = env::init_episode(cfg, derive_seed(seed, 0xE7A1, i as u64));
            let mut actor = policy;
            let traj = run_episode(&mut actor, &mut world, 0, i as u32, Provenance::noiseless(policy.theta_hash()));
            crate::data::trajectory_return(&traj, 1.0)
        })
        .collect();
    summarize(returns)
}

/// Mean dataset return when exploring with the given construction at strength
/// `sigma`. Environment seeds are shared across calls with the same `seed`, so
/// sweeping `sigma` compares on common random numbers.
pub fn exploration_mean_return(
    base: &Policy,
    kind: NoiseKind,
    sigma: f64,
    cfg: &WorldConfig,
    episodes: usize,
    seed: u64,
) -> Evaluation {
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let env_seed = derive_seed(seed, 0xC011, i as u64);
            let noise_seed = derive_seed(seed, 0x0153, i as u64);
            let mut world = env::init_episode(cfg, env_seed);
            let prov = Provenance { kind, sigma, theta_hash: base.theta_hash(), seas: false };
            let traj = match kind {
                NoiseKind::None => {
                    let mut actor = base;
                    run_episode(&mut actor, &mut world, 0, i as u32, prov)
                }
                NoiseKind::Psn => {
                    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                    let mut actor = psn_sample(base, sigma, &mut rng);
                    run_episode(&mut actor, &mut world, 0, i as u32, prov)
                }
                NoiseKind::Asn => {
                    let mut actor =
                        AsnActor { policy: base, sigma, rng: ChaCha8Rng::seed_from_u64(noise_seed) };
                    run_episode(&mut actor, &mut world, 0, i as u32, prov)
                }
            };
            crate::data::trajectory_return(&traj, 1.0)
        })
        .collect();
    summarize(returns)
}

#[derive(Debug, Clone)]
pub struct MatchConfig {
    pub sigma_bracket: (f64, f64),
    /// Relative tolerance on the achieved mean return.
    pub tolerance: f64,
    pub episodes: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { sigma_bracket: (0.0, 3.0), tolerance: 0.01, episodes: 2000, max_iterations: 40, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SigmaMatch {
    pub sigma: f64,
    pub achieved_mean: f64,
    pub target_mean: f64,
    pub iterations: usize,
}

/// Find the noise strength at which the mean dataset return matches a target,
/// assuming the mean return is nonincreasing in sigma. Used to put parameter
/// and action noise on equal footing before comparing return distributions.
pub fn match_mean_sigma(
    base: &Policy,
    cfg: &WorldConfig,
    target_mean_return: f64,
    kind: NoiseKind,
    mc: &MatchConfig,
) -> Result<SigmaMatch, RolloutError> {
    let eval = |sigma: f64| exploration_mean_return(base, kind, sigma, cfg, mc.episodes, mc.seed).mean;
    let (mut lo, mut hi) = mc.sigma_bracket;
    let at_lo = eval(lo);
    let tol = mc.tolerance * target_mean_return.abs().max(1e-12);
    if (at_lo - target_mean_return).abs() <= tol {
        return Ok(SigmaMatch { sigma: lo, achieved_mean: at_lo, target_mean: target_mean_return, iterations: 0 });
    }
    let at_hi = eval(hi);
    if (at_hi - target_mean_return).abs() <= tol {
        return Ok(SigmaMatch { sigma: hi, achieved_mean: at_hi, target_mean: target_mean_return, iterations: 0 });
    }
    // mean return decreases with sigma: target must sit between the ends
    if !(at_hi < target_mean_return && target_mean_return < at_lo) {
        return Err(RolloutError::BracketFailure { lo, hi, target: target_mean_return, at_lo, at_hi });
    }
    let mut achieved = at_lo;
    let mut sigma = lo;
    for it in 0..mc.max_iterations {
        sigma = 0.5 * (lo + hi);
        achieved = eval(sigma);
        if (achieved - target_mean_return).abs() <= tol {
            return Ok(SigmaMatch { sigma, achieved_mean: achieved, target_mean: target_mean_return, iterations: it + 1 });
        }
        if achieved > target_mean_return {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    Ok(SigmaMatch {
        sigma,
        achieved_mean: achieved,
        target_mean: target_mean_return,
        iterations: mc.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamVector;

    fn desk_cfg() -> WorldConfig {
        WorldConfig {
            num_advertisers: 6,
            episode_steps: 16,
            impressions_per_step: (20, 60),
            budget_range: (100.0, 200.0),
            budget_scale: 200.0,
            ..WorldConfig::default()
        }
    }

    fn zero_policy() -> Policy {
        let spec = Policy::spec_for((0.1, 10.0));
        Policy::new(spec.clone(), ParamVector::zeros(&spec))
    }

    #[test]
    fn episode_trajectories_validate() {
        let cfg = desk_cfg();
        let mut world = env::init_episode(&cfg, 33);
        let policy = zero_policy();
        let mut actor = &policy;
        let traj = run_episode(&mut actor, &mut world, 2, 7, Provenance::noiseless(policy.theta_hash()));
        traj.validate().unwrap();
        assert_eq!(traj.len(), cfg.episode_steps);
    }

    #[test]
    fn deterministic_env_evaluation_has_zero_se() {
        let cfg = WorldConfig {
            num_advertisers: 2,
            episode_steps: 4,
            impressions_per_step: (10, 10),
            budget_range: (50.0, 50.0),
            value_range: (0.5, 0.5),
            budget_scale: 50.0,
            ..WorldConfig::default()
        };
        // values and budgets degenerate but opponent lambdas still vary by
        // seed; a single opponent with a pinned seed keeps episodes identical
        let policy = zero_policy();
        let eval = evaluate_policy(&policy, &cfg, 16, 9);
        // identical episode structure except opponent lambda; with value and
        // count degenerate the learner's return only depends on who wins.
        // Use variance of returns to detect nondeterminism across same seeds:
        let again = evaluate_policy(&policy, &cfg, 16, 9);
        assert_eq!(eval.returns, again.returns);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let cfg = desk_cfg();
        let policy = zero_policy();
        let a = evaluate_policy(&policy, &cfg, 32, 123);
        let b = evaluate_policy(&policy, &cfg, 32, 123);
        assert_eq!(a.returns, b.returns);
        assert!(a.se > 0.0);
    }

    #[test]
    fn zero_noise_matches_base_mean() {
        let cfg = desk_cfg();
        let policy = zero_policy();
        let plain = exploration_mean_return(&policy, NoiseKind::None, 0.0, &cfg, 64, 5);
        let psn0 = exploration_mean_return(&policy, NoiseKind::Psn, 0.0, &cfg, 64, 5);
        let asn0 = exploration_mean_return(&policy, NoiseKind::Asn, 0.0, &cfg, 64, 5);
        assert_eq!(plain.returns, psn0.returns);
        assert_eq!(plain.returns, asn0.returns);
    }

    #[test]
    fn match_sigma_zero_noise_fixed_point() {
        let cfg = desk_cfg();
        let policy = zero_policy();
        let mc = MatchConfig { episodes: 200, seed: 3, ..Default::default() };
        let target = exploration_mean_return(&policy, NoiseKind::Asn, 0.0, &cfg, 200, 3).mean;
        let m = match_mean_sigma(&policy, &cfg, target, NoiseKind::Asn, &mc).unwrap();
        assert_eq!(m.sigma, 0.0);
    }

    #[test]
    fn bracket_failure_is_reported() {
        let cfg = desk_cfg();
        let policy = zero_policy();
        let mc = MatchConfig { episodes: 50, sigma_bracket: (0.0, 0.01), seed: 4, ..Default::default() };
        // target far above anything achievable
        let err = match_mean_sigma(&policy, &cfg, 1e9, NoiseKind::Asn, &mc).unwrap_err();
        assert!(matches!(err, RolloutError::BracketFailure { .. }));
    }
}
