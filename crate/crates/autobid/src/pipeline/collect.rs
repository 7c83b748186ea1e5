//! Dataset collection: fans episodes out across workers, each with its own
//! derived seed, and merges them in episode order so results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, NoiseKind, Provenance, Trajectory};
use crate::env::{self, WorldConfig};
use crate::nn::param_hash;
use crate::policy::{psn_sample, NoiseConfig, Policy};
use crate::rollout::{self, derive_seed, AsnActor, Evaluation};
use crate::seas::{fixed_range_episode, seas_episode, SafePolicySet, SeasTrace};

pub enum SafetyMode<'a> {
    None,
    Seas(&'a SafePolicySet),
    FixedRange { safe: &'a Policy, xi: f64 },
}

pub struct CollectStats {
    pub exploration: Evaluation,
    /// Fraction of steps that took the exploratory branch (1.0 outside SEAS).
    pub exploratory_rate: f64,
}

/// Collect at least `transitions` transitions of exploration data.
pub fn collect_dataset(
    base: &Policy,
    noise: &NoiseConfig,
    safety: &SafetyMode<'_>,
    world: &WorldConfig,
    transitions: usize,
    campaign_id: u32,
    seed: u64,
) -> (Dataset, CollectStats) {
    let episodes = transitions.div_ceil(world.episode_steps).max(1);
    let results: Vec<(Trajectory, Option<SeasTrace>)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let env_seed = derive_seed(seed, 0xC011, i as u64);
            let noise_seed = derive_seed(seed, 0x0153, i as u64);
            let mut world_state = env::init_episode(world, env_seed);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
            // one acting policy per episode
            enum Acting<'p> {
                Plain(&'p Policy),
                Perturbed(Policy),
                Asn(AsnActor<'p>),
            }
            let mut acting = match noise.kind {
                NoiseKind::None => Acting::Plain(base),
                NoiseKind::Psn => Acting::Perturbed(psn_sample(base, noise.sigma, &mut noise_rng)),
                NoiseKind::Asn => {
                    Acting::Asn(AsnActor { policy: base, sigma: noise.sigma, rng: noise_rng })
                }
            };
            let theta_hash = match &acting {
                Acting::Plain(p) => param_hash(&p.theta),
                Acting::Perturbed(p) => param_hash(&p.theta),
                Acting::Asn(a) => param_hash(&a.policy.theta),
            };
            let prov = Provenance { kind: noise.kind, sigma: noise.sigma, theta_hash, seas: false };
            let episode_id = i as u32;
            match (safety, &mut acting) {
                (SafetyMode::Seas(set), Acting::Plain(p)) => {
                    let mut actor = *p;
                    let (t, tr) = seas_episode(&mut actor, set, &mut world_state, campaign_id, episode_id, prov);
                    (t, Some(tr))
                }
                (SafetyMode::Seas(set), Acting::Perturbed(p)) => {
                    let (t, tr) = seas_episode(p, set, &mut world_state, campaign_id, episode_id, prov);
                    (t, Some(tr))
                }
                (SafetyMode::Seas(set), Acting::Asn(a)) => {
                    let (t, tr) = seas_episode(a, set, &mut world_state, campaign_id, episode_id, prov);
                    (t, Some(tr))
                }
                (SafetyMode::FixedRange { safe, xi }, acting) => {
                    let t = match acting {
                        Acting::Plain(p) => {
                            let mut actor = *p;
                            fixed_range_episode(&mut actor, safe, *xi, &mut world_state, campaign_id, episode_id, prov)
                        }
                        Acting::Perturbed(p) => {
                            fixed_range_episode(p, safe, *xi, &mut world_state, campaign_id, episode_id, prov)
                        }
                        Acting::Asn(a) => {
                            fixed_range_episode(a, safe, *xi, &mut world_state, campaign_id, episode_id, prov)
                        }
                    };
                    (t, None)
                }
                (SafetyMode::None, acting) => {
                    let t = match acting {
                        Acting::Plain(p) => {
                            let mut actor = *p;
                            rollout::run_episode(&mut actor, &mut world_state, campaign_id, episode_id, prov)
                        }
                        Acting::Perturbed(p) => {
                            rollout::run_episode(p, &mut world_state, campaign_id, episode_id, prov)
                        }
                        Acting::Asn(a) => {
                            rollout::run_episode(a, &mut world_state, campaign_id, episode_id, prov)
                        }
                    };
                    (t, None)
                }
            }
        })
        .collect();

    let mut trajectories = Vec::with_capacity(results.len());
    let mut returns = Vec::with_capacity(results.len());
    let mut explore_steps = 0usize;
    let mut total_steps = 0usize;
    for (traj, trace) in results {
        returns.push(crate::data::trajectory_return(&traj, 1.0));
        match trace {
            Some(tr) => {
                explore_steps += tr.steps.iter().filter(|s| s.chosen_exploratory).count();
                total_steps += tr.steps.len();
            }
            None => {
                explore_steps += traj.len();
                total_steps += traj.len();
            }
        }
        trajectories.push(traj);
    }
    let stats = CollectStats {
        exploration: rollout::summarize(returns),
        exploratory_rate: explore_steps as f64 / total_steps.max(1) as f64,
    };
    (Dataset::new(trajectories), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamVector;
    use crate::seas::{ConstQ, SafeEntry};

    fn desk() -> WorldConfig {
        WorldConfig {
            num_advertisers: 4,
            episode_steps: 8,
            impressions_per_step: (10, 30),
            budget_range: (50.0, 100.0),
            budget_scale: 100.0,
            ..WorldConfig::default()
        }
    }

    fn policy() -> Policy {
        let spec = Policy::spec_for((0.1, 10.0));
        Policy::new(spec.clone(), ParamVector::zeros(&spec))
    }

    #[test]
    fn collects_requested_volume_and_validates() {
        let p = policy();
        let noise = NoiseConfig { kind: NoiseKind::Psn, sigma: 0.05, seed: 0 };
        let (ds, stats) = collect_dataset(&p, &noise, &SafetyMode::None, &desk(), 100, 0, 7);
        assert!(ds.n_transitions() >= 100);
        ds.validate().unwrap();
        assert_eq!(stats.exploratory_rate, 1.0);
        for traj in &ds.trajectories {
            assert_eq!(traj.provenance.kind, NoiseKind::Psn);
            assert!(!traj.provenance.seas);
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let p = policy();
        let noise = NoiseConfig { kind: NoiseKind::Asn, sigma: 0.5, seed: 0 };
        let (a, _) = collect_dataset(&p, &noise, &SafetyMode::None, &desk(), 200, 0, 9);
        let (b, _) = collect_dataset(&p, &noise, &SafetyMode::None, &desk(), 200, 0, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn seas_collection_flags_every_trajectory() {
        let p = policy();
        let safe = SafePolicySet::new(
            vec![SafeEntry { policy: policy(), q: Box::new(ConstQ(1000.0)) }],
            10.0,
            0.0,
            0.05,
        );
        let noise = NoiseConfig { kind: NoiseKind::Psn, sigma: 0.05, seed: 0 };
        let (ds, stats) = collect_dataset(&p, &noise, &SafetyMode::Seas(&safe), &desk(), 64, 0, 3);
        assert!(ds.trajectories.iter().all(|t| t.provenance.seas));
        assert!(stats.exploratory_rate > 0.0);
    }

    #[test]
    fn psn_trajectories_have_distinct_but_stable_hashes() {
        let p = policy();
        let noise = NoiseConfig { kind: NoiseKind::Psn, sigma: 0.05, seed: 0 };
        let (ds, _) = collect_dataset(&p, &noise, &SafetyMode::None, &desk(), 64, 0, 11);
        let hashes: Vec<u64> = ds.trajectories.iter().map(|t| t.provenance.theta_hash).collect();
        // different episodes carry different perturbed parameters
        assert!(hashes.windows(2).any(|w| w[0] != w[1]));
        // and none of them equals the base policy's hash
        assert!(hashes.iter().all(|&h| h != p.theta_hash()));
    }
}
