//! Simulated multi-advertiser advertising system with second-price auctions.
//!
//! The learner is advertiser 0. Each episode pre-generates the full impression
//! schedule (counts and per-advertiser values), draws budgets, and fixes one
//! bidding parameter per opponent; the learner then steps through the episode
//! supplying its own bidding parameter per time step. Opponent behaviour is
//! frozen per episode, so from the learner's perspective the environment is
//! stationary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvFile};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("bidding parameter must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("episode already finished (t = {0})")]
    EpisodeFinished(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_advertisers: usize,
    /// Number of decision steps per episode; transition indices run
    /// 0..episode_steps.
    pub episode_steps: usize,
    /// Inclusive integer range for the number of impressions per step.
    pub impressions_per_step: (u32, u32),
    pub budget_range: (f64, f64),
    /// Uniform range for per-(impression, advertiser) values.
    pub value_range: (f64, f64),
    pub reserve_price: f64,
    /// Reference budget dividing the budget-left state component.
    pub budget_scale: f64,
    pub lambda_range: (f64, f64),
    /// Pin the learner's budget instead of drawing it; opponents still draw
    /// from `budget_range`. Evaluation at fixed budget levels uses this.
    pub learner_budget: Option<f64>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_advertisers: 30,
            episode_steps: 96,
            impressions_per_step: (50, 300),
            budget_range: (1500.0, 3000.0),
            value_range: (0.0, 1.0),
            reserve_price: 0.0,
            budget_scale: 3000.0,
            lambda_range: (0.1, 10.0),
            learner_budget: None,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_advertisers == 0 {
            return Err(ConfigError::Invalid("need at least one advertiser".into()));
        }
        if self.episode_steps == 0 {
            return Err(ConfigError::Invalid("episode_steps must be >= 1".into()));
        }
        if self.impressions_per_step.0 > self.impressions_per_step.1 {
            return Err(ConfigError::Invalid("impressions_per_step range is empty".into()));
        }
        if !(self.budget_range.0 > 0.0 && self.budget_range.0 <= self.budget_range.1) {
            return Err(ConfigError::Invalid("budget_range must be positive and nonempty".into()));
        }
        if !(self.value_range.0 >= 0.0 && self.value_range.0 <= self.value_range.1) {
            return Err(ConfigError::Invalid("value_range must be nonnegative and nonempty".into()));
        }
        if self.reserve_price < 0.0 {
            return Err(ConfigError::Invalid("reserve_price must be >= 0".into()));
        }
        if self.budget_scale <= 0.0 {
            return Err(ConfigError::Invalid("budget_scale must be positive".into()));
        }
        if !(self.lambda_range.0 > 0.0 && self.lambda_range.0 < self.lambda_range.1) {
            return Err(ConfigError::Invalid("lambda_range must be positive and nonempty".into()));
        }
        if let Some(b) = self.learner_budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(ConfigError::Invalid("learner_budget must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, ConfigError> {
        let d = WorldConfig::default();
        let imp = kv.range_or(
            "impressions_per_step",
            (d.impressions_per_step.0 as f64, d.impressions_per_step.1 as f64),
        )?;
        let cfg = WorldConfig {
            num_advertisers: kv.usize_or("num_advertisers", d.num_advertisers)?,
            episode_steps: kv.usize_or("episode_steps", d.episode_steps)?,
            impressions_per_step: (imp.0.round() as u32, imp.1.round() as u32),
            budget_range: kv.range_or("budget_range", d.budget_range)?,
            value_range: kv.range_or("value_range", d.value_range)?,
            reserve_price: kv.f64_or("reserve_price", d.reserve_price)?,
            budget_scale: kv.f64_or("budget_scale", d.budget_scale)?,
            lambda_range: kv.range_or("lambda_range", d.lambda_range)?,
            learner_budget: match kv.get("learner_budget") {
                None => None,
                Some(_) => Some(kv.f64_or("learner_budget", 0.0)?),
            },
            seed: kv.u64_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical dump, used for config hashing and manifests.
    pub fn dump(&self) -> String {
        let learner_budget = match self.learner_budget {
            Some(b) => format!("learner_budget={b}\n"),
            None => String::new(),
        };
        format!(
            "num_advertisers={}\nepisode_steps={}\nimpressions_per_step={},{}\nbudget_range={},{}\nvalue_range={},{}\nreserve_price={}\nbudget_scale={}\nlambda_range={},{}\n{}seed={}\n",
            self.num_advertisers,
            self.episode_steps,
            self.impressions_per_step.0,
            self.impressions_per_step.1,
            self.budget_range.0,
            self.budget_range.1,
            self.value_range.0,
            self.value_range.1,
            self.reserve_price,
            self.budget_scale,
            self.lambda_range.0,
            self.lambda_range.1,
            learner_budget,
            self.seed
        )
    }
}

/// The learner's observation: all components scaled to stay O(1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    /// t / episode_steps, in [0, 1].
    pub time_frac: f64,
    /// (B0 - B_t) / B0, in [0, 1].
    pub consumed_frac: f64,
    /// B_t / budget_scale.
    pub budget_left_scaled: f64,
}

impl State {
    pub fn as_array(&self) -> [f64; 3] {
        [self.time_frac, self.consumed_frac, self.budget_left_scaled]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Total value of impressions the learner won this step.
    pub reward: f64,
    pub spend: f64,
    pub wins: u32,
    pub done: bool,
}

/// One auctioned impression: a value per advertiser.
#[derive(Debug, Clone)]
pub struct Impression {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub t: usize,
    pub remaining_budget: Vec<f64>,
    pub initial_budget: Vec<f64>,
    schedule: Vec<Vec<Impression>>,
    opponent_lambda: Vec<f64>,
    episode_steps: usize,
    reserve_price: f64,
    budget_scale: f64,
    lambda_range: (f64, f64),
}

/// Per-auction debug record for the optional CSV log.
#[derive(Debug, Clone, Copy)]
pub struct AuctionRecord {
    pub step: usize,
    pub impression_index: usize,
    /// None when no bid cleared the reserve.
    pub winner_id: Option<usize>,
    pub price: f64,
    /// The winner's value for the impression (0 when unsold).
    pub value: f64,
}

/// Draw the full episode: impression counts, values, budgets and opponent
/// bidding parameters, in that order. Same seed, same world, bit for bit.
pub fn init_episode(config: &WorldConfig, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_advertisers;
    let mut schedule = Vec::with_capacity(config.episode_steps);
    for _ in 0..config.episode_steps {
        let count = rng.gen_range(config.impressions_per_step.0..=config.impressions_per_step.1);
        let mut impressions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let values = (0..n).map(|_| uniform(&mut rng, config.value_range)).collect();
            impressions.push(Impression { values });
        }
        schedule.push(impressions);
    }
    let mut initial_budget: Vec<f64> =
        (0..n).map(|_| uniform(&mut rng, config.budget_range)).collect();
    // pinning the learner's budget after the draws keeps every other draw
    // identical across budget levels, which controlled comparisons rely on
    if let Some(b) = config.learner_budget {
        initial_budget[0] = b;
    }
    // Opponents commit to one bidding parameter for the whole episode,
    // drawn log-uniform so aggressiveness spans the admissible range.
    let (lo, hi) = config.lambda_range;
    let opponent_lambda: Vec<f64> = (0..n)
        .map(|_| (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp())
        .collect();
    WorldState {
        t: 0,
        remaining_budget: initial_budget.clone(),
        initial_budget,
        schedule,
        opponent_lambda,
        episode_steps: config.episode_steps,
        reserve_price: config.reserve_price,
        budget_scale: config.budget_scale,
        lambda_range: config.lambda_range,
    }
}

fn uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

impl WorldState {
    pub fn episode_steps(&self) -> usize {
        self.episode_steps
    }

    pub fn finished(&self) -> bool {
        self.t >= self.episode_steps
    }

    pub fn impressions_at(&self, step: usize) -> &[Impression] {
        &self.schedule[step]
    }

    /// The learner's current observation.
    pub fn observe(&self) -> State {
        let b0 = self.initial_budget[0];
        let bt = self.remaining_budget[0];
        State {
            time_frac: self.t as f64 / self.episode_steps as f64,
            consumed_frac: (b0 - bt) / b0,
            budget_left_scaled: bt / self.budget_scale,
        }
    }
}

/// Optimal second-price bid for an impression of value `v` under bidding
/// parameter `lambda`.
pub fn compute_bid(v: f64, lambda: f64) -> Result<f64, EnvError> {
    if lambda <= 0.0 {
        return Err(EnvError::NonPositiveLambda(lambda));
    }
    Ok(v / lambda)
}

/// Second-price winner determination. The winner is the highest bid clearing
/// the reserve; the price is the larger of the second-highest eligible bid
/// and the reserve. Ties break toward the lowest advertiser id.
pub fn run_auction(bids: &[(usize, f64)], reserve: f64) -> Option<(usize, f64)> {
    let mut winner: Option<(usize, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for &(id, bid) in bids {
        match winner {
            None => {
                if bid >= reserve {
                    winner = Some((id, bid));
                }
            }
            Some((wid, wbid)) => {
                if bid > wbid || (bid == wbid && id < wid) {
                    second = second.max(wbid);
                    winner = Some((id, bid));
                } else {
                    second = second.max(bid);
                }
            }
        }
    }
    winner.map(|(id, _)| (id, second.max(reserve)))
}

/// Advance one time step, auctioning every impression scheduled for it.
///
/// Every advertiser whose remaining budget covers its bid submits `v / lambda`
/// (opponents use their per-episode parameter). The learner's parameter is
/// clamped into the admissible range. An exhausted learner simply stops
/// clearing the participation rule and collects zero reward while the episode
/// runs to full length.
pub fn env_step(world: &mut WorldState, learner_lambda: f64) -> Result<(State, StepOutcome), EnvError> {
    env_step_inner(world, learner_lambda, None)
}

/// Same as [`env_step`] but appends one record per auctioned impression.
pub fn env_step_logged(
    world: &mut WorldState,
    learner_lambda: f64,
    log: &mut Vec<AuctionRecord>,
) -> Result<(State, StepOutcome), EnvError> {
    env_step_inner(world, learner_lambda, Some(log))
}

fn env_step_inner(
    world: &mut WorldState,
    learner_lambda: f64,
    mut log: Option<&mut Vec<AuctionRecord>>,
) -> Result<(State, StepOutcome), EnvError> {
    if world.finished() {
        return Err(EnvError::EpisodeFinished(world.t));
    }
    let lambda = learner_lambda.clamp(world.lambda_range.0, world.lambda_range.1);
    let step = world.t;
    let mut reward = 0.0;
    let mut spend = 0.0;
    let mut wins = 0u32;
    let mut bids: Vec<(usize, f64)> = Vec::with_capacity(world.opponent_lambda.len());
    for (imp_idx, imp) in world.schedule[step].iter().enumerate() {
        bids.clear();
        for (adv, &v) in imp.values.iter().enumerate() {
            let adv_lambda = if adv == 0 { lambda } else { world.opponent_lambda[adv] };
            let bid = v / adv_lambda;
            // Participation rule: bid only when the budget covers the bid.
            // Second price never exceeds the bid, so overspend is impossible.
            if world.remaining_budget[adv] >= bid {
                bids.push((adv, bid));
            }
        }
        let outcome = run_auction(&bids, world.reserve_price);
        if let Some((winner, price)) = outcome {
            world.remaining_budget[winner] -= price;
            if winner == 0 {
                reward += imp.values[0];
                spend += price;
                wins += 1;
            }
        }
        if let Some(ref mut records) = log {
            let (winner_id, price, value) = match outcome {
                Some((w, p)) => (Some(w), p, imp.values[w]),
                None => (None, 0.0, 0.0),
            };
            records.push(AuctionRecord { step, impression_index: imp_idx, winner_id, price, value });
        }
    }
    world.t += 1;
    let done = world.finished();
    Ok((world.observe(), StepOutcome { reward, spend, wins, done }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            num_advertisers: 4,
            episode_steps: 8,
            impressions_per_step: (5, 20),
            budget_range: (50.0, 100.0),
            budget_scale: 100.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn fixed_impression_count_is_exact() {
        let cfg = WorldConfig {
            impressions_per_step: (175, 175),
            episode_steps: 12,
            num_advertisers: 3,
            ..WorldConfig::default()
        };
        let world = init_episode(&cfg, 9);
        for step in 0..cfg.episode_steps {
            assert_eq!(world.impressions_at(step).len(), 175);
        }
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = small_config();
        let a = init_episode(&cfg, 1234);
        let b = init_episode(&cfg, 1234);
        assert_eq!(a.initial_budget, b.initial_budget);
        assert_eq!(a.opponent_lambda, b.opponent_lambda);
        for t in 0..cfg.episode_steps {
            assert_eq!(a.schedule[t].len(), b.schedule[t].len());
            for (x, y) in a.schedule[t].iter().zip(b.schedule[t].iter()) {
                assert_eq!(x.values, y.values);
            }
        }
    }

    #[test]
    fn mean_impressions_match_uniform_range() {
        let cfg = WorldConfig { num_advertisers: 1, episode_steps: 4, ..WorldConfig::default() };
        let mut total = 0u64;
        let mut steps = 0u64;
        for seed in 0..10_000u64 {
            let world = init_episode(&cfg, seed);
            for t in 0..cfg.episode_steps {
                total += world.impressions_at(t).len() as u64;
                steps += 1;
            }
        }
        let mean = total as f64 / steps as f64;
        assert!((mean - 175.0).abs() / 175.0 < 0.01, "mean impressions {mean}");
    }

    #[test]
    fn bid_formula() {
        assert_eq!(compute_bid(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(compute_bid(0.0, 3.0).unwrap(), 0.0);
        assert!(matches!(compute_bid(1.0, 0.0), Err(EnvError::NonPositiveLambda(_))));
    }

    #[test]
    fn second_price_auction_basics() {
        assert_eq!(run_auction(&[(0, 3.0), (1, 2.0), (2, 1.0)], 0.0), Some((0, 2.0)));
        assert_eq!(run_auction(&[(4, 5.0)], 0.0), Some((4, 0.0)));
        assert_eq!(run_auction(&[(1, 2.0), (0, 2.0)], 0.0), Some((0, 2.0)));
        assert_eq!(run_auction(&[(0, 0.5)], 1.0), None);
        assert_eq!(run_auction(&[], 0.0), None);
        // reserve floors the price even with a competing bid below it
        assert_eq!(run_auction(&[(0, 3.0), (1, 0.5)], 1.0), Some((0, 1.0)));
    }

    #[test]
    fn exhausted_learner_earns_zero_for_remaining_steps() {
        let cfg = small_config();
        let mut world = init_episode(&cfg, 5);
        world.remaining_budget[0] = 0.0;
        let mut total = 0.0;
        for _ in 0..cfg.episode_steps {
            let (_, out) = env_step(&mut world, 0.5).unwrap();
            total += out.reward;
        }
        assert_eq!(total, 0.0);
        assert!(world.finished());
    }

    #[test]
    fn uncontested_auctions_sum_all_values() {
        let cfg = WorldConfig {
            num_advertisers: 1,
            episode_steps: 3,
            impressions_per_step: (10, 10),
            budget_range: (10_000.0, 10_000.0),
            budget_scale: 10_000.0,
            ..WorldConfig::default()
        };
        let mut world = init_episode(&cfg, 3);
        let expect: f64 = world.impressions_at(0).iter().map(|i| i.values[0]).sum();
        let (_, out) = env_step(&mut world, cfg.lambda_range.0).unwrap();
        assert!((out.reward - expect).abs() < 1e-12);
        assert_eq!(out.spend, 0.0); // single bidder pays the reserve
    }

    #[test]
    fn identical_seeds_and_lambdas_identical_trajectories() {
        let cfg = small_config();
        let lambdas = [0.5, 1.0, 2.0, 0.7, 1.1, 3.0, 0.9, 1.4];
        let run = |seed: u64| {
            let mut world = init_episode(&cfg, seed);
            let mut rows = Vec::new();
            for &l in &lambdas {
                let (s, o) = env_step(&mut world, l).unwrap();
                rows.push((s, o));
            }
            rows
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn stepping_finished_episode_errors() {
        let cfg = WorldConfig { episode_steps: 1, num_advertisers: 2, ..small_config() };
        let mut world = init_episode(&cfg, 1);
        env_step(&mut world, 1.0).unwrap();
        assert!(matches!(env_step(&mut world, 1.0), Err(EnvError::EpisodeFinished(1))));
    }

    #[test]
    fn budget_conservation_and_reward_accounting() {
        let cfg = small_config();
        for seed in 0..20u64 {
            let mut world = init_episode(&cfg, seed);
            let b0 = world.initial_budget.clone();
            let mut log = Vec::new();
            let mut learner_reward = 0.0;
            let mut spend_by: Vec<f64> = vec![0.0; cfg.num_advertisers];
            for step in 0..cfg.episode_steps {
                let before = log.len();
                let (_, out) = env_step_logged(&mut world, 0.8, &mut log).unwrap();
                learner_reward += out.reward;
                // reward accounting: learner reward equals the sum of values
                // of impressions it won this step, per the auction log
                let step_value: f64 = log[before..]
                    .iter()
                    .filter(|r| r.winner_id == Some(0))
                    .map(|r| r.value)
                    .sum();
                assert!((out.reward - step_value).abs() < 1e-12, "step {step}");
            }
            for r in &log {
                if let Some(w) = r.winner_id {
                    spend_by[w] += r.price;
                }
            }
            for adv in 0..cfg.num_advertisers {
                assert!(
                    spend_by[adv] <= b0[adv] + 1e-9,
                    "advertiser {adv} overspent: {} > {}",
                    spend_by[adv],
                    b0[adv]
                );
                assert!(
                    (b0[adv] - spend_by[adv] - world.remaining_budget[adv]).abs() < 1e-9,
                    "budget ledger mismatch for {adv}"
                );
            }
            let _ = learner_reward;
        }
    }

    #[test]
    fn raising_a_bid_never_loses_wins_on_frozen_bids() {
        // Monotonicity of winner determination: with the other bids frozen,
        // raising advertiser 0's bid keeps every impression it already won.
        let others = [(1usize, 0.8), (2usize, 1.2), (3usize, 0.3)];
        for base in [0.1, 0.5, 1.0, 1.5] {
            let mut bids: Vec<(usize, f64)> = vec![(0, base)];
            bids.extend_from_slice(&others);
            let won_before = matches!(run_auction(&bids, 0.0), Some((0, _)));
            for bump in [0.01, 0.5, 2.0] {
                let mut raised: Vec<(usize, f64)> = vec![(0, base + bump)];
                raised.extend_from_slice(&others);
                let won_after = matches!(run_auction(&raised, 0.0), Some((0, _)));
                assert!(!won_before || won_after, "raising bid lost the auction");
            }
        }
    }

    #[test]
    fn episode_has_exactly_configured_steps() {
        let cfg = small_config();
        let mut world = init_episode(&cfg, 7);
        let mut steps = 0;
        while !world.finished() {
            let (_, out) = env_step(&mut world, 1.0).unwrap();
            steps += 1;
            assert_eq!(out.done, world.finished());
        }
        assert_eq!(steps, cfg.episode_steps);
    }

    #[test]
    fn world_config_from_kv_and_validation() {
        let kv = KvFile::parse("num_advertisers=8\nepisode_steps=32\nbudget_range=100,200\n").unwrap();
        let cfg = WorldConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.num_advertisers, 8);
        assert_eq!(cfg.episode_steps, 32);
        assert_eq!(cfg.budget_range, (100.0, 200.0));

        let bad = KvFile::parse("lambda_range=0,1\n").unwrap();
        assert!(WorldConfig::from_kv(&bad).is_err());
    }
}
