//! Exact small-MDP machinery: full trajectory enumeration, exact J/V/Q, and
//! the two theory checks — the safety bound of adaptive action selection and
//! the dominance of the weighted behaviour policy.
//!
//! All verification quantities are kept on a dyadic grid (reward values are
//! multiples of 1/64, branch probabilities are powers of 1/2) so that every
//! partial sum and expectation is exactly representable in f64 and the
//! assertions are exact comparisons, not tolerances.

use rand::Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvFile};
use crate::seas::SeasState;
use crate::weighting;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("enumeration budget exceeded: more than {0} trajectories")]
    EnumerationBudget(usize),
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Finite-support reward distribution; a single outcome makes it
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDist {
    /// (value, probability) pairs; probabilities sum to one.
    pub outcomes: Vec<(f64, f64)>,
}

impl RewardDist {
    pub fn deterministic(v: f64) -> Self {
        Self { outcomes: vec![(v, 1.0)] }
    }

    pub fn two_point(lo: f64, hi: f64) -> Self {
        Self { outcomes: vec![(lo, 0.5), (hi, 0.5)] }
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().map(|(v, p)| v * p).sum()
    }
}

/// Deterministic-transition finite MDP with a fixed horizon. Steps run
/// `t = 0 ..= horizon`, so an episode has `horizon + 1` rewards, matching the
/// trajectory convention of the rest of the repo.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// next[s][a]
    pub next: Vec<Vec<usize>>,
    /// reward[s][a]
    pub reward: Vec<Vec<RewardDist>>,
    /// initial distribution, (state, probability)
    pub rho: Vec<(usize, f64)>,
    pub gamma: f64,
}

pub const ENUMERATION_BUDGET: usize = 1_000_000;

impl TabularMdp {
    pub fn validate(&self) -> Result<(), TabularError> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(TabularError::InvalidMdp("empty state or action set".into()));
        }
        if self.next.len() != self.n_states || self.reward.len() != self.n_states {
            return Err(TabularError::InvalidMdp("transition/reward table shape".into()));
        }
        for s in 0..self.n_states {
            if self.next[s].len() != self.n_actions || self.reward[s].len() != self.n_actions {
                return Err(TabularError::InvalidMdp(format!("row {s} has wrong arity")));
            }
            for &ns in &self.next[s] {
                if ns >= self.n_states {
                    return Err(TabularError::InvalidMdp(format!("next state {ns} out of range")));
                }
            }
            for dist in &self.reward[s] {
                let p: f64 = dist.outcomes.iter().map(|(_, p)| p).sum();
                if (p - 1.0).abs() > 1e-12 || dist.outcomes.is_empty() {
                    return Err(TabularError::InvalidMdp("reward outcome probabilities".into()));
                }
            }
        }
        let rp: f64 = self.rho.iter().map(|(_, p)| p).sum();
        if (rp - 1.0).abs() > 1e-12 || self.rho.is_empty() {
            return Err(TabularError::InvalidMdp("initial distribution".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TabularError::InvalidMdp("gamma outside [0,1]".into()));
        }
        Ok(())
    }

    /// Worst-case branch count of a full enumeration.
    fn enumeration_bound(&self) -> usize {
        let max_outcomes = self
            .reward
            .iter()
            .flat_map(|row| row.iter().map(|d| d.outcomes.len()))
            .max()
            .unwrap_or(1);
        let mut total = self.rho.len();
        for _ in 0..=self.horizon {
            total = total.saturating_mul(max_outcomes);
            if total > ENUMERATION_BUDGET {
                return total;
            }
        }
        total
    }

    fn check_budget(&self) -> Result<(), TabularError> {
        if self.enumeration_bound() > ENUMERATION_BUDGET {
            return Err(TabularError::EnumerationBudget(ENUMERATION_BUDGET));
        }
        Ok(())
    }

    /// Parse from the key=value format with inline CSV sections
    /// `[transitions]` (s,a,s_next) and `[rewards]` (s,a,value,prob).
    pub fn from_kv(kv: &KvFile) -> Result<Self, TabularError> {
        let n_states = kv.usize_or("states", 0)?;
        let n_actions = kv.usize_or("actions", 0)?;
        let horizon = kv.usize_or("horizon", 0)?;
        let gamma = kv.f64_or("gamma", 1.0)?;
        let rho_text = kv
            .get("rho")
            .ok_or_else(|| ConfigError::Missing("rho".into()))
            .map_err(TabularError::Config)?;
        let mut rho = Vec::new();
        for part in rho_text.split(',') {
            let (s, p) = part
                .split_once(':')
                .ok_or_else(|| TabularError::InvalidMdp(format!("rho entry '{part}'")))?;
            rho.push((
                s.trim().parse::<usize>().map_err(|_| TabularError::InvalidMdp(format!("rho state '{s}'")))?,
                p.trim().parse::<f64>().map_err(|_| TabularError::InvalidMdp(format!("rho prob '{p}'")))?,
            ));
        }
        let mut next = vec![vec![0usize; n_actions]; n_states];
        for row in kv.section("transitions").unwrap_or(&[]) {
            let cols: Vec<&str> = row.split(',').map(|c| c.trim()).collect();
            if cols.len() != 3 {
                return Err(TabularError::InvalidMdp(format!("transition row '{row}'")));
            }
            let s: usize = cols[0].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            let a: usize = cols[1].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            let ns: usize = cols[2].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            next[s][a] = ns;
        }
        let mut reward: Vec<Vec<Vec<(f64, f64)>>> = vec![vec![Vec::new(); n_actions]; n_states];
        for row in kv.section("rewards").unwrap_or(&[]) {
            let cols: Vec<&str> = row.split(',').map(|c| c.trim()).collect();
            if cols.len() != 4 {
                return Err(TabularError::InvalidMdp(format!("reward row '{row}'")));
            }
            let s: usize = cols[0].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            let a: usize = cols[1].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            let v: f64 = cols[2].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            let p: f64 = cols[3].parse().map_err(|_| TabularError::InvalidMdp(row.clone()))?;
            reward[s][a].push((v, p));
        }
        let reward = reward
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|outcomes| {
                        if outcomes.is_empty() {
                            RewardDist::deterministic(0.0)
                        } else {
                            RewardDist { outcomes }
                        }
                    })
                    .collect()
            })
            .collect();
        let mdp = TabularMdp { n_states, n_actions, horizon, next, reward, rho, gamma };
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Deterministic state -> action table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy(pub Vec<usize>);

impl TabularPolicy {
    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }
}

/// Time-indexed exact values by backward induction:
/// `q[t][s][a] = E r(s,a) + gamma * v[t+1][next(s,a)]`, `v[t][s] = q[t][s][pi(s)]`.
pub fn exact_values(mdp: &TabularMdp, policy: &TabularPolicy) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let steps = mdp.horizon + 1;
    let mut v = vec![vec![0.0; mdp.n_states]; steps + 1];
    let mut q = vec![vec![vec![0.0; mdp.n_actions]; mdp.n_states]; steps];
    for t in (0..steps).rev() {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                q[t][s][a] = mdp.reward[s][a].mean() + mdp.gamma * v[t + 1][mdp.next[s][a]];
            }
            v[t][s] = q[t][s][policy.action(s)];
        }
    }
    v.truncate(steps);
    (v, q)
}

/// Exact expected return of a fixed policy via backward induction.
pub fn exact_j_via_values(mdp: &TabularMdp, policy: &TabularPolicy) -> f64 {
    let (v, _) = exact_values(mdp, policy);
    mdp.rho.iter().map(|&(s, p)| p * v[0][s]).sum()
}

/// Exact expected return of a fixed policy by full enumeration over the
/// initial distribution and every stochastic-reward branch. Dual route to
/// [`exact_j_via_values`].
pub fn exact_j(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64, TabularError> {
    mdp.validate()?;
    mdp.check_budget()?;
    let mut total = 0.0;
    for &(s0, p0) in &mdp.rho {
        total += enumerate_policy(mdp, policy, 0, s0, p0, 0.0, 1.0);
    }
    Ok(total)
}

fn enumerate_policy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    t: usize,
    s: usize,
    prob: f64,
    ret: f64,
    discount: f64,
) -> f64 {
    if t > mdp.horizon {
        return prob * ret;
    }
    let a = policy.action(s);
    let ns = mdp.next[s][a];
    let mut acc = 0.0;
    for &(value, p) in &mdp.reward[s][a].outcomes {
        acc += enumerate_policy(mdp, policy, t + 1, ns, prob * p, ret + discount * value, discount * mdp.gamma);
    }
    acc
}

/// Safe-policy inputs for the exact safety check: policies, their
/// (time-indexed) Q tables, the performance level and its coefficient grid
/// is supplied per verification call.
pub struct TabularSafeSet {
    pub policies: Vec<TabularPolicy>,
    /// q[i][t][s][a] for safe policy i.
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    pub j_s: f64,
}

impl TabularSafeSet {
    /// Exact Q tables for each policy.
    pub fn exact(mdp: &TabularMdp, policies: Vec<TabularPolicy>, j_s: f64) -> Self {
        let q = policies.iter().map(|p| exact_values(mdp, p).1).collect();
        Self { policies, q, j_s }
    }
}

#[derive(Debug, Clone)]
pub struct SeasEnumeration {
    pub expected_return: f64,
    pub paths: usize,
    /// Lowest-return path: (probability, return, per-step exploratory flag).
    pub worst_path: (f64, f64, Vec<bool>),
}

/// Expected return of episodes driven by the adaptive selection rule,
/// computed exactly by enumerating the initial distribution and every reward
/// branch. Shares [`SeasState`] with the simulator episode runner.
pub fn seas_expected_return(
    mdp: &TabularMdp,
    pi_e: &TabularPolicy,
    safe: &TabularSafeSet,
    epsilon: f64,
) -> Result<SeasEnumeration, TabularError> {
    mdp.validate()?;
    mdp.check_budget()?;
    assert_eq!(mdp.gamma, 1.0, "the safety condition sums raw rewards; use gamma = 1");
    let mut out = SeasEnumeration {
        expected_return: 0.0,
        paths: 0,
        worst_path: (0.0, f64::INFINITY, Vec::new()),
    };
    for &(s0, p0) in &mdp.rho {
        let selection = SeasState::new(safe.j_s, epsilon);
        seas_enumerate(mdp, pi_e, safe, 0, s0, selection, p0, 0.0, &mut Vec::new(), &mut out);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn seas_enumerate(
    mdp: &TabularMdp,
    pi_e: &TabularPolicy,
    safe: &TabularSafeSet,
    t: usize,
    s: usize,
    selection: SeasState,
    prob: f64,
    ret: f64,
    branch_flags: &mut Vec<bool>,
    out: &mut SeasEnumeration,
) {
    if t > mdp.horizon {
        out.expected_return += prob * ret;
        out.paths += 1;
        if ret < out.worst_path.1 {
            out.worst_path = (prob, ret, branch_flags.clone());
        }
        return;
    }
    let a_e = pi_e.action(s);
    let mut selection = selection;
    let a_s = safe.policies[selection.safe_index()].action(s);
    let q_values: Vec<f64> = safe.q.iter().map(|q| q[t][s][a_e]).collect();
    let decision = selection.decide(&q_values);
    let a = if decision.exploratory { a_e } else { a_s };
    let ns = mdp.next[s][a];
    branch_flags.push(decision.exploratory);
    for &(value, p) in &mdp.reward[s][a].outcomes {
        let mut sel = selection.clone();
        sel.record_reward(value);
        seas_enumerate(mdp, pi_e, safe, t + 1, ns, sel, prob * p, ret + value, branch_flags, out);
    }
    branch_flags.pop();
}

#[derive(Debug, Clone)]
pub struct Theorem1Row {
    pub epsilon: f64,
    pub threshold: f64,
    pub expected_return: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    pub j_s: f64,
    /// Populated on failure with the lowest-return trajectory.
    pub counterexample: Option<String>,
}

impl Theorem1Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Exact safety check: enumerated expected return at least `(1 - eps) * J_s`
/// for every epsilon in the grid, exact float comparison.
pub fn verify_theorem1(
    mdp: &TabularMdp,
    pi_e: &TabularPolicy,
    safe: &TabularSafeSet,
    eps_grid: &[f64],
) -> Result<Theorem1Report, TabularError> {
    let mut report = Theorem1Report { rows: Vec::new(), j_s: safe.j_s, counterexample: None };
    for &eps in eps_grid {
        let enumeration = seas_expected_return(mdp, pi_e, safe, eps)?;
        let threshold = (1.0 - eps) * safe.j_s;
        let pass = enumeration.expected_return >= threshold;
        if !pass && report.counterexample.is_none() {
            let (p, r, flags) = &enumeration.worst_path;
            report.counterexample = Some(format!(
                "eps={eps}: E[R]={} < threshold={threshold}; worst path prob={p} return={r} branches={:?}",
                enumeration.expected_return, flags
            ));
        }
        report.rows.push(Theorem1Row {
            epsilon: eps,
            threshold,
            expected_return: enumeration.expected_return,
            slack: enumeration.expected_return - threshold,
            pass,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AppendixAGroup {
    pub initial_state: usize,
    pub members: usize,
    pub uniform_value: f64,
    pub weighted_value: f64,
    /// Exact rearrangement sum `sum_{i<j} (w_i - w_j)(rbar_i - rbar_j)`.
    pub rearrangement: f64,
    pub termwise_nonnegative: bool,
}

#[derive(Debug, Clone)]
pub struct AppendixAReport {
    pub groups: Vec<AppendixAGroup>,
    /// J of the uniform behaviour policy under the empirical initial
    /// distribution of the trajectory set.
    pub j_uniform: f64,
    /// J of the weighted behaviour policy, expressed exactly as
    /// `j_uniform + j_gain` with a provably nonnegative gain.
    pub j_weighted: f64,
    pub j_gain: f64,
    pub pass: bool,
    pub failure: Option<String>,
}

/// Dominance of the weighted behaviour policy over the uniform one, checked
/// exactly on a set of collecting policies with known initial states.
///
/// Exact per-trajectory expected returns come from backward induction (the
/// deterministic-transition assumption makes the relabeled return equal the
/// collecting policy's value), qualities and softmax weights come from the
/// shipped weighting implementation, and the dominance is asserted through
/// the per-group termwise rearrangement sums so that equality cases are exact.
pub fn verify_appendix_a(
    mdp: &TabularMdp,
    collectors: &[(TabularPolicy, usize)],
    alpha: f64,
) -> Result<AppendixAReport, TabularError> {
    mdp.validate()?;
    assert!(!collectors.is_empty());
    let r_bar: Vec<f64> = collectors
        .iter()
        .map(|(policy, s0)| {
            let (v, _) = exact_values(mdp, policy);
            v[0][*s0]
        })
        .collect();
    let mean_return = r_bar.iter().sum::<f64>() / r_bar.len() as f64;
    let v_floor = 1e-3 * mean_return.abs().max(f64::MIN_POSITIVE);

    // group indices by initial state
    let mut order: Vec<usize> = (0..collectors.len()).collect();
    order.sort_by_key(|&i| collectors[i].1);
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        let s0 = collectors[i].1;
        match groups.last_mut() {
            Some((s, members)) if *s == s0 => members.push(i),
            _ => groups.push((s0, vec![i])),
        }
    }

    // exact group means stand in for the fitted initial-value model
    let mut a_hat = vec![0.0; collectors.len()];
    for (_, members) in &groups {
        let v_hat: f64 = members.iter().map(|&i| r_bar[i]).sum::<f64>() / members.len() as f64;
        for &i in members {
            a_hat[i] = weighting::quality(r_bar[i], v_hat, v_floor).0;
        }
    }
    let w = weighting::softmax_trajectory_weights(&a_hat, alpha);

    let n_total = collectors.len() as f64;
    let mut report = AppendixAReport {
        groups: Vec::new(),
        j_uniform: 0.0,
        j_weighted: 0.0,
        j_gain: 0.0,
        pass: true,
        failure: None,
    };
    for (s0, members) in &groups {
        let n = members.len() as f64;
        let uniform_value = members.iter().map(|&i| r_bar[i]).sum::<f64>() / n;
        let w_sum: f64 = members.iter().map(|&i| w[i]).sum();
        let weighted_value = members.iter().map(|&i| w[i] * r_bar[i]).sum::<f64>() / w_sum;
        let mut rearrangement = 0.0;
        let mut termwise = true;
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                let term = (w[i] - w[j]) * (r_bar[i] - r_bar[j]);
                if term < 0.0 {
                    termwise = false;
                }
                rearrangement += term;
            }
        }
        if !termwise || rearrangement < 0.0 {
            report.pass = false;
            if report.failure.is_none() {
                report.failure = Some(format!(
                    "initial state {s0}: rearrangement sum {rearrangement}, termwise nonnegative: {termwise}"
                ));
            }
        }
        // empirical initial distribution weight of the group
        let rho_g = n / n_total;
        report.j_uniform += rho_g * uniform_value;
        // exact nonnegative gain: rho_g * rearrangement / (N_g * sum w)
        report.j_gain += rho_g * rearrangement / (n * w_sum);
        report.groups.push(AppendixAGroup {
            initial_state: *s0,
            members: members.len(),
            uniform_value,
            weighted_value,
            rearrangement,
            termwise_nonnegative: termwise,
        });
    }
    report.j_weighted = report.j_uniform + report.j_gain;
    if report.j_gain < 0.0 {
        report.pass = false;
    }
    // cross-check the identity against the directly computed group values
    let direct: f64 = report
        .groups
        .iter()
        .map(|g| g.members as f64 / n_total * g.weighted_value)
        .sum();
    if (direct - report.j_weighted).abs() > 1e-9 * report.j_weighted.abs().max(1.0) {
        report.pass = false;
        report.failure = Some(format!(
            "identity mismatch: direct J' {direct} vs rearrangement form {}",
            report.j_weighted
        ));
    }
    Ok(report)
}

/// Reward-table style for generated oracle MDPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardStyle {
    /// Dyadic deterministic rewards: the regime in which the safety bound is
    /// exact pathwise.
    DeterministicDyadic,
    /// Two-point stochastic rewards on the dyadic grid, for the dominance
    /// check and for frozen safety instances.
    TwoPointDyadic,
}

/// Random deterministic-transition MDP on the dyadic grid.
pub fn random_mdp<R: Rng>(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    style: RewardStyle,
    rng: &mut R,
) -> TabularMdp {
    let next = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.gen_range(0..n_states)).collect())
        .collect();
    let dyadic = |rng: &mut R| rng.gen_range(0..=256) as f64 / 64.0;
    let reward = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| match style {
                    RewardStyle::DeterministicDyadic => RewardDist::deterministic(dyadic(rng)),
                    RewardStyle::TwoPointDyadic => {
                        let a = dyadic(rng);
                        let b = dyadic(rng);
                        RewardDist::two_point(a.min(b), a.max(b))
                    }
                })
                .collect()
        })
        .collect();
    // dyadic initial distribution over 1, 2 or 4 distinct states
    let n_init = [1usize, 2, 4][rng.gen_range(0..3)].min(n_states);
    let mut states: Vec<usize> = (0..n_states).collect();
    for i in 0..n_init {
        let j = rng.gen_range(i..n_states);
        states.swap(i, j);
    }
    let p = 1.0 / n_init as f64;
    let rho = states[..n_init].iter().map(|&s| (s, p)).collect();
    TabularMdp { n_states, n_actions, horizon, next, reward, rho, gamma: 1.0 }
}

pub fn random_policy<R: Rng>(mdp: &TabularMdp, rng: &mut R) -> TabularPolicy {
    TabularPolicy((0..mdp.n_states).map(|_| rng.gen_range(0..mdp.n_actions)).collect())
}

/// The safe performance level used in generated safety checks: the lowest
/// initial-state value of the safe policy, shaved by 1/1024 so the level is
/// strictly below every safe start. The safe policy's J always dominates it.
pub fn conservative_j_s(mdp: &TabularMdp, policy: &TabularPolicy) -> f64 {
    let (v, _) = exact_values(mdp, policy);
    let min_v = mdp
        .rho
        .iter()
        .map(|&(s, _)| v[0][s])
        .fold(f64::INFINITY, f64::min);
    min_v * (1.0 - 1.0 / 1024.0)
}

/// Three adversarial exploration policies against a safe policy: the action
/// minimizing the safe Q summed over time, the constant action 0, and the
/// action maximally different from the safe one.
pub fn adversarial_policies(mdp: &TabularMdp, safe: &TabularPolicy) -> Vec<TabularPolicy> {
    let (_, q) = exact_values(mdp, safe);
    let steps = mdp.horizon + 1;
    let worst = TabularPolicy(
        (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .min_by(|&a, &b| {
                        let qa: f64 = (0..steps).map(|t| q[t][s][a]).sum();
                        let qb: f64 = (0..steps).map(|t| q[t][s][b]).sum();
                        qa.partial_cmp(&qb).unwrap()
                    })
                    .unwrap()
            })
            .collect(),
    );
    let constant = TabularPolicy(vec![0; mdp.n_states]);
    let opposite = TabularPolicy(
        (0..mdp.n_states).map(|s| (safe.action(s) + 1) % mdp.n_actions).collect(),
    );
    vec![worst, constant, opposite]
}

/// The default oracle MDP: 6 states x 3 actions x horizon 5 with two-point
/// stochastic rewards.
pub fn default_oracle_mdp<R: Rng>(rng: &mut R) -> TabularMdp {
    random_mdp(6, 3, 5, RewardStyle::TwoPointDyadic, rng)
}
