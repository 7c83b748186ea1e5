//! Robust trajectory weighting: fit a reward model, relabel returns with its
//! expectations, normalize by the initial-state value, and turn the resulting
//! per-trajectory quality into transition sampling probabilities.

use crate::data::{Dataset, WeightTable};
use crate::env::State;
use crate::nn::{self, LossKind, MlpSpec, NnError, OutputTransform, ParamVector, TrainConfig};

/// State-action expected-reward approximator.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub spec: MlpSpec,
    pub theta: ParamVector,
}

impl RewardModel {
    pub fn predict(&self, s: &State, a: f64) -> f64 {
        let [s0, s1, s2] = s.as_array();
        nn::forward_scalar(&self.spec, &self.theta, &[s0, s1, s2, a])
    }
}

/// Initial-state expected-return approximator.
#[derive(Debug, Clone)]
pub struct InitialValueModel {
    pub spec: MlpSpec,
    pub theta: ParamVector,
}

impl InitialValueModel {
    pub fn predict(&self, s: &State) -> f64 {
        nn::forward_scalar(&self.spec, &self.theta, &s.as_array())
    }
}

/// Per-trajectory relabeled return and normalized quality.
#[derive(Debug, Clone)]
pub struct QualityVector {
    pub r_bar: Vec<f64>,
    pub a_hat: Vec<f64>,
    /// How many initial-state values had to be clamped to the floor.
    pub clamped: usize,
    pub v_floor: f64,
}

/// Squared-loss regression of reward on the raw (state, action) 4-vector.
pub fn fit_reward_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<RewardModel, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let spec = MlpSpec::default_net(4, OutputTransform::Identity);
    let mut xs = Vec::with_capacity(dataset.n_transitions());
    let mut ys = Vec::with_capacity(dataset.n_transitions());
    for tr in dataset.iter_transitions() {
        let [s0, s1, s2] = tr.s.as_array();
        xs.push(vec![s0, s1, s2, tr.a]);
        ys.push(tr.r);
    }
    let theta = nn::train_regression(&spec, &xs, &ys, cfg, LossKind::Squared)?;
    Ok(RewardModel { spec, theta })
}

/// Replace every stochastic reward with the model's expectation and rebuild
/// the discounted trajectory returns.
pub fn relabel_returns(dataset: &Dataset, model: &RewardModel, gamma: f64) -> Vec<f64> {
    dataset
        .trajectories
        .iter()
        .map(|traj| {
            let mut acc = 0.0;
            let mut g = 1.0;
            for tr in &traj.transitions {
                acc += g * model.predict(&tr.s, tr.a);
                g *= gamma;
            }
            acc
        })
        .collect()
}

/// Squared-loss regression of the relabeled returns on the initial states.
pub fn fit_initial_value(
    dataset: &Dataset,
    r_bar: &[f64],
    cfg: &TrainConfig,
) -> Result<InitialValueModel, NnError> {
    if dataset.is_empty() || dataset.len() != r_bar.len() {
        return Err(NnError::EmptyDataset);
    }
    let spec = MlpSpec::default_net(3, OutputTransform::Identity);
    let xs: Vec<Vec<f64>> =
        dataset.trajectories.iter().map(|t| t.initial_state().as_array().to_vec()).collect();
    let theta = nn::train_regression(&spec, &xs, r_bar, cfg, LossKind::Squared)?;
    Ok(InitialValueModel { spec, theta })
}

/// Normalized trajectory advantage `(r_bar - v) / v` with the denominator
/// clamped below at `v_floor`. Returns the quality and whether clamping fired.
pub fn quality(r_bar: f64, v_hat: f64, v_floor: f64) -> (f64, bool) {
    let clamped = v_hat < v_floor;
    let v = if clamped { v_floor } else { v_hat };
    ((r_bar - v) / v, clamped)
}

/// Qualities for a whole dataset. The floor guarding the division is
/// `1e-3 x` the dataset's mean raw return.
pub fn qualities(
    dataset: &Dataset,
    r_bar: Vec<f64>,
    v_model: &InitialValueModel,
    gamma: f64,
) -> QualityVector {
    let v_floor = 1e-3 * dataset.mean_return(gamma).abs().max(f64::MIN_POSITIVE);
    let mut a_hat = Vec::with_capacity(r_bar.len());
    let mut clamped = 0;
    for (traj, &rb) in dataset.trajectories.iter().zip(r_bar.iter()) {
        let v = v_model.predict(&traj.initial_state());
        let (a, c) = quality(rb, v, v_floor);
        a_hat.push(a);
        clamped += c as usize;
    }
    QualityVector { r_bar, a_hat, clamped, v_floor }
}

/// Max-stabilized softmax over per-trajectory qualities; sums to one.
pub fn softmax_trajectory_weights(a_hat: &[f64], alpha: f64) -> Vec<f64> {
    assert!(alpha > 0.0, "temperature must be positive");
    assert!(!a_hat.is_empty());
    let m = a_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a_hat.iter().map(|a| ((a - m) / alpha).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Broadcast per-trajectory weights onto every transition of the trajectory
/// and normalize so the table sums to one over all transitions.
pub fn weights(q: &QualityVector, alpha: f64, dataset: &Dataset) -> WeightTable {
    assert_eq!(q.a_hat.len(), dataset.len());
    let traj_w = softmax_trajectory_weights(&q.a_hat, alpha);
    let denom: f64 = traj_w
        .iter()
        .zip(dataset.trajectories.iter())
        .map(|(w, t)| w * t.len() as f64)
        .sum();
    let mut w = Vec::with_capacity(dataset.n_transitions());
    for (wi, traj) in traj_w.iter().zip(dataset.trajectories.iter()) {
        let per_transition = wi / denom;
        w.extend(std::iter::repeat(per_transition).take(traj.len()));
    }
    // kill residual drift so the sum-to-one invariant holds tightly
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    WeightTable { w }
}
