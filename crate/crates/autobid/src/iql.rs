//! Conservative offline policy training in the IQL style, consuming weighted
//! transition samples: an expectile value fit, a squared-loss Q fit against
//! the value bootstrap, and advantage-weighted regression onto dataset
//! actions for the deterministic policy.

use thiserror::Error;

use crate::data::{DataError, Dataset, WeightTable, WeightedSampler};
use crate::nn::{self, LossKind, MlpSpec, NnError, OutputTransform, ParamVector, TrainConfig, Trainer};
use crate::policy::Policy;
use crate::rollout::derive_seed;
use crate::seas::MlpQ;

pub use crate::rollout::evaluate_policy;

#[derive(Debug, Error)]
pub enum IqlError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at step {step}: non-finite {which} loss")]
    Diverged { step: usize, which: &'static str },
}

#[derive(Debug, Clone)]
pub struct IqlConfig {
    /// Expectile for the value fit.
    pub tau: f64,
    /// Advantage-weighted-regression inverse temperature.
    pub beta: f64,
    pub gamma: f64,
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Full-copy refresh interval for the target Q network.
    pub target_refresh: usize,
    /// Upper bound on the AWR factor.
    pub awr_weight_clip: f64,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            beta: 1.25,
            gamma: 1.0,
            gradient_steps: 10_000,
            batch_size: 256,
            step_size: 3e-4,
            target_refresh: 1000,
            awr_weight_clip: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainDiagnostics {
    /// (step, v loss, q loss, policy loss) sampled periodically.
    pub losses: Vec<(usize, f64, f64, f64)>,
    pub low_support: bool,
}

pub struct TrainedBundle {
    pub policy: Policy,
    pub v_spec: MlpSpec,
    pub v_theta: ParamVector,
    pub q: MlpQ,
    pub diagnostics: TrainDiagnostics,
}

/// Train policy, Q and V on weighted minibatches of the dataset.
/// Deterministic given the config seed.
pub fn train_iql(
    dataset: &Dataset,
    weights: &WeightTable,
    cfg: &IqlConfig,
    lambda_range: (f64, f64),
) -> Result<TrainedBundle, IqlError> {
    if dataset.is_empty() {
        return Err(IqlError::Nn(NnError::EmptyDataset));
    }
    weights.validate(dataset)?;
    let support = weights.w.iter().filter(|&&w| w > 0.0).count();
    let low_support = support <= 1;

    // flattened views
    let n = dataset.n_transitions();
    let mut sa: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s_only: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s_next: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut actions: Vec<f64> = Vec::with_capacity(n);
    let mut rewards: Vec<f64> = Vec::with_capacity(n);
    let mut dones: Vec<bool> = Vec::with_capacity(n);
    for tr in dataset.iter_transitions() {
        let [s0, s1, s2] = tr.s.as_array();
        let [n0, n1, n2] = tr.s_next.as_array();
        sa.push(vec![s0, s1, s2, tr.a]);
        s_only.push(vec![s0, s1, s2]);
        s_next.push(vec![n0, n1, n2]);
        actions.push(tr.a);
        rewards.push(tr.r);
        dones.push(tr.done);
    }

    let train_cfg = |seed: u64| TrainConfig {
        step_size: cfg.step_size,
        batch_size: cfg.batch_size,
        gradient_steps: cfg.gradient_steps,
        seed,
        ..TrainConfig::default()
    };
    let q_spec = MlpSpec::default_net(4, OutputTransform::Identity);
    let v_spec = MlpSpec::default_net(3, OutputTransform::Identity);
    let pi_spec = Policy::spec_for(lambda_range);
    let mut q_net = Trainer::init_seeded(q_spec.clone(), train_cfg(derive_seed(cfg.seed, 0x0, 1)), derive_seed(cfg.seed, 0x10, 1));
    let mut v_net = Trainer::init_seeded(v_spec.clone(), train_cfg(derive_seed(cfg.seed, 0x0, 2)), derive_seed(cfg.seed, 0x10, 2));
    let mut pi_net = Trainer::init_seeded(pi_spec.clone(), train_cfg(derive_seed(cfg.seed, 0x0, 3)), derive_seed(cfg.seed, 0x10, 3));
    let mut q_target = q_net.theta.clone();

    let mut sampler = WeightedSampler::new(weights, dataset, derive_seed(cfg.seed, 0x5A, 0))?;
    let batch = cfg.batch_size.min(n);
    let mut idx = vec![0usize; batch];
    let mut refs: Vec<&[f64]> = Vec::with_capacity(batch);
    let mut targets = vec![0.0; batch];
    let mut advantages = vec![0.0; batch];
    let mut diagnostics = TrainDiagnostics { low_support, ..Default::default() };

    for step in 0..cfg.gradient_steps {
        if step % cfg.target_refresh == 0 {
            q_target = q_net.theta.clone();
        }
        for slot in idx.iter_mut() {
            *slot = sampler.next_index();
        }

        // V step: expectile regression of Q_target(s, a) on V(s)
        refs.clear();
        for (pos, &i) in idx.iter().enumerate() {
            refs.push(s_only[i].as_slice());
            targets[pos] = nn::forward_scalar(&q_spec, &q_target, &sa[i]);
        }
        let v_loss = v_net.step(&refs, |pos, pred| {
            LossKind::Expectile(cfg.tau).loss_and_dpred(pred, targets[pos])
        });

        // Q step: squared regression on r + gamma * (1 - done) * V(s')
        refs.clear();
        for (pos, &i) in idx.iter().enumerate() {
            refs.push(sa[i].as_slice());
            let bootstrap = if dones[i] { 0.0 } else { nn::forward_scalar(&v_spec, &v_net.theta, &s_next[i]) };
            targets[pos] = rewards[i] + cfg.gamma * bootstrap;
        }
        let q_loss = q_net.step(&refs, |pos, pred| LossKind::Squared.loss_and_dpred(pred, targets[pos]));

        // policy step: AWR onto dataset actions. Advantages are standardized
        // within the batch so the fixed inverse temperature stays meaningful
        // across reward scales.
        refs.clear();
        for (pos, &i) in idx.iter().enumerate() {
            refs.push(s_only[i].as_slice());
            let q = nn::forward_scalar(&q_spec, &q_target, &sa[i]);
            let v = nn::forward_scalar(&v_spec, &v_net.theta, &s_only[i]);
            advantages[pos] = q - v;
        }
        let mean_a = advantages.iter().sum::<f64>() / batch as f64;
        let var_a = advantages.iter().map(|a| (a - mean_a) * (a - mean_a)).sum::<f64>() / batch as f64;
        let scale_a = var_a.sqrt().max(1e-8);
        let pi_loss = pi_net.step(&refs, |pos, pred| {
            let w = (cfg.beta * advantages[pos] / scale_a).exp().min(cfg.awr_weight_clip);
            let diff = pred - actions[idx[pos]];
            (w * diff * diff, 2.0 * w * diff)
        });

        if !v_loss.is_finite() {
            return Err(IqlError::Diverged { step, which: "value" });
        }
        if !q_loss.is_finite() {
            return Err(IqlError::Diverged { step, which: "q" });
        }
        if !pi_loss.is_finite() {
            return Err(IqlError::Diverged { step, which: "policy" });
        }
        if step % 500 == 0 || step + 1 == cfg.gradient_steps {
            diagnostics.losses.push((step, v_loss, q_loss, pi_loss));
        }
    }

    Ok(TrainedBundle {
        policy: Policy::new(pi_spec, pi_net.theta),
        v_spec,
        v_theta: v_net.theta,
        q: MlpQ { spec: q_spec, theta: q_net.theta },
        diagnostics,
    })
}
