//! Mini-batch training with adaptive-moment updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backprop_into, forward_cached, ForwardCache, MlpSpec, NnError, ParamVector};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub gradient_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 3e-4,
            batch_size: 256,
            gradient_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.step_size <= 0.0 || self.batch_size == 0 || self.gradient_steps == 0 {
            return Err(NnError::InvalidTrainConfig(
                "step_size, batch_size and gradient_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::InvalidTrainConfig("decay rates must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Squared,
    Expectile(f64),
}

impl LossKind {
    /// Loss and gradient w.r.t. the prediction, with residual `u = target - pred`.
    pub fn loss_and_dpred(&self, pred: f64, target: f64) -> (f64, f64) {
        let u = target - pred;
        match *self {
            LossKind::Squared => (u * u, -2.0 * u),
            LossKind::Expectile(tau) => {
                let w = if u < 0.0 { 1.0 - tau } else { tau };
                (w * u * u, -2.0 * w * u)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn update(&mut self, theta: &mut ParamVector, grad: &ParamVector, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for k in 0..theta.len() {
            let g = grad.0[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            theta.0[k] -= cfg.step_size * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// One network plus its optimizer state. IQL drives three of these with
/// per-step targets; plain regression uses [`train_regression`].
pub struct Trainer {
    pub spec: MlpSpec,
    pub theta: ParamVector,
    adam: AdamState,
    cfg: TrainConfig,
    cache: ForwardCache,
    grad: ParamVector,
}

impl Trainer {
    pub fn new(spec: MlpSpec, theta: ParamVector, cfg: TrainConfig) -> Self {
        let n = spec.param_count();
        let cache = ForwardCache::new(&spec);
        let grad = ParamVector::zeros(&spec);
        assert_eq!(theta.len(), n);
        Self { spec, theta, adam: AdamState::new(n), cfg, cache, grad }
    }

    pub fn init_seeded(spec: MlpSpec, cfg: TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ParamVector::init(&spec, &mut rng);
        Self::new(spec, theta, cfg)
    }

    pub fn predict(&mut self, x: &[f64]) -> f64 {
        forward_cached(&self.spec, &self.theta, x, &mut self.cache);
        self.cache.output()[0]
    }

    /// One Adam step on a batch. `per_sample` maps (batch position, prediction)
    /// to (loss, dloss/dpred); the mean loss over the batch is returned.
    pub fn step<F>(&mut self, inputs: &[&[f64]], mut per_sample: F) -> f64
    where
        F: FnMut(usize, f64) -> (f64, f64),
    {
        assert!(!inputs.is_empty());
        let scale = 1.0 / inputs.len() as f64;
        self.grad.0.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            forward_cached(&self.spec, &self.theta, x, &mut self.cache);
            let pred = self.cache.output()[0];
            let (loss, dpred) = per_sample(i, pred);
            total += loss;
            backprop_into(&self.spec, &self.theta, &self.cache, &[dpred * scale], &mut self.grad);
        }
        self.adam.update(&mut self.theta, &self.grad, &self.cfg);
        total * scale
    }
}

/// Fit a scalar-output network to `(x, y)` pairs by mini-batch gradient
/// descent with adaptive moments. Deterministic given the config seed.
pub fn train_regression(
    spec: &MlpSpec,
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &TrainConfig,
    loss: LossKind,
) -> Result<ParamVector, NnError> {
    cfg.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(NnError::EmptyDataset);
    }
    if spec.output_dim() != 1 {
        return Err(NnError::InvalidSpec("train_regression expects scalar output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(spec.clone(), ParamVector::init(spec, &mut rng), cfg.clone());
    let batch = cfg.batch_size.min(xs.len());
    let mut idx = vec![0usize; batch];
    let mut batch_refs: Vec<&[f64]> = Vec::with_capacity(batch);
    for _ in 0..cfg.gradient_steps {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..xs.len());
        }
        batch_refs.clear();
        batch_refs.extend(idx.iter().map(|&i| xs[i].as_slice()));
        trainer.step(&batch_refs, |pos, pred| loss.loss_and_dpred(pred, ys[idx[pos]]));
    }
    Ok(trainer.theta)
}

#[cfg(test)]
mod tests {
    use super::super::{forward_scalar, Activation, OutputTransform};
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![1, 16, 16, 1], Activation::Tanh, OutputTransform::Identity).unwrap()
    }

    #[test]
    fn fits_constant_targets() {
        let spec = small_spec();
        let xs: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 64.0]).collect();
        let ys = vec![3.7; 64];
        let cfg = TrainConfig { gradient_steps: 6000, batch_size: 64, step_size: 3e-3, seed: 1, ..Default::default() };
        let theta = train_regression(&spec, &xs, &ys, &cfg, LossKind::Squared).unwrap();
        for x in &xs {
            let pred = forward_scalar(&spec, &theta, x);
            assert!((pred - 3.7).abs() < 1e-2, "pred {pred}");
        }
    }

    #[test]
    fn noisy_targets_approach_conditional_means() {
        // y = mu(x) + uniform noise on a discretized grid; predictions should
        // land near the per-bin sample means.
        use rand::{Rng, SeedableRng};
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins = 8;
        let per_bin = 200;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut bin_sum = vec![0.0; bins];
        for b in 0..bins {
            let x = b as f64 / bins as f64;
            for _ in 0..per_bin {
                let mu = (2.0 * x).sin();
                let y = mu + rng.gen_range(-0.5..0.5);
                xs.push(vec![x]);
                ys.push(y);
                bin_sum[b] += y;
            }
        }
        let cfg = TrainConfig { gradient_steps: 4000, batch_size: 128, step_size: 3e-3, seed: 2, ..Default::default() };
        let theta = train_regression(&spec, &xs, &ys, &cfg, LossKind::Squared).unwrap();
        for b in 0..bins {
            let x = b as f64 / bins as f64;
            let mean = bin_sum[b] / per_bin as f64;
            let pred = forward_scalar(&spec, &theta, &[x]);
            assert!(
                (pred - mean).abs() < 0.08,
                "bin {b}: pred {pred} vs sample mean {mean}"
            );
        }
    }

    #[test]
    fn expectile_half_matches_squared_minimizer() {
        let spec = small_spec();
        let xs: Vec<Vec<f64>> = (0..128).map(|i| vec![(i as f64 / 64.0) - 1.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[0]).collect();
        let cfg = TrainConfig { gradient_steps: 3000, batch_size: 64, step_size: 3e-3, seed: 3, ..Default::default() };
        let a = train_regression(&spec, &xs, &ys, &cfg, LossKind::Squared).unwrap();
        let b = train_regression(&spec, &xs, &ys, &cfg, LossKind::Expectile(0.5)).unwrap();
        for x in &xs {
            let pa = forward_scalar(&spec, &a, x);
            let pb = forward_scalar(&spec, &b, x);
            assert!((pa - pb).abs() < 1e-3, "squared {pa} vs expectile(0.5) {pb}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_spec();
        let xs: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..32).map(|i| (i % 5) as f64).collect();
        let cfg = TrainConfig { gradient_steps: 200, seed: 77, ..Default::default() };
        let a = train_regression(&spec, &xs, &ys, &cfg, LossKind::Squared).unwrap();
        let b = train_regression(&spec, &xs, &ys, &cfg, LossKind::Squared).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = small_spec();
        let got = train_regression(&spec, &[], &[], &TrainConfig::default(), LossKind::Squared);
        assert!(matches!(got, Err(NnError::EmptyDataset)));
    }
}
