//! Deterministic bidding policies and the two exploration constructions:
//! parameter-space noise (one perturbation per episode, held fixed) and
//! action-space noise (fresh Gaussian per step).

use rand::Rng;

use crate::data::NoiseKind;
use crate::env::State;
use crate::nn::{self, MlpSpec, OutputTransform, ParamVector};

/// A deterministic policy: a scalar-output network whose squashed output is
/// the bidding parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub spec: MlpSpec,
    pub theta: ParamVector,
}

impl Policy {
    pub fn new(spec: MlpSpec, theta: ParamVector) -> Self {
        assert_eq!(spec.output_dim(), 1, "policy output must be scalar");
        assert!(
            matches!(spec.output, OutputTransform::Squash { .. }),
            "policy output must be squashed onto the action interval"
        );
        assert_eq!(theta.len(), spec.param_count());
        Self { spec, theta }
    }

    /// Standard policy architecture for a 3-dimensional state squashed onto
    /// the bidding-parameter interval.
    pub fn spec_for(lambda_range: (f64, f64)) -> MlpSpec {
        MlpSpec::default_net(3, OutputTransform::Squash { lo: lambda_range.0, hi: lambda_range.1 })
    }

    pub fn act(&self, s: &State) -> f64 {
        nn::forward_scalar(&self.spec, &self.theta, &s.as_array())
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        match self.spec.output {
            OutputTransform::Squash { lo, hi } => (lo, hi),
            OutputTransform::Identity => unreachable!("policy is always squashed"),
        }
    }

    pub fn theta_hash(&self) -> u64 {
        nn::param_hash(&self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { kind: NoiseKind::None, sigma: 0.0, seed: 0 }
    }
}

/// Perturbed copy of a policy under factorised Gaussian parameter noise.
/// The perturbation is drawn once; actions within the episode all come from
/// the same perturbed parameters. The base policy is left untouched.
pub fn psn_sample<R: Rng>(policy: &Policy, sigma: f64, rng: &mut R) -> Policy {
    let noise = nn::factorised_noise(&policy.spec, sigma, rng);
    let mut theta = policy.theta.clone();
    theta.add_scaled(&noise, 1.0);
    Policy { spec: policy.spec.clone(), theta }
}

/// Action-space-noise action: base action plus fresh Gaussian noise, clamped
/// onto the admissible interval.
pub fn asn_act<R: Rng>(policy: &Policy, s: &State, sigma: f64, rng: &mut R) -> f64 {
    let (lo, hi) = policy.lambda_range();
    let a = policy.act(s) + nn::gaussian(rng, sigma);
    a.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_policy(seed: u64) -> Policy {
        let spec = Policy::spec_for((0.1, 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ParamVector::init(&spec, &mut rng);
        Policy::new(spec, theta)
    }

    fn random_state<R: Rng>(rng: &mut R) -> State {
        State {
            time_frac: rng.gen(),
            consumed_frac: rng.gen(),
            budget_left_scaled: rng.gen(),
        }
    }

    #[test]
    fn zero_theta_policy_outputs_squash_midpoint() {
        let spec = Policy::spec_for((0.1, 10.0));
        let policy = Policy::new(spec.clone(), ParamVector::zeros(&spec));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let s = random_state(&mut rng);
            assert!((policy.act(&s) - 5.05).abs() < 1e-12);
        }
    }

    #[test]
    fn act_is_deterministic_and_in_range() {
        let policy = test_policy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = random_state(&mut rng);
            let a = policy.act(&s);
            assert_eq!(a, policy.act(&s));
            assert!((0.1..=10.0).contains(&a));
        }
    }

    #[test]
    fn psn_zero_sigma_is_identity() {
        let policy = test_policy(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let perturbed = psn_sample(&policy, 0.0, &mut rng);
        assert_eq!(policy.theta, perturbed.theta);
    }

    #[test]
    fn psn_same_seed_same_perturbation() {
        let policy = test_policy(5);
        let a = psn_sample(&policy, 0.05, &mut ChaCha8Rng::seed_from_u64(9));
        let b = psn_sample(&policy, 0.05, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.theta, b.theta);
        assert_ne!(a.theta, policy.theta);
    }

    #[test]
    fn asn_zero_sigma_matches_act() {
        let policy = test_policy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(4);
            assert_eq!(asn_act(&policy, &s, 0.0, &mut noise_rng), policy.act(&s));
        }
    }

    #[test]
    fn asn_noise_std_matches_sigma_away_from_clamp() {
        // Pin the base action near the interval midpoint so the clamp never
        // bites, then check the empirical std of the added noise.
        let spec = Policy::spec_for((0.1, 10.0));
        let policy = Policy::new(spec.clone(), ParamVector::zeros(&spec)); // act = 5.05
        let s = State { time_frac: 0.5, consumed_frac: 0.5, budget_left_scaled: 0.5 };
        let sigma = 0.3;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let d = asn_act(&policy, &s, sigma, &mut rng) - policy.act(&s);
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn asn_respects_lambda_range() {
        let policy = test_policy(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let s = random_state(&mut rng);
            let a = asn_act(&policy, &s, 5.0, &mut rng);
            assert!((0.1..=10.0).contains(&a));
        }
    }

    #[test]
    fn asn_noise_is_serially_uncorrelated() {
        let spec = Policy::spec_for((0.1, 10.0));
        let policy = Policy::new(spec.clone(), ParamVector::zeros(&spec));
        let s = State { time_frac: 0.5, consumed_frac: 0.5, budget_left_scaled: 0.5 };
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise: Vec<f64> =
            (0..n).map(|_| asn_act(&policy, &s, 0.5, &mut rng) - policy.act(&s)).collect();
        let mean = noise.iter().sum::<f64>() / n as f64;
        let var = noise.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let lag1 = noise
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / ((n - 1) as f64 * var);
        assert!(lag1.abs() <= 3.0 / (n as f64).sqrt(), "lag-1 autocorrelation {lag1}");
    }
}
