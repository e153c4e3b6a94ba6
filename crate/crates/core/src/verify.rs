//! Preference-alignment objectives evaluated on toy inputs.
//!
//! Natural log throughout, so a zero margin gives a loss of `ln 2`.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("KL divergence is infinite: reference assigns zero mass to outcome {0}")]
    DivergenceInfinite(usize),
}

/// Log-probabilities of the chosen (`w`) and rejected (`l`) responses under
/// the trained and reference policies, with the regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs<T> {
    #[serde(rename = "lw_t")]
    pub chosen_policy: T,
    #[serde(rename = "ll_t")]
    pub rejected_policy: T,
    #[serde(rename = "lw_r")]
    pub chosen_reference: T,
    #[serde(rename = "ll_r")]
    pub rejected_reference: T,
    #[serde(rename = "lambda")]
    pub weight: T,
}

impl<T: Float> PolicyLogProbs<T> {
    pub fn check(&self) -> Result<(), VerifyError> {
        let logps = [
            self.chosen_policy,
            self.rejected_policy,
            self.chosen_reference,
            self.rejected_reference,
        ];
        if logps.iter().any(|&x| x.is_nan() || x > T::zero()) {
            return Err(VerifyError::InvalidInput("log-probabilities must be <= 0".into()));
        }
        if !self.weight.is_finite() || self.weight <= T::zero() {
            return Err(VerifyError::InvalidInput("weight must be positive and finite".into()));
        }
        Ok(())
    }

    /// Scaled difference of the chosen and rejected log-ratios.
    pub fn margin(&self) -> T {
        self.weight * ((self.chosen_policy - self.chosen_reference) - (self.rejected_policy - self.rejected_reference))
    }
}

fn thirty<T: Float>() -> T {
    T::from(30.0).expect("representable")
}

/// `log(1 + exp(-t))` without overflow.
pub fn logistic_loss<T: Float>(t: T) -> T {
    if t < -thirty::<T>() {
        -t + t.exp().ln_1p()
    } else {
        (-t).exp().ln_1p()
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_batch<T: Float>(batch: &[PolicyLogProbs<T>]) -> Result<(), VerifyError> {
    if batch.is_empty() {
        return Err(VerifyError::InvalidInput("empty batch".into()));
    }
    batch.iter().try_for_each(PolicyLogProbs::check)
}

fn count<T: Float>(n: usize) -> T {
    T::from(n).expect("batch size representable")
}

/// Mean logistic loss of the scaled margins.
pub fn dpo_loss<T: Float>(batch: &[PolicyLogProbs<T>]) -> Result<T, VerifyError> {
    check_batch(batch)?;
    let sum = batch.iter().fold(T::zero(), |acc, x| acc + logistic_loss(x.margin()));
    Ok(sum / count(batch.len()))
}

/// Gradient of [`dpo_loss`] with respect to each example's log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbGrad<T> {
    pub chosen_policy: T,
    pub rejected_policy: T,
    pub chosen_reference: T,
    pub rejected_reference: T,
}

pub fn dpo_grad<T: Float>(batch: &[PolicyLogProbs<T>]) -> Result<Vec<LogProbGrad<T>>, VerifyError> {
    check_batch(batch)?;
    let n = count::<T>(batch.len());
    Ok(batch
        .iter()
        .map(|x| {
            let g = x.weight * sigmoid(-x.margin()) / n;
            LogProbGrad {
                chosen_policy: -g,
                rejected_policy: g,
                chosen_reference: g,
                rejected_reference: -g,
            }
        })
        .collect())
}

/// Rewards with trained and reference distributions over a finite set of
/// responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalToy<T> {
    pub rewards: Vec<T>,
    pub policy: Vec<T>,
    pub reference: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlhfTerms<T> {
    pub expected_reward: T,
    pub kl: T,
    pub objective: T,
}

fn check_distribution<T: Float>(p: &[T], name: &str) -> Result<(), VerifyError> {
    if p.iter().any(|&x| x.is_nan() || x < T::zero()) {
        return Err(VerifyError::InvalidInput(format!("{name} has a negative entry")));
    }
    let total = p.iter().fold(T::zero(), |a, &b| a + b);
    let tol = T::from(1e-9)
        .expect("representable")
        .max(T::epsilon() * count(p.len().max(1) * 4));
    if (total - T::one()).abs() > tol {
        return Err(VerifyError::InvalidInput(format!("{name} does not sum to 1")));
    }
    Ok(())
}

impl<T: Float> CategoricalToy<T> {
    pub fn check(&self) -> Result<(), VerifyError> {
        if self.rewards.is_empty()
            || self.policy.len() != self.rewards.len()
            || self.reference.len() != self.rewards.len()
        {
            return Err(VerifyError::InvalidInput(
                "vectors must be non-empty and of equal length".into(),
            ));
        }
        check_distribution(&self.policy, "policy")?;
        check_distribution(&self.reference, "reference")
    }
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence<T: Float>(p: &[T], q: &[T]) -> Result<T, VerifyError> {
    let mut kl = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == T::zero() {
            continue;
        }
        if qi == T::zero() {
            return Err(VerifyError::DivergenceInfinite(i));
        }
        kl = kl + pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Expected reward minus `weight` times the KL divergence from the reference.
pub fn rlhf_objective<T: Float>(toy: &CategoricalToy<T>, weight: T) -> Result<RlhfTerms<T>, VerifyError> {
    toy.check()?;
    if weight.is_nan() || weight < T::zero() {
        return Err(VerifyError::InvalidInput("weight must be non-negative".into()));
    }
    let expected_reward = toy
        .policy
        .iter()
        .zip(&toy.rewards)
        .fold(T::zero(), |acc, (&p, &r)| acc + p * r);
    let kl = kl_divergence(&toy.policy, &toy.reference)?;
    Ok(RlhfTerms {
        expected_reward,
        kl,
        objective: expected_reward - weight * kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(w: f64, l: f64, wr: f64, lr: f64, weight: f64) -> PolicyLogProbs<f64> {
        PolicyLogProbs {
            chosen_policy: w,
            rejected_policy: l,
            chosen_reference: wr,
            rejected_reference: lr,
            weight,
        }
    }

    #[test]
    fn zero_margin_is_ln2() {
        let loss = dpo_loss(&[ex(-1.0, -1.0, -1.0, -1.0, 1.0), ex(-3.0, -2.0, -3.0, -2.0, 0.5)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_margin() {
        let loss = dpo_loss(&[ex(-1.0, -2.0, -2.0, -2.0, 1.0)]).unwrap();
        assert_relative_eq!(loss, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-15);
        assert_relative_eq!(loss, 0.313_261_687_518_222_8, epsilon = 1e-15);
        let doubled = dpo_loss(&[ex(-1.0, -2.0, -2.0, -2.0, 2.0)]).unwrap();
        assert!(doubled < loss);
    }

    #[test]
    fn extreme_margins_stay_finite() {
        assert_relative_eq!(logistic_loss(-800.0f64), 800.0, epsilon = 1e-12);
        assert_eq!(logistic_loss(800.0f64), 0.0);
        assert!(sigmoid(-800.0f64).is_finite());
    }

    #[test]
    fn gradient_at_zero_margin() {
        let g = dpo_grad(&[ex(-1.0, -1.0, -1.0, -1.0, 1.0)]).unwrap()[0];
        assert_eq!(g.chosen_policy, -0.5);
        assert_eq!(g.rejected_policy, 0.5);
        assert_eq!(g.chosen_reference, -g.chosen_policy);
        assert_eq!(g.rejected_reference, -g.rejected_policy);
    }

    #[test]
    fn invalid_inputs() {
        assert!(dpo_loss::<f64>(&[]).is_err());
        assert!(dpo_loss(&[ex(0.1, -1.0, -1.0, -1.0, 1.0)]).is_err());
        assert!(dpo_loss(&[ex(-1.0, -1.0, -1.0, -1.0, 0.0)]).is_err());
    }

    #[test]
    fn rlhf_hand_value() {
        let toy = CategoricalToy {
            rewards: vec![1.0, 0.0],
            policy: vec![1.0, 0.0],
            reference: vec![0.5, 0.5],
        };
        let terms = rlhf_objective(&toy, 1.0).unwrap();
        assert_relative_eq!(terms.objective, 1.0 - std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(terms.objective, 0.306_852_819_440_054_7, epsilon = 1e-15);
    }

    #[test]
    fn kl_infinite_is_reported() {
        let toy = CategoricalToy {
            rewards: vec![1.0, 0.0],
            policy: vec![0.5, 0.5],
            reference: vec![1.0, 0.0],
        };
        assert_eq!(rlhf_objective(&toy, 1.0), Err(VerifyError::DivergenceInfinite(1)));
    }

    #[test]
    fn single_precision_agrees() {
        let l32 = dpo_loss(&[PolicyLogProbs::<f32> {
            chosen_policy: -1.0,
            rejected_policy: -2.0,
            chosen_reference: -2.0,
            rejected_reference: -2.0,
            weight: 1.0,
        }])
        .unwrap();
        assert!((l32 as f64 - 0.313_261_687_518_222_8).abs() < 1e-6);
    }

    #[test]
    fn jsonl_field_names() {
        let x: PolicyLogProbs<f64> =
            serde_json::from_str(r#"{"lw_t":-1,"ll_t":-2,"lw_r":-1.5,"ll_r":-1.5,"lambda":0.1}"#).unwrap();
        assert_eq!(x, ex(-1.0, -2.0, -1.5, -1.5, 0.1));
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<PolicyLogProbs<f64>> {
        (0..n)
            .map(|_| {
                ex(
                    -rng.gen_range(0.1..5.0),
                    -rng.gen_range(0.1..5.0),
                    -rng.gen_range(0.1..5.0),
                    -rng.gen_range(0.1..5.0),
                    rng.gen_range(0.05..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 4);
            let grads = dpo_grad(&batch).unwrap();
            for (i, g) in grads.iter().enumerate() {
                let analytic = [
                    g.chosen_policy,
                    g.rejected_policy,
                    g.chosen_reference,
                    g.rejected_reference,
                ];
                for (f, &a) in analytic.iter().enumerate() {
                    let shift = |d: f64| {
                        let mut b = batch.clone();
                        let field = match f {
                            0 => &mut b[i].chosen_policy,
                            1 => &mut b[i].rejected_policy,
                            2 => &mut b[i].chosen_reference,
                            _ => &mut b[i].rejected_reference,
                        };
                        *field += d;
                        dpo_loss(&b).unwrap()
                    };
                    let numeric = (shift(h) - shift(-h)) / (2.0 * h);
                    assert!((numeric - a).abs() <= 1e-6 * a.abs().max(1e-3), "{numeric} vs {a}");
                }
            }
        }
    }

    fn distribution(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_monotone(
            w in -5.0f64..-0.01, l in -5.0f64..-0.01, wr in -5.0f64..-0.01, lr in -5.0f64..-0.01,
            weight in 0.05f64..3.0, d in 0.01f64..1.0,
        ) {
            let base = dpo_loss(&[ex(w, l, wr, lr, weight)]).unwrap();
            prop_assert!(base >= 0.0);
            // Raising the chosen log-ratio lowers the loss; raising the rejected one raises it.
            let up_w = dpo_loss(&[ex(w, l, wr - d, lr, weight)]).unwrap();
            let up_l = dpo_loss(&[ex(w, l, wr, lr - d, weight)]).unwrap();
            prop_assert!(up_w < base);
            prop_assert!(up_l > base);
        }

        #[test]
        fn kl_nonnegative_and_zero_on_self(raw_p in proptest::collection::vec(0.01f64..1.0, 2..8), seed in any::<u64>()) {
            let p = distribution(&raw_p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = distribution(&(0..p.len()).map(|_| rng.gen_range(0.01..1.0)).collect::<Vec<_>>());
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        }

        #[test]
        fn objective_is_concave_in_policy(
            raw_a in proptest::collection::vec(0.01f64..1.0, 3),
            raw_b in proptest::collection::vec(0.01f64..1.0, 3),
            rewards in proptest::collection::vec(-2.0f64..2.0, 3),
            weight in 0.0f64..2.0,
        ) {
            let reference = distribution(&[1.0, 2.0, 3.0]);
            let (a, b) = (distribution(&raw_a), distribution(&raw_b));
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let f = |p: Vec<f64>| rlhf_objective(&CategoricalToy { rewards: rewards.clone(), policy: p, reference: reference.clone() }, weight).unwrap().objective;
            let (fa, fb, fm) = (f(a), f(b), f(mid));
            prop_assert!(fm >= 0.5 * (fa + fb) - 1e-12);
        }

        #[test]
        fn zero_weight_is_expected_reward(raw in proptest::collection::vec(0.01f64..1.0, 2..6)) {
            let p = distribution(&raw);
            let q = distribution(&vec![1.0; p.len()]);
            let rewards: Vec<f64> = (0..p.len()).map(|i| i as f64).collect();
            let toy = CategoricalToy { rewards, policy: p, reference: q };
            let terms = rlhf_objective(&toy, 0.0).unwrap();
            prop_assert_eq!(terms.objective, terms.expected_reward);
        }
    }
}
