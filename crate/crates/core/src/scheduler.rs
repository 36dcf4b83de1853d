//! Diffusion-process mathematics: noise schedules, closed-form forward
//! marginals, deterministic DDIM reverse steps and inference timestep plans.
//!
//! All functions are pure; callers inject noise explicitly.

use serde::{Deserialize, Serialize};

use crate::denoiser::DepthLatent;
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor;

/// Variance schedule of the forward noising process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    horizon: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let last = *alpha_bars.last().unwrap();
        if !(last > 0.0) || alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Numerical(format!(
                "cumulative signal retention underflows (final value {last:e})"
            )));
        }
        Ok(Self {
            horizon: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t`, with `t = -1` denoting the clean endpoint (`ᾱ = 1`).
    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        if t == -1 {
            return Ok(1.0);
        }
        self.check_index(t)?;
        Ok(self.alpha_bars[t as usize])
    }

    fn check_index(&self, t: i64) -> Result<()> {
        if t < 0 || t as usize >= self.horizon {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.horizon)));
        }
        Ok(())
    }
}

/// Linear schedule from `beta_start` to `beta_end` inclusive over `horizon` steps.
pub fn make_schedule(horizon: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if horizon == 0 {
        return Err(invalid("diffusion horizon must be positive"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = if horizon == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..horizon)
            .map(|s| beta_start + span * s as f64 / (horizon - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `√ᾱ · x0 + √(1-ᾱ) · noise` for an explicit retention factor.
pub fn mix_with_noise(x0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(shape(format!("latent {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| a * x + b * n).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Samples `x_t ~ q(x_t | x_0)` using caller-supplied standard normal noise.
pub fn forward_sample(x0: &DepthLatent, t: i64, noise: &Tensor, schedule: &NoiseSchedule) -> Result<DepthLatent> {
    schedule.check_index(t)?;
    let ab = schedule.alpha_bars[t as usize];
    DepthLatent::new(mix_with_noise(x0.tensor(), noise, ab)?)
}

/// One transition of the Markov chain `q(x_s | x_{s-1})`.
///
/// Only used as a reference path for checking the closed-form marginal;
/// inference never samples stochastically.
pub fn forward_step(x_prev: f64, s: usize, noise: f64, schedule: &NoiseSchedule) -> f64 {
    let beta = schedule.betas[s];
    (1.0 - beta).sqrt() * x_prev + beta.sqrt() * noise
}

/// Deterministic DDIM update between two retention levels given an `x_0`
/// estimate.
pub fn ddim_update(x_t: &Tensor, pred_x0: &Tensor, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Tensor> {
    if x_t.shape() != pred_x0.shape() {
        return Err(shape(format!("x_t {:?} vs prediction {:?}", x_t.shape(), pred_x0.shape())));
    }
    if alpha_bar_prev == 1.0 {
        return Ok(pred_x0.clone());
    }
    if !(alpha_bar_t < 1.0) {
        return Err(Error::Numerical(format!(
            "cannot recover noise at retention {alpha_bar_t}: 1 - ᾱ_t is zero"
        )));
    }
    let (sa, sn) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(pred_x0.data())
        .map(|(&x, &p)| {
            let eps = (x - sa * p) / sn;
            pa * p + pn * eps
        })
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// DDIM step from `t` to `t_prev` (`-1` = clean endpoint) with `σ = 0`.
pub fn ddim_step(
    x_t: &DepthLatent,
    pred_x0: &DepthLatent,
    t: i64,
    t_prev: i64,
    schedule: &NoiseSchedule,
) -> Result<DepthLatent> {
    if t_prev >= t {
        return Err(invalid(format!("t_prev {t_prev} must precede t {t}")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    DepthLatent::new(ddim_update(x_t.tensor(), pred_x0.tensor(), ab_t, ab_prev)?)
}

/// Decreasing subsequence of training timesteps visited at inference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    horizon: usize,
    steps: Vec<i64>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[i64] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `(t, t_prev)` pairs, ending with `(0, -1)`.
    pub fn transitions(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(-1)))
    }
}

/// `count` evenly spaced steps from `horizon - 1` down to `0`.
pub fn make_timestep_plan(horizon: usize, count: usize) -> Result<TimestepPlan> {
    if count == 0 {
        return Err(invalid("inference step count must be at least 1"));
    }
    if count > horizon {
        return Err(invalid(format!("{count} inference steps exceed the horizon {horizon}")));
    }
    let steps = if count == 1 {
        vec![0]
    } else {
        let last = (horizon - 1) as f64;
        (0..count)
            .map(|i| (last * (count - 1 - i) as f64 / (count - 1) as f64).round() as i64)
            .collect()
    };
    debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    Ok(TimestepPlan { horizon, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(v: Vec<f64>) -> DepthLatent {
        let n = v.len();
        DepthLatent::new(Tensor::from_vec(&[1, 1, n], v).unwrap()).unwrap()
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_sample_scalar_case() {
        // ᾱ = 0.25 directly: 0.5*2 + sqrt(0.75)*1
        let x = mix_with_noise(
            &Tensor::from_vec(&[1], vec![2.0]).unwrap(),
            &Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            0.25,
        )
        .unwrap();
        assert!((x.data()[0] - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn forward_sample_identity_at_full_retention() {
        let x0 = Tensor::from_vec(&[3], vec![0.3, -1.2, 7.0]).unwrap();
        let n = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(mix_with_noise(&x0, &n, 1.0).unwrap(), x0);
    }

    #[test]
    fn forward_sample_zero_noise_is_scaled_mean() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = latent(vec![1.0, -2.0, 0.5]);
        let zero = Tensor::zeros(&[1, 1, 3]);
        for t in [0, 37, 99] {
            let xt = forward_sample(&x0, t, &zero, &s).unwrap();
            let k = s.alpha_bars()[t as usize].sqrt();
            for (a, b) in xt.tensor().data().iter().zip(x0.tensor().data()) {
                assert_eq!(*a, k * b);
            }
        }
    }

    #[test]
    fn forward_sample_errors() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = latent(vec![1.0, 2.0]);
        assert!(forward_sample(&x0, 10, &Tensor::zeros(&[1, 1, 2]), &s).is_err());
        assert!(forward_sample(&x0, -1, &Tensor::zeros(&[1, 1, 2]), &s).is_err());
        assert!(forward_sample(&x0, 3, &Tensor::zeros(&[1, 2, 1]), &s).is_err());
    }

    #[test]
    fn ddim_final_step_returns_prediction() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let xt = latent(vec![0.4, 1.0]);
        let pred = latent(vec![-0.1, 0.2]);
        let out = ddim_step(&xt, &pred, 7, -1, &s).unwrap();
        assert_eq!(out, pred);
    }

    #[test]
    fn ddim_consistency_with_forward_marginal() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = latent(vec![0.7, -1.3, 2.2, 0.0]);
        let noise = Tensor::from_vec(&[1, 1, 4], vec![0.5, -0.2, 1.4, -2.0]).unwrap();
        for (t, tp) in [(999, 500), (500, 20), (20, 0), (1, 0)] {
            let xt = forward_sample(&x0, t, &noise, &s).unwrap();
            let stepped = ddim_step(&xt, &x0, t, tp, &s).unwrap();
            let direct = forward_sample(&x0, tp, &noise, &s).unwrap();
            for (a, b) in stepped.tensor().data().iter().zip(direct.tensor().data()) {
                assert!((a - b).abs() < 1e-12, "t={t} -> {tp}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_fixed_point_when_retention_unchanged() {
        let x = Tensor::from_vec(&[2], vec![0.3, -0.8]).unwrap();
        let out = ddim_update(&x, &x, 0.6, 0.6).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ddim_errors() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x = latent(vec![1.0]);
        assert!(ddim_step(&x, &x, 3, 3, &s).is_err());
        assert!(ddim_step(&x, &x, 3, 5, &s).is_err());
        assert!(ddim_step(&x, &x, 10, 2, &s).is_err());
        assert!(ddim_update(x.tensor(), x.tensor(), 1.0, 0.5).is_err());
    }

    #[test]
    fn plan_examples() {
        let p = make_timestep_plan(1000, 20).unwrap();
        assert_eq!(p.count(), 20);
        assert!(p.steps()[0] >= 949 && p.steps()[0] < 1000);
        assert_eq!(*p.steps().last().unwrap(), 0);
        assert!(p.steps().windows(2).all(|w| w[0] > w[1]));

        let p = make_timestep_plan(10, 10).unwrap();
        assert_eq!(p.steps(), &[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);

        let p = make_timestep_plan(1000, 2).unwrap();
        assert_eq!(p.count(), 2);
        assert_eq!(p.steps()[1], 0);

        assert!(make_timestep_plan(10, 11).is_err());
        assert!(make_timestep_plan(10, 0).is_err());
        let trans: Vec<_> = make_timestep_plan(10, 3).unwrap().transitions().collect();
        assert_eq!(trans.last(), Some(&(0, -1)));
    }

    proptest! {
        #[test]
        fn schedule_invariants(horizon in 1usize..2000, a in 1e-6f64..0.5, span in 0.0f64..0.49) {
            let b = (a + span).min(0.999);
            if let Ok(s) = make_schedule(horizon, a, b) {
                prop_assert_eq!(s.betas().len(), horizon);
                for (al, be) in s.alphas().iter().zip(s.betas()) {
                    prop_assert_eq!(*al, 1.0 - be);
                }
                prop_assert!(s.alpha_bars().iter().all(|v| *v > 0.0 && *v < 1.0));
                prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            }
        }

        #[test]
        fn plan_invariants(horizon in 1usize..3000, frac in 0.0f64..1.0) {
            let count = 1 + ((horizon - 1) as f64 * frac) as usize;
            let p = make_timestep_plan(horizon, count).unwrap();
            prop_assert_eq!(p.count(), count);
            prop_assert!((p.steps()[0] as usize) < horizon);
            prop_assert_eq!(*p.steps().last().unwrap(), 0);
            prop_assert!(p.steps().windows(2).all(|w| w[0] > w[1]));
        }
    }
}
