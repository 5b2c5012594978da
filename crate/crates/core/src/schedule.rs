//! Linear-β noise schedule, forward diffusion and DDIM stepping/inversion.
//!
//! Timesteps are integers `0..=T`; `ᾱ_0 = 1` so stepping to `t_prev = 0`
//! lands on a clean sample.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Rng, Tensor};
use crate::error::{Error, Result};

/// Serializable schedule parameters (stored in checkpoint headers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Builds `T` linearly spaced betas (endpoints inclusive) and their cumulative products.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            params,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    /// `β_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// DDIM `σ` for a `t → t_prev` step under the eta parameterisation.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let (a_t, a_p) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Evenly strided sampling timesteps, high to low: `[T, T−Δ, …, Δ]`.
    pub fn sampling_timesteps(&self, sampling_steps: usize) -> Result<Vec<usize>> {
        if sampling_steps == 0 || self.steps() % sampling_steps != 0 {
            return Err(Error::invalid(format!(
                "sampling steps {sampling_steps} must divide T = {}",
                self.steps()
            )));
        }
        let stride = self.steps() / sampling_steps;
        Ok((1..=sampling_steps).rev().map(|i| i * stride).collect())
    }

    /// Stride between consecutive sampling timesteps.
    pub fn stride(&self, sampling_steps: usize) -> Result<usize> {
        self.sampling_timesteps(sampling_steps)?;
        Ok(self.steps() / sampling_steps)
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample<F: Float>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!("q_sample timestep {t} outside 1..={}", sched.steps())));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (F::of(a.sqrt()), F::of((1.0 - a).sqrt()));
    x0.zip_map(eps, "q_sample", |x, e| sa * x + sn * e)
}

/// Deterministic DDIM update with separate noise estimates for the
/// "predicted x_0" term and the "direction pointing to x_t" term.
///
/// `√ᾱ_prev·(z − √(1−ᾱ_t)·eps_x0)/√ᾱ_t + √(1−ᾱ_prev)·eps_dir`
pub fn ddim_split_step<F: Float>(
    z_t: &Tensor<F>,
    eps_x0: &Tensor<F>,
    eps_dir: &Tensor<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    z_t.check_same_shape(eps_x0, "ddim_split_step")?;
    z_t.check_same_shape(eps_dir, "ddim_split_step")?;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sqrt_at, sqrt_1at) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sqrt_ap, sqrt_1ap) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_x0.data())
        .zip(eps_dir.data())
        .map(|((&z, &e0), &ed)| {
            let x0 = (z.f64() - sqrt_1at * e0.f64()) / sqrt_at;
            F::of(sqrt_ap * x0 + sqrt_1ap * ed.f64())
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// One DDIM step `t → t_prev`. With `eta = 0` the result is a deterministic
/// function of `(z_t, eps_hat)` and `rng` is untouched.
pub fn ddim_step<F: Float>(
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    if eta == 0.0 {
        return ddim_split_step(z_t, eps_hat, eps_hat, t, t_prev, sched);
    }
    z_t.check_same_shape(eps_hat, "ddim_step")?;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = sched.sigma(t, t_prev, eta);
    let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = (z.f64() - (1.0 - a_t).sqrt() * e.f64()) / a_t.sqrt();
            F::of(a_p.sqrt() * x0 + dir * e.f64() + sigma * rng.gaussian())
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Algebraic inverse of [`ddim_step`] at `eta = 0` under a frozen `eps_hat`:
/// maps `z_t` up to `z_{t_next}`.
pub fn ddim_invert_step<F: Float>(
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    z_t.check_same_shape(eps_hat, "ddim_invert_step")?;
    sched.check_t(t_next)?;
    if t_next <= t {
        return Err(Error::invalid(format!("inversion step needs t_next > t, got {t} -> {t_next}")));
    }
    let (a_t, a_n) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = (z.f64() - (1.0 - a_t).sqrt() * e.f64()) / a_t.sqrt();
            F::of(a_n.sqrt() * x0 + (1.0 - a_n).sqrt() * e.f64())
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Stream;

    #[test]
    fn two_step_product() {
        let s = make_linear_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_alpha_bar_regression() {
        // Direct product of (1 - β_i) over 200 linearly spaced betas in [1e-4, 0.02].
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let mut prod = 1.0f64;
        for i in 0..200 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0);
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-15);
        assert!((s.alpha_bar(200) - ALPHA_BAR_200).abs() < 1e-12);
    }

    // Frozen from the direct-product oracle above.
    const ALPHA_BAR_200: f64 = 0.13218275425061793;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_linear_schedule(1, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn sigma_vanishes_at_eta_zero() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        for t in 1..=200 {
            assert_eq!(s.sigma(t, t - 1, 0.0), 0.0);
        }
    }

    #[test]
    fn eta_one_matches_ddpm_posterior_variance() {
        // σ² at eta=1, t_prev=t-1 equals β̃_t = (1-ᾱ_{t-1})/(1-ᾱ_t)·β_t.
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        for t in [2, 50, 199] {
            let sigma = s.sigma(t, t - 1, 1.0);
            let tilde = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
            assert!((sigma * sigma - tilde).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_timesteps_are_strided() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let ts = s.sampling_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!((ts[0], ts[19]), (200, 10));
        assert!(s.sampling_timesteps(30).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = make_linear_schedule(2, 0.1, 0.1).unwrap();
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let out = q_sample(&ones, 2, &ones, &s).unwrap();
        for v in out.data() {
            assert!((v - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        }
        assert!(q_sample(&ones, 0, &ones, &s).is_err());
        assert!(q_sample(&ones, 3, &ones, &s).is_err());
    }

    #[test]
    fn ddim_scalar_hand_evaluation() {
        // ᾱ_1 = 0.9, ᾱ_2 = 0.9·(1 − β_2) = 0.5.
        let s = make_linear_schedule(2, 0.1, 1.0 - 0.5 / 0.9).unwrap();
        assert!((s.alpha_bar(2) - 0.5).abs() < 1e-15);
        let z = Tensor::<f64>::scalar(1.0);
        let e = Tensor::<f64>::scalar(0.2);
        let mut rng = Rng::new(0, Stream::SampleNoise);
        let out = ddim_step(&z, &e, 2, 1, &s, 0.0, &mut rng).unwrap();
        // √0.9·(1 − √0.5·0.2)/√0.5 + √0.1·0.2
        assert!((out.item() - 1.2151496800931383).abs() < 1e-12);
    }

    #[test]
    fn noiseless_step_and_inversion_rescale() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let z = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let e = Tensor::<f64>::zeros(&[3]);
        let mut rng = Rng::new(0, Stream::SampleNoise);
        let down = ddim_step(&z, &e, 120, 80, &s, 0.0, &mut rng).unwrap();
        let up = ddim_invert_step(&z, &e, 80, 120, &s).unwrap();
        let r_down = (s.alpha_bar(80) / s.alpha_bar(120)).sqrt();
        for i in 0..3 {
            assert!((down.data()[i] - r_down * z.data()[i]).abs() < 1e-12);
            assert!((up.data()[i] - z.data()[i] / r_down).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_bad_eta_and_ordering() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let z = Tensor::<f32>::zeros(&[2]);
        let mut rng = Rng::new(0, Stream::SampleNoise);
        assert!(ddim_step(&z, &z, 10, 5, &s, 1.5, &mut rng).is_err());
        assert!(ddim_step(&z, &z, 5, 10, &s, 0.0, &mut rng).is_err());
        assert!(ddim_invert_step(&z, &z, 10, 5, &s).is_err());
    }
}
