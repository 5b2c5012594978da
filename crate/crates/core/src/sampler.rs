//! Two-branch erasure sampling.
//!
//! Branch R replays the null-optimised reconstruction and records its
//! self-attention K/V; branch E starts from the same `z_T`, runs on R's
//! K/V, applies the attention guidance and, inside the optimisation window,
//! extra same-timestep latent updates. E's DDIM update keeps the
//! classifier-free estimate in the predicted-`x_0` term and the guided
//! estimate in the direction term.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserWeights, KvMode, PromptTokens};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::guidance::{guided_noise, GuidanceConfig, GuidedNoise, StepInputs};
use crate::inversion::{cfg_combine, InversionBundle};
use crate::schedule::{ddim_split_step, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Run E's self-attention on R's keys/values.
    pub inject_self_attention: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            inject_self_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub attention_active: bool,
    /// Energy at the first evaluation and after every repeat.
    pub energies: Vec<f64>,
    /// Norm of the perturbation used in the final update.
    pub perturbation_norm: f64,
    pub repeats: usize,
}

/// Branch latents kept at the probe timestep for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub t: usize,
    pub edit: Tensor,
    pub recon: Tensor,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub edited: Tensor,
    pub reconstructed: Tensor,
    pub logs: Vec<StepLog>,
    pub config: GuidanceConfig,
    pub probe: Probe,
}

/// Same-timestep latent update with two noise estimates:
/// `√ᾱ_t·(z − √(1−ᾱ_t)·eps_cfg)/√ᾱ_t + √(1−ᾱ_t)·eps_guid`.
pub fn classifier_optimize_step(
    z: &Tensor,
    eps_cfg: &Tensor,
    eps_guid: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    z.check_same_shape(eps_cfg, "classifier_optimize_step")?;
    z.check_same_shape(eps_guid, "classifier_optimize_step")?;
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!("timestep {t} outside 1..={}", sched.steps())));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps_cfg.data())
        .zip(eps_guid.data())
        .map(|((&z, &ec), &eg)| (sa * ((z as f64 - sn * ec as f64) / sa) + sn * eg as f64) as f32)
        .collect();
    Tensor::new(z.shape(), data)
}

/// Sampling timestep nearest to the middle of the attention window (ties
/// go to the larger timestep).
pub fn probe_timestep(cfg: &GuidanceConfig, timesteps: &[usize], total: usize) -> usize {
    let mid = 0.5 * (cfg.t_attn_lo + cfg.t_attn_hi) * total as f64;
    let mut best = timesteps[0];
    for &t in timesteps {
        if (t as f64 - mid).abs() < (best as f64 - mid).abs() {
            best = t;
        }
    }
    best
}

fn plain_cfg(
    weights: &DenoiserWeights,
    z: &Tensor,
    t: usize,
    tokens: &PromptTokens,
    null: &Tensor,
    s: f64,
    kv: (KvMode, KvMode),
) -> Result<(Tensor, crate::denoiser::AttentionRecord, crate::denoiser::AttentionRecord)> {
    let (cond, rc) = weights.predict_noise(z, t, tokens, None, kv.0)?;
    let (uncond, ru) = weights.predict_noise(z, t, &PromptTokens::null(), Some(null), kv.1)?;
    Ok((cfg_combine(&cond, &uncond, s)?, rc, ru))
}

/// Runs both branches from `z_T^inv`. Without targets (or with `v = 0` and
/// `N = 0`) branch E reproduces branch R exactly.
pub fn sample_edit(
    bundle: &InversionBundle,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    sampler: &SamplerConfig,
) -> Result<EditResult> {
    cfg.validate()?;
    if bundle.schedule != sched.params() {
        return Err(Error::invalid("bundle was produced under a different schedule"));
    }
    if bundle.guidance_scale != cfg.s {
        log::warn!(
            "bundle nulls were optimised at s={} but sampling uses s={}",
            bundle.guidance_scale,
            cfg.s
        );
    }
    let steps = bundle.steps();
    let timesteps = sched.sampling_timesteps(steps)?;
    let stride = sched.stride(steps)?;
    let targets = if cfg.targets.is_empty() {
        if cfg.v != 0.0 || cfg.n_repeats > 0 {
            return Err(Error::invalid("guidance needs at least one target phrase"));
        }
        Vec::new()
    } else {
        cfg.resolve_targets(&bundle.tokens)?
    };
    let probe_t = probe_timestep(cfg, &timesteps, sched.steps());
    let tokens = bundle.tokens;

    let mut z_r = bundle.z_top().detach();
    let mut z_e = z_r.clone();
    let mut logs = Vec::with_capacity(steps);
    let mut probe = None;
    for i in (1..=steps).rev() {
        let (t, t_prev) = (i * stride, (i - 1) * stride);
        let null = &bundle.nulls[i - 1];
        if t == probe_t {
            probe = Some(Probe {
                t,
                edit: z_e.clone(),
                recon: z_r.clone(),
            });
        }

        let (eps_r, rec_c, rec_u) = plain_cfg(weights, &z_r, t, &tokens, null, cfg.s, (KvMode::Record, KvMode::Record))?;
        let kv_c = rec_c.kv.as_ref().expect("recorded K/V");
        let kv_u = rec_u.kv.as_ref().expect("recorded K/V");
        let kv = if sampler.inject_self_attention {
            (KvMode::Inject(kv_c), KvMode::Inject(kv_u))
        } else {
            (KvMode::None, KvMode::None)
        };

        let eval = |z: &Tensor| -> Result<GuidedNoise> {
            if targets.is_empty() {
                let (e, rc, ru) = plain_cfg(weights, z, t, &tokens, null, cfg.s, kv)?;
                return Ok(GuidedNoise {
                    eps_guid: e.clone(),
                    eps_cfg: e,
                    eps_cond: Tensor::zeros(z.shape()),
                    energy: 0.0,
                    perturbation_norm: 0.0,
                    active: false,
                    cond_record: rc,
                    uncond_record: ru,
                });
            }
            let inp = StepInputs {
                z,
                t,
                t_prev,
                tokens: &tokens,
                null,
                kv_cond: kv.0,
                kv_uncond: kv.1,
                anchor: Some(&bundle.trajectory[i - 1]),
            };
            guided_noise(weights, sched, &inp, cfg, &targets)
        };

        let mut g = eval(&z_e)?;
        let mut energies = vec![g.energy];
        let mut repeats = 0;
        if cfg.optimization_active(t, sched.steps()) {
            for _ in 0..cfg.n_repeats {
                z_e = classifier_optimize_step(&z_e, &g.eps_cfg, &g.eps_guid, t, sched)?;
                g = eval(&z_e)?;
                energies.push(g.energy);
                repeats += 1;
            }
        }
        z_e = ddim_split_step(&z_e, &g.eps_cfg, &g.eps_guid, t, t_prev, sched)?;
        z_r = ddim_split_step(&z_r, &eps_r, &eps_r, t, t_prev, sched)?;
        z_e.check_finite("edit branch latent")?;
        logs.push(StepLog {
            t,
            attention_active: g.active,
            energies,
            perturbation_norm: g.perturbation_norm,
            repeats,
        });
    }
    Ok(EditResult {
        edited: z_e,
        reconstructed: z_r,
        logs,
        config: cfg.clone(),
        probe: probe.expect("probe timestep is a sampling timestep"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tokens::{GREEN, RED, SQUARE, DISK};
    use crate::denoiser::IMAGE_SHAPE;
    use crate::diffcore::{Rng, Stream};
    use crate::inversion::{invert, InversionConfig};
    use crate::schedule::ScheduleParams;

    #[test]
    fn optimize_step_identity_and_linearity() {
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let mut rng = Rng::new(3, Stream::SampleNoise);
        let z = rng.gaussian_tensor(&[8]);
        let e = rng.gaussian_tensor(&[8]);
        let d = rng.gaussian_tensor(&[8]);
        let same = classifier_optimize_step(&z, &e, &e, 120, &sched).unwrap();
        assert!(same.max_abs_diff(&z).unwrap() < 1e-6);
        let moved = classifier_optimize_step(&z, &e, &e.add(&d).unwrap(), 120, &sched).unwrap();
        let k = (1.0 - sched.alpha_bar(120)).sqrt();
        for i in 0..8 {
            let want = k * d.data()[i] as f64;
            assert!(((moved.data()[i] - z.data()[i]) as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn probe_prefers_larger_timestep_on_ties() {
        let cfg = GuidanceConfig::default();
        let ts: Vec<usize> = (1..=50).rev().map(|i| 4 * i).collect();
        assert_eq!(probe_timestep(&cfg, &ts, 200), 92);
        let ts20: Vec<usize> = (1..=20).rev().map(|i| 10 * i).collect();
        assert_eq!(probe_timestep(&cfg, &ts20, 200), 90);
    }

    #[test]
    fn null_edit_matches_reconstruction_for_random_weights() {
        let w = DenoiserWeights::init(21);
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let z0 = Rng::new(1, Stream::DataGen).uniform_tensor(&IMAGE_SHAPE, -1.0, 1.0);
        let tok = PromptTokens::from_words(&[RED, SQUARE, GREEN, DISK]).unwrap();
        let icfg = InversionConfig {
            steps: 10,
            inner_steps: 2,
            ..InversionConfig::default()
        };
        let b = invert(&z0, &tok, &w, &sched, &icfg, serde_json::Value::Null).unwrap();
        let cfg = GuidanceConfig {
            v: 0.0,
            n_repeats: 0,
            targets: vec!["red square".into()],
            ..GuidanceConfig::default()
        };
        let r = sample_edit(&b, &w, &sched, &cfg, &SamplerConfig::default()).unwrap();
        assert!(r.edited.bit_eq(&r.reconstructed));
        assert_eq!(r.logs.len(), 10);

        let guided = GuidanceConfig {
            targets: vec!["red square".into()],
            ..GuidanceConfig::default()
        };
        let a = sample_edit(&b, &w, &sched, &guided, &SamplerConfig::default()).unwrap();
        let again = sample_edit(&b, &w, &sched, &guided, &SamplerConfig::default()).unwrap();
        assert!(a.edited.bit_eq(&again.edited));
        assert!(!a.edited.bit_eq(&a.reconstructed));
        assert!(a.logs.iter().any(|l| l.repeats == 1));
    }
}
