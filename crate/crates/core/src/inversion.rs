//! DDIM inversion and per-step null-embedding optimisation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserWeights, KvMode, PromptTokens, EMBED_DIM, IMAGE_SHAPE};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::schedule::{ddim_invert_step, ddim_step, NoiseSchedule, ScheduleParams};
use crate::diffcore::{Rng, Stream};
use crate::store;

pub const BUNDLE_KIND: &str = "inversion_bundle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// DDIM sampling steps `S` (must divide T).
    pub steps: usize,
    pub inner_steps: usize,
    pub lr: f64,
    pub stop_tol: f64,
    /// Classifier-free scale inside the reconstruction step.
    pub guidance_scale: f64,
    /// A step stops early once its loss exceeds this multiple of its initial loss.
    pub abort_factor: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 50,
            inner_steps: 100,
            lr: 1e-2,
            stop_tol: 1e-5,
            guidance_scale: 2.0,
            abort_factor: 10.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("inversion.{m}")));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.stop_tol >= 0.0) || !(self.abort_factor >= 1.0) {
            return bad("stop_tol must be >= 0 and abort_factor >= 1");
        }
        if !(self.guidance_scale >= 0.0) {
            return bad("guidance_scale must be >= 0");
        }
        Ok(())
    }
}

/// Per-step optimisation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullStepLog {
    pub t: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionBundle {
    /// `trajectory[i]` is the latent at timestep `i·Δ`, so `trajectory[0] = z_0`
    /// and the last entry is `z_T`.
    pub trajectory: Vec<Tensor>,
    /// `nulls[i]` is used for the step from `(i+1)·Δ` down to `i·Δ`.
    pub nulls: Vec<Tensor>,
    pub tokens: PromptTokens,
    pub log: Vec<NullStepLog>,
    pub guidance_scale: f64,
    pub schedule: ScheduleParams,
    /// Free-form provenance (scene seed, etc.).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    tokens: PromptTokens,
    log: Vec<NullStepLog>,
    guidance_scale: f64,
    steps: usize,
    extra: serde_json::Value,
}

impl InversionBundle {
    pub fn steps(&self) -> usize {
        self.nulls.len()
    }

    pub fn z_top(&self) -> &Tensor {
        self.trajectory.last().expect("trajectory holds z_0")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = BundleMeta {
            tokens: self.tokens,
            log: self.log.clone(),
            guidance_scale: self.guidance_scale,
            steps: self.steps(),
            extra: self.meta.clone(),
        };
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (i, z) in self.trajectory.iter().enumerate() {
            named.push((format!("trajectory.{i}"), z));
        }
        for (i, n) in self.nulls.iter().enumerate() {
            named.push((format!("null.{i}"), n));
        }
        store::encode(BUNDLE_KIND, self.schedule, serde_json::to_value(meta)?, &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let stored = store::decode(bytes, BUNDLE_KIND)?;
        let meta: BundleMeta = serde_json::from_value(stored.header.meta.clone())?;
        let trajectory = (0..=meta.steps)
            .map(|i| stored.get(&format!("trajectory.{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let nulls = (0..meta.steps)
            .map(|i| stored.get(&format!("null.{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        if stored.tensors.len() != 2 * meta.steps + 1 {
            return Err(Error::Format("unexpected tensors in bundle".into()));
        }
        Ok(InversionBundle {
            trajectory,
            nulls,
            tokens: meta.tokens,
            log: meta.log,
            guidance_scale: meta.guidance_scale,
            schedule: stored.header.schedule,
            meta: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Runs the DDIM recurrence upward from `z0`, re-predicting
/// `ε_θ(z; t_next, y)` at every step. Returns `steps + 1` latents.
pub fn ddim_inversion(
    z0: &Tensor,
    tokens: &PromptTokens,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<Tensor>> {
    z0.check_finite("ddim_inversion input")?;
    let mut traj = vec![z0.detach()];
    if steps == 0 {
        return Ok(traj);
    }
    let stride = sched.stride(steps)?;
    for i in 0..steps {
        let (t, t_next) = (i * stride, (i + 1) * stride);
        let z = traj.last().expect("non-empty");
        let (eps, _) = weights.predict_noise(z, t_next, tokens, None, KvMode::None)?;
        let next = ddim_invert_step(z, &eps, t, t_next, sched)?;
        next.check_finite("ddim_inversion latent")?;
        traj.push(next);
    }
    Ok(traj)
}

/// `(1+s)·cond − s·uncond`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, s: f64) -> Result<Tensor> {
    let (a, b) = ((1.0 + s) as f32, s as f32);
    cond.zip_map(uncond, "cfg_combine", |c, u| a * c - b * u)
}

struct Probe {
    loss: f64,
    grad: Tensor,
    eps_cfg: Tensor,
}

/// Reconstruction loss `mean((f_θ(z_t, t, y; ∅) − target)²)` and its gradient
/// with respect to the null row.
#[allow(clippy::too_many_arguments)]
fn probe_null(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    z: &Tensor,
    cond_eps: &Tensor,
    null: &Tensor,
    t: usize,
    t_prev: usize,
    s: f64,
    target: &Tensor,
) -> Result<Probe> {
    let mut tape = Tape::<f32>::new();
    let p = weights.bind(&mut tape, false);
    let zv = tape.constant(z.detach());
    let nv = tape.input(null.detach());
    let out = weights.forward(&mut tape, &p, zv, t, &PromptTokens::null(), Some(nv), KvMode::None)?;
    let c = tape.constant(cond_eps.scale((1.0 + s) as f32));
    let u = tape.scale(out.eps, -(s as f32))?;
    let eps_cfg = tape.add(c, u)?;
    // DDIM at eta = 0 is affine in eps: prev = a·z + b·eps.
    let (at, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let a = (ap / at).sqrt();
    let b = (1.0 - ap).sqrt() - (ap * (1.0 - at) / at).sqrt();
    let base = tape.constant(z.scale(a as f32).sub(target)?);
    let moved = tape.scale(eps_cfg, b as f32)?;
    let resid = tape.add(base, moved)?;
    let sq = tape.mul(resid, resid)?;
    let loss = tape.mean(sq)?;
    tape.backward(loss)?;
    Ok(Probe {
        loss: tape.value(loss).item() as f64,
        grad: tape.grad(nv).unwrap_or_else(|| Tensor::zeros(&[EMBED_DIM])),
        eps_cfg: tape.value(eps_cfg).detach(),
    })
}

/// Optimises one null row per sampling step so that classifier-free-guided
/// DDIM from `z_T` retraces `trajectory`. Steps run from high `t` to low;
/// each starts from the previous optimum (the first from the trained NULL
/// row) and the running latent follows the optimised reconstruction.
pub fn null_text_optimize(
    trajectory: &[Tensor],
    tokens: &PromptTokens,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    cfg: &InversionConfig,
) -> Result<(Vec<Tensor>, Vec<NullStepLog>)> {
    cfg.validate()?;
    let steps = trajectory.len().checked_sub(1).ok_or_else(|| Error::invalid("empty trajectory"))?;
    if steps == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let stride = sched.stride(steps)?;
    let s = cfg.guidance_scale;
    let mut nulls = vec![Tensor::zeros(&[EMBED_DIM]); steps];
    let mut logs = Vec::with_capacity(steps);
    let mut null = weights.null_embedding();
    let mut z = trajectory[steps].detach();
    let mut unused = Rng::new(0, Stream::SampleNoise);
    for i in (1..=steps).rev() {
        let (t, t_prev) = (i * stride, (i - 1) * stride);
        let target = &trajectory[i - 1];
        let (cond, _) = weights.predict_noise(&z, t, tokens, None, KvMode::None)?;
        let mut adam = crate::training::Adam::new(&[EMBED_DIM], cfg.lr, 0.9, 0.999, 1e-8);
        let mut best: Option<(f64, Tensor, Tensor)> = None;
        let mut initial = f64::NAN;
        let mut iterations = 0;
        let mut aborted = false;
        for j in 0..=cfg.inner_steps {
            let pr = probe_null(weights, sched, &z, &cond, &null, t, t_prev, s, target)?;
            if j == 0 {
                initial = pr.loss;
            }
            if best.as_ref().is_none_or(|b| pr.loss < b.0) {
                best = Some((pr.loss, null.detach(), pr.eps_cfg.detach()));
            }
            if pr.loss > cfg.abort_factor * initial {
                aborted = true;
                break;
            }
            if pr.loss < cfg.stop_tol || j == cfg.inner_steps {
                break;
            }
            let g: Vec<f64> = pr.grad.data().iter().map(|&v| v as f64).collect();
            adam.update(&mut [null.data_mut()], &[g])?;
            null.check_finite("null embedding")?;
            iterations += 1;
        }
        let (final_loss, best_null, eps_cfg) = best.expect("at least one probe");
        z = ddim_step(&z, &eps_cfg, t, t_prev, sched, 0.0, &mut unused)?;
        z.check_finite("null-text running latent")?;
        null = best_null;
        nulls[i - 1] = null.detach();
        logs.push(NullStepLog {
            t,
            initial_loss: initial,
            final_loss,
            iterations,
            aborted,
        });
    }
    Ok((nulls, logs))
}

/// Full inversion: DDIM trajectory plus optimised nulls.
pub fn invert(
    z0: &Tensor,
    tokens: &PromptTokens,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    cfg: &InversionConfig,
    meta: serde_json::Value,
) -> Result<InversionBundle> {
    if z0.shape() != IMAGE_SHAPE {
        return Err(Error::shape("invert", format!("image {:?}", z0.shape())));
    }
    let trajectory = ddim_inversion(z0, tokens, weights, sched, cfg.steps)?;
    let (nulls, log) = null_text_optimize(&trajectory, tokens, weights, sched, cfg)?;
    Ok(InversionBundle {
        trajectory,
        nulls,
        tokens: *tokens,
        log,
        guidance_scale: cfg.guidance_scale,
        schedule: sched.params(),
        meta,
    })
}

/// Plain DDIM sampling from `z_T` with classifier-free scale `s` and either
/// optimised nulls or the trained NULL row; `s = 0` gives the conditional-only
/// baseline.
pub fn ddim_reconstruct(
    z_top: &Tensor,
    tokens: &PromptTokens,
    nulls: Option<&[Tensor]>,
    s: f64,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor> {
    let stride = sched.stride(steps)?;
    if let Some(n) = nulls {
        if n.len() != steps {
            return Err(Error::invalid(format!("{} nulls for {steps} steps", n.len())));
        }
    }
    let mut unused = Rng::new(0, Stream::SampleNoise);
    let mut z = z_top.detach();
    for i in (1..=steps).rev() {
        let (t, t_prev) = (i * stride, (i - 1) * stride);
        let (cond, _) = weights.predict_noise(&z, t, tokens, None, KvMode::None)?;
        let eps = if s == 0.0 {
            cond
        } else {
            let null = nulls.map(|n| &n[i - 1]);
            let (uncond, _) = weights.predict_noise(&z, t, &PromptTokens::null(), null, KvMode::None)?;
            cfg_combine(&cond, &uncond, s)?
        };
        z = ddim_step(&z, &eps, t, t_prev, sched, 0.0, &mut unused)?;
    }
    Ok(z)
}
