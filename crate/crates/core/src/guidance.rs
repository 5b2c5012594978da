//! Attention-suppression energy and the guided noise estimate.
//!
//! For a target object described by words `{k}`, the energy is
//! `Σ_k ‖A_k − c_k·A_k‖₁` with `c_k = min A_k + λ(max A_k − min A_k)` held
//! constant. Its gradient w.r.t. the latent, reweighted by the (detached)
//! product map `Π_k A_k`, perturbs the classifier-free noise estimate.

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    aggregate_on_tape, tokens::PAD, AttentionRecord, DenoiserWeights, ForwardVars, KvMode, PromptTokens, CROSS_SIDES,
    IMAGE,
};
use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inversion::cfg_combine;
use crate::schedule::NoiseSchedule;

/// How the L1 target for `A` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// `c·A` with `c = min + λ(max − min)`.
    Equation,
    /// Constant map at the value exceeded by the top 20% of `A`.
    Quantile,
}

/// What a user mask does when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// The mask replaces the attention reweighting map.
    Replace,
    /// Adds a background-anchoring term on `(ẑ_{t−1} − z^inv_{t−1})⊙(1−M)`.
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Classifier-free scale.
    pub s: f64,
    /// Guidance strength.
    pub v: f64,
    pub lambda: f64,
    pub t_attn_lo: f64,
    pub t_attn_hi: f64,
    pub t_opt_lo: f64,
    pub t_opt_hi: f64,
    /// Classifier-optimisation repeats per eligible step.
    #[serde(rename = "N")]
    pub n_repeats: usize,
    pub target_mode: TargetMode,
    /// Multiply the perturbation by the attention product map.
    pub reweight: bool,
    pub mask_mode: MaskMode,
    /// Use the ground-truth mask of the target object as `M` (CLI/suites).
    pub use_scene_mask: bool,
    /// Target objects, each a phrase of prompt words (e.g. `"red square"`).
    pub targets: Vec<String>,
    #[serde(skip)]
    pub mask: Option<Tensor>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s: 2.0,
            v: 1.0,
            lambda: 0.8,
            t_attn_lo: 0.1,
            t_attn_hi: 0.8,
            t_opt_lo: 0.5,
            t_opt_hi: 0.8,
            n_repeats: 1,
            target_mode: TargetMode::Equation,
            reweight: true,
            mask_mode: MaskMode::Replace,
            use_scene_mask: false,
            targets: Vec::new(),
            mask: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("guidance.{m}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        for (name, lo, hi) in [
            ("t_attn", self.t_attn_lo, self.t_attn_hi),
            ("t_opt", self.t_opt_lo, self.t_opt_hi),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} window [{lo}, {hi}] is not a sub-interval of [0, 1]"));
            }
        }
        if !self.s.is_finite() || self.s < 0.0 || !self.v.is_finite() {
            return bad("s must be finite and >= 0, v finite".into());
        }
        if let Some(m) = &self.mask {
            if m.shape() != [IMAGE, IMAGE] || m.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                return bad("mask must be a binary 16x16 map".into());
            }
        }
        Ok(())
    }

    /// Strictly inside the attention-guidance window.
    pub fn attention_active(&self, t: usize, steps: usize) -> bool {
        let (x, n) = (t as f64, steps as f64);
        self.t_attn_lo * n < x && x < self.t_attn_hi * n
    }

    /// Strictly inside the classifier-optimisation window.
    pub fn optimization_active(&self, t: usize, steps: usize) -> bool {
        let (x, n) = (t as f64, steps as f64);
        self.t_opt_lo * n < x && x < self.t_opt_hi * n
    }

    /// Prompt positions of every target object.
    pub fn resolve_targets(&self, tokens: &PromptTokens) -> Result<Vec<Vec<usize>>> {
        if self.targets.is_empty() {
            return Err(Error::invalid("no target words configured"));
        }
        self.targets.iter().map(|p| tokens.find_phrase(p)).collect()
    }
}

/// The scalar `c = min + λ(max − min)` of a map.
pub fn erase_target<F: Float>(a: &Tensor<F>, lambda: f64) -> f64 {
    let (lo, hi) = (a.min().f64(), a.max().f64());
    lo + lambda * (hi - lo)
}

/// The value exceeded by the top 20% of entries (nearest-rank).
pub fn top20_quantile<F: Float>(a: &Tensor<F>) -> f64 {
    let mut v: Vec<f64> = a.data().iter().map(|x| x.f64()).collect();
    v.sort_by(f64::total_cmp);
    let rank = ((0.8 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Energy on a tape. `c` (or the quantile constant) is computed from the
/// current value of `a` and enters as a constant.
pub fn erase_energy_on_tape<F: Float>(tape: &mut Tape<F>, a: Var, lambda: f64, mode: TargetMode) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    match mode {
        TargetMode::Equation => {
            let c = erase_target(tape.value(a), lambda);
            erase_energy_with_target(tape, a, c)
        }
        TargetMode::Quantile => {
            let q = top20_quantile(tape.value(a));
            let target = tape.constant(Tensor::full(tape.shape(a), F::of(q)));
            let r = tape.sub(a, target)?;
            tape.l1(r)
        }
    }
}

/// `‖A − c·A‖₁` for a fixed scalar `c`.
pub fn erase_energy_with_target<F: Float>(tape: &mut Tape<F>, a: Var, c: f64) -> Result<Var> {
    let ca = tape.scale(a, F::of(c))?;
    let r = tape.sub(a, ca)?;
    tape.l1(r)
}

/// `g(A, λ) = ‖A − [min A + λ(max A − min A)]·A‖₁`.
pub fn erase_energy(a: &Tensor, lambda: f64) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(a.detach());
    let g = erase_energy_on_tape(&mut tape, av, lambda, TargetMode::Equation)?;
    Ok(tape.value(g).item() as f64)
}

/// `Π_k A_k`, renormalised to max 1 (all zeros if the product vanishes).
pub fn product_map<F: Float>(maps: &[Tensor<F>]) -> Result<Tensor<F>> {
    let (first, rest) = maps.split_first().ok_or_else(|| Error::invalid("empty word set"))?;
    let mut w = first.detach();
    for m in rest {
        w = w.mul(m)?;
    }
    let hi = w.max();
    if hi > F::zero() {
        Ok(w.map(|x| x / hi))
    } else {
        Ok(Tensor::zeros(w.shape()))
    }
}

/// Per-step inputs to [`guided_noise`].
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub z: &'a Tensor,
    pub t: usize,
    pub t_prev: usize,
    pub tokens: &'a PromptTokens,
    pub null: &'a Tensor,
    pub kv_cond: KvMode<'a>,
    pub kv_uncond: KvMode<'a>,
    /// `z^inv_{t_prev}` for the anchoring mask term.
    pub anchor: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct GuidedNoise {
    pub eps_guid: Tensor,
    pub eps_cfg: Tensor,
    pub eps_cond: Tensor,
    /// `Σ_objects Σ_words g` (0 outside the window).
    pub energy: f64,
    /// L2 norm of `eps_guid − eps_cfg`.
    pub perturbation_norm: f64,
    pub active: bool,
    pub cond_record: AttentionRecord,
    pub uncond_record: AttentionRecord,
}

fn broadcast_channels(w: &Tensor) -> Tensor {
    let hw = w.numel();
    Tensor::from_fn(&[3, IMAGE, IMAGE], |i| w.data()[i % hw])
}

fn cross_vars(out: &ForwardVars) -> Vec<(Var, usize)> {
    out.cross.iter().copied().zip(CROSS_SIDES).collect()
}

/// Classifier-free estimate and its attention-guided perturbation.
///
/// `eps_cfg = (1+s)·ε(z; t, y) − s·ε(z; t, ∅_t)`. Inside the attention window,
/// each target object contributes `W ⊙ ∇_z Σ_k g(A_k)` with `W` the detached
/// product map (or `M`, or all ones without reweighting); the anchoring mask
/// mode adds `∇_z ‖(ẑ_{t_prev} − z^inv_{t_prev})⊙(1−M)‖₁`. The sum `d` enters
/// as `eps_guid = eps_cfg − v·d`, the sign under which the split-noise DDIM
/// update and the same-timestep latent update descend the energy.
pub fn guided_noise(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    inp: &StepInputs,
    cfg: &GuidanceConfig,
    targets: &[Vec<usize>],
) -> Result<GuidedNoise> {
    if targets.is_empty() || targets.iter().any(Vec::is_empty) {
        return Err(Error::invalid("empty target word set"));
    }
    if let Some(&k) = targets.iter().flatten().find(|&&k| k >= inp.tokens.ids.len() || inp.tokens.ids[k] == PAD) {
        return Err(Error::invalid(format!("target position {k} is not a prompt word")));
    }
    let active = cfg.attention_active(inp.t, sched.steps());
    let anchor = match (active, cfg.mask_mode, &cfg.mask) {
        (true, MaskMode::Anchor, Some(m)) => {
            let a = inp
                .anchor
                .ok_or_else(|| Error::invalid("anchor mask mode needs the inversion latent"))?;
            Some((a, m))
        }
        _ => None,
    };
    let want_grad = active && cfg.v != 0.0;

    let mut tape = Tape::<f32>::new();
    let p = weights.bind(&mut tape, false);
    let zv = if want_grad {
        tape.input(inp.z.detach())
    } else {
        tape.constant(inp.z.detach())
    };
    let cond = weights.forward(&mut tape, &p, zv, inp.t, inp.tokens, None, inp.kv_cond)?;
    let null_tokens = PromptTokens::null();
    // The unconditional pass only needs the latent gradient for anchoring.
    let zu = if anchor.is_some() && want_grad { zv } else { tape.constant(inp.z.detach()) };
    let nv = tape.constant(inp.null.detach());
    let uncond = weights.forward(&mut tape, &p, zu, inp.t, &null_tokens, Some(nv), inp.kv_uncond)?;
    let eps_cond = tape.value(cond.eps).detach();
    let eps_uncond = tape.value(uncond.eps).detach();
    let eps_cfg = cfg_combine(&eps_cond, &eps_uncond, cfg.s)?;
    let cond_record = cond.record(&tape, *inp.tokens);
    let uncond_record = uncond.record(&tape, null_tokens);

    let mut energy = 0.0;
    let mut perturb: Option<Tensor> = None;
    let mut add = |d: Tensor| -> Result<()> {
        perturb = Some(match perturb.take() {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
        Ok(())
    };
    if active {
        let maps = cross_vars(&cond);
        for words in targets {
            let mut total: Option<Var> = None;
            let mut attn = Vec::with_capacity(words.len());
            for &k in words {
                let a = aggregate_on_tape(&mut tape, &maps, k)?;
                attn.push(tape.value(a).detach());
                let g = erase_energy_on_tape(&mut tape, a, cfg.lambda, cfg.target_mode)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, g)?,
                    None => g,
                });
            }
            let total = total.expect("non-empty word set");
            energy += tape.value(total).item() as f64;
            if want_grad {
                tape.backward(total)?;
                let grad = tape.grad(zv).unwrap_or_else(|| Tensor::zeros(inp.z.shape()));
                let w = match (&cfg.mask, cfg.mask_mode, cfg.reweight) {
                    (Some(m), MaskMode::Replace, _) => m.detach(),
                    (_, _, true) => product_map(&attn)?,
                    (_, _, false) => Tensor::full(&[IMAGE, IMAGE], 1.0),
                };
                add(grad.mul(&broadcast_channels(&w))?)?;
            }
        }
        if let (Some((z_inv, m)), true) = (anchor, want_grad) {
            let (at, ap) = (sched.alpha_bar(inp.t), sched.alpha_bar(inp.t_prev));
            let a = (ap / at).sqrt();
            let b = (1.0 - ap).sqrt() - (ap * (1.0 - at) / at).sqrt();
            let c_part = tape.scale(cond.eps, (1.0 + cfg.s) as f32)?;
            let u_part = tape.scale(uncond.eps, -(cfg.s as f32))?;
            let e = tape.add(c_part, u_part)?;
            let e = tape.scale(e, b as f32)?;
            let zs = tape.scale(zv, a as f32)?;
            let zhat = tape.add(zs, e)?;
            let target = tape.constant(z_inv.detach());
            let diff = tape.sub(zhat, target)?;
            let bg = tape.constant(broadcast_channels(&m.map(|x| 1.0 - x)));
            let masked = tape.mul(diff, bg)?;
            let l = tape.l1(masked)?;
            tape.backward(l)?;
            add(tape.grad(zv).unwrap_or_else(|| Tensor::zeros(inp.z.shape())))?;
        }
    }

    let eps_guid = match perturb {
        Some(d) => {
            let v = cfg.v as f32;
            eps_cfg.zip_map(&d, "guided_noise", |e, g| e - v * g)?
        }
        None => eps_cfg.clone(),
    };
    let perturbation_norm = eps_guid.sub(&eps_cfg)?.norm_l2();
    Ok(GuidedNoise {
        eps_guid,
        eps_cfg,
        eps_cond,
        energy,
        perturbation_norm,
        active,
        cond_record,
        uncond_record,
    })
}
