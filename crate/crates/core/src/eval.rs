//! Reconstruction, erasure and background-preservation metrics against
//! synthetic ground truth.

use serde::{Deserialize, Serialize};

use crate::denoiser::{aggregate_cross_attention, DenoiserWeights, KvMode, IMAGE};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::sampler::EditResult;
use crate::training::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseReport {
    /// PSNR of the reconstruction branch against the input image (dB).
    pub psnr_reconstruction: f64,
    /// `1 − resp_edit / resp_recon` of the target words' attention inside the target mask.
    pub attn_drop: f64,
    /// MSE outside every object mask, edit vs reconstruction.
    pub bg_mse: f64,
    /// MSE inside the target mask, edit vs the scene rendered without the target.
    pub obj_mse_vs_clean: f64,
    /// MSE of the reconstruction against the input image (whole image).
    pub recon_mse: f64,
    pub resp_edit: f64,
    pub resp_recon: f64,
    pub probe_t: usize,
}

fn masked_mse(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let hw = IMAGE * IMAGE;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_none_or(|m| m[i % hw]) {
            let d = x as f64 - y as f64;
            sum += d * d;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    masked_mse(a, b, None)
}

/// `10·log10(4 / MSE)` for images in `[−1, 1]`; identical images give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / m).log10() })
}

/// Mean over `words` of the normalised attention response inside `mask`,
/// from a conditional pass at timestep `t`.
pub fn attention_response(
    weights: &DenoiserWeights,
    z: &Tensor,
    t: usize,
    scene: &SceneSpec,
    words: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let (_, rec) = weights.predict_noise(z, t, &scene.tokens, None, KvMode::None)?;
    let inside = mask.iter().filter(|&&m| m).count();
    if inside == 0 {
        return Err(Error::invalid("empty target mask"));
    }
    let mut total = 0.0;
    for &k in words {
        let a = aggregate_cross_attention(&rec, k)?;
        let s: f64 = a.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum();
        total += s / inside as f64;
    }
    Ok(total / words.len() as f64)
}

/// All report fields for erasing object `target` of `scene`.
pub fn erase_report(
    result: &EditResult,
    scene: &SceneSpec,
    target: usize,
    weights: &DenoiserWeights,
) -> Result<EraseReport> {
    if target >= scene.objects.len() {
        return Err(Error::invalid(format!("target object {target} out of range")));
    }
    let original = scene.render();
    let masks = scene.masks();
    let target_mask: Vec<bool> = masks[target].data().iter().map(|&m| m > 0.5).collect();
    let background: Vec<bool> = (0..IMAGE * IMAGE)
        .map(|i| masks.iter().all(|m| m.data()[i] == 0.0))
        .collect();
    let words = scene.object_positions(target)?;
    let probe = &result.probe;
    let resp_recon = attention_response(weights, &probe.recon, probe.t, scene, &words, &target_mask)?;
    let resp_edit = attention_response(weights, &probe.edit, probe.t, scene, &words, &target_mask)?;
    let attn_drop = if resp_recon > 0.0 {
        1.0 - resp_edit / resp_recon
    } else if resp_edit == 0.0 {
        0.0
    } else {
        f64::NEG_INFINITY
    };
    let clean = scene.render_without(target)?;
    Ok(EraseReport {
        psnr_reconstruction: psnr(&result.reconstructed, &original)?,
        attn_drop,
        bg_mse: masked_mse(&result.edited, &result.reconstructed, Some(&background))?,
        obj_mse_vs_clean: masked_mse(&result.edited, &clean, Some(&target_mask))?,
        recon_mse: mse(&result.reconstructed, &original)?,
        resp_edit,
        resp_recon,
        probe_t: probe.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Rng, Stream};

    #[test]
    fn psnr_cases() {
        let a = Tensor::full(&[3, 4, 4], 0.1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|x| x + 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_matches_direct_sum() {
        let mut rng = Rng::new(7, Stream::DataGen);
        let a: Tensor = rng.uniform_tensor(&[3, 16, 16], -1.0, 1.0);
        let b: Tensor = rng.uniform_tensor(&[3, 16, 16], -1.0, 1.0);
        let mut s = 0.0f64;
        for i in 0..a.numel() {
            s += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
        }
        let want = 10.0 * (4.0 / (s / a.numel() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
    }
}
