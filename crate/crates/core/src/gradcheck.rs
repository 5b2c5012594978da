//! Finite-difference suites over every tape operation and the erasure
//! energy gradient, run by the `gradcheck` command and the acceptance tests.
//!
//! Each trial draws small random operands, projects the op's output onto a
//! random tensor to get a scalar with generic gradients, and compares the
//! tape gradient with central differences in f64.

use serde::Serialize;

use crate::denoiser::{aggregate_with_range, DenoiserWeights, KvMode, PromptTokens, CROSS_SIDES, IMAGE_SHAPE};
use crate::diffcore::{grad_check, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::guidance::{erase_energy_with_target, erase_target};
use crate::training::gen_two_object_scene;

/// Relative-error bound for elementwise and linear operations.
pub const LINEAR_TOL: f64 = 1e-4;
/// Relative-error bound for softmax/attention compositions.
pub const ATTENTION_TOL: f64 = 1e-2;
/// Central-difference step.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// One random draw: the point to differentiate at and the op applied to it.
struct Trial {
    x: Tensor<f64>,
    op: OpFn,
}

struct Case {
    name: &'static str,
    tol: f64,
    draw: fn(&mut Rng) -> Trial,
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn gauss(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.gaussian_tensor(shape)
}

fn trial(x: Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Trial {
    Trial { x, op: Box::new(op) }
}

/// `x ⊕ c` for a binary op with the differentiated operand on either side.
fn binary(
    x: Tensor<f64>,
    c: Tensor<f64>,
    lhs: bool,
    f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Trial {
    trial(x, move |t, v| {
        let k = t.constant(c.clone());
        if lhs {
            f(t, v, k)
        } else {
            f(t, k, v)
        }
    })
}

fn matrix(rng: &mut Rng) -> [usize; 2] {
    [dim(rng, 1, 5), dim(rng, 1, 5)]
}

fn chw(rng: &mut Rng) -> [usize; 3] {
    [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4)]
}

fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let g = gauss(rng, shape);
    g.map(|v| v.signum() * (0.2 + v.abs()))
}

fn conv_operands(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, usize) {
    let (cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 2));
    let side = dim(rng, 3, 4);
    let stride = 1 + rng.below(2);
    (
        gauss(rng, &[cin, side, side]),
        gauss(rng, &[cout, cin, 3, 3]),
        gauss(rng, &[cout]),
        stride,
    )
}

fn gn_operands(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, usize) {
    let groups = dim(rng, 1, 2);
    let c = groups * dim(rng, 1, 2);
    let side = dim(rng, 2, 3);
    (
        gauss(rng, &[c, side, side]),
        gauss(rng, &[c]).map(|v| 1.0 + 0.5 * v),
        gauss(rng, &[c]),
        groups,
    )
}

fn keep_mask(rng: &mut Rng, n: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n).map(|_| rng.coin(0.7)).collect();
    let forced = rng.below(n);
    keep[forced] = true;
    keep
}

/// `softmax(q·kᵀ/√d)·v` with one of the three operands differentiated.
fn attention_trial(rng: &mut Rng, which: usize) -> Trial {
    let (n, m, d) = (dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 3));
    let ops = [gauss(rng, &[n, d]), gauss(rng, &[m, d]), gauss(rng, &[m, d])];
    let x = ops[which].clone();
    trial(x, move |t, v| {
        let vars: Vec<Var> = (0..3)
            .map(|i| if i == which { v } else { t.constant(ops[i].clone()) })
            .collect();
        let kt = t.transpose(vars[1])?;
        let logits = t.matmul(vars[0], kt)?;
        let logits = t.scale(logits, 1.0 / (d as f64).sqrt())?;
        let a = t.softmax(logits, 1)?;
        t.matmul(a, vars[2])
    })
}

fn cases() -> Vec<Case> {
    fn c(name: &'static str, tol: f64, draw: fn(&mut Rng) -> Trial) -> Case {
        Case { name, tol, draw }
    }
    vec![
        c("add.lhs", LINEAR_TOL, |r| {
            let s = matrix(r);
            binary(gauss(r, &s), gauss(r, &s), true, Tape::add)
        }),
        c("add.rhs", LINEAR_TOL, |r| {
            let s = matrix(r);
            binary(gauss(r, &s), gauss(r, &s), false, Tape::add)
        }),
        c("sub.lhs", LINEAR_TOL, |r| {
            let s = matrix(r);
            binary(gauss(r, &s), gauss(r, &s), true, Tape::sub)
        }),
        c("sub.rhs", LINEAR_TOL, |r| {
            let s = matrix(r);
            binary(gauss(r, &s), gauss(r, &s), false, Tape::sub)
        }),
        c("mul.lhs", LINEAR_TOL, |r| {
            let s = matrix(r);
            binary(gauss(r, &s), gauss(r, &s), true, Tape::mul)
        }),
        c("mul.square", LINEAR_TOL, |r| {
            let s = matrix(r);
            trial(gauss(r, &s), |t, v| t.mul(v, v))
        }),
        c("scale", LINEAR_TOL, |r| {
            let s = matrix(r);
            let k = r.gaussian();
            trial(gauss(r, &s), move |t, v| t.scale(v, k))
        }),
        c("add_scalar", LINEAR_TOL, |r| {
            let s = matrix(r);
            let k = r.gaussian();
            trial(gauss(r, &s), move |t, v| t.add_scalar(v, k))
        }),
        c("silu", LINEAR_TOL, |r| {
            let s = matrix(r);
            trial(gauss(r, &s).scale(2.0), Tape::silu)
        }),
        c("reshape", LINEAR_TOL, |r| {
            let [a, b] = matrix(r);
            trial(gauss(r, &[a, b]), move |t, v| t.reshape(v, &[b, a]))
        }),
        c("transpose", LINEAR_TOL, |r| {
            let s = matrix(r);
            trial(gauss(r, &s), Tape::transpose)
        }),
        c("slice", LINEAR_TOL, |r| {
            let n = dim(r, 2, 12);
            let start = r.below(n);
            let len = 1 + r.below(n - start);
            trial(gauss(r, &[n]), move |t, v| t.slice(v, start, len))
        }),
        c("matmul.lhs", LINEAR_TOL, |r| {
            let [m, k] = matrix(r);
            let n = dim(r, 1, 5);
            binary(gauss(r, &[m, k]), gauss(r, &[k, n]), true, Tape::matmul)
        }),
        c("matmul.rhs", LINEAR_TOL, |r| {
            let [k, n] = matrix(r);
            let m = dim(r, 1, 5);
            binary(gauss(r, &[k, n]), gauss(r, &[m, k]), false, Tape::matmul)
        }),
        c("add_row.x", LINEAR_TOL, |r| {
            let [m, n] = matrix(r);
            binary(gauss(r, &[m, n]), gauss(r, &[n]), true, Tape::add_row)
        }),
        c("add_row.bias", LINEAR_TOL, |r| {
            let [m, n] = matrix(r);
            binary(gauss(r, &[n]), gauss(r, &[m, n]), false, Tape::add_row)
        }),
        c("add_channel.x", LINEAR_TOL, |r| {
            let s = chw(r);
            binary(gauss(r, &s), gauss(r, &[s[0]]), true, Tape::add_channel)
        }),
        c("add_channel.bias", LINEAR_TOL, |r| {
            let s = chw(r);
            binary(gauss(r, &[s[0]]), gauss(r, &s), false, Tape::add_channel)
        }),
        c("mul_channel.x", LINEAR_TOL, |r| {
            let s = chw(r);
            binary(gauss(r, &s), gauss(r, &[s[0]]), true, Tape::mul_channel)
        }),
        c("mul_channel.scale", LINEAR_TOL, |r| {
            let s = chw(r);
            binary(gauss(r, &[s[0]]), gauss(r, &s), false, Tape::mul_channel)
        }),
        c("group_norm.x", LINEAR_TOL, |r| {
            let (x, g, b, groups) = gn_operands(r);
            trial(x, move |t, v| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                t.group_norm(v, g, b, groups)
            })
        }),
        c("group_norm.gamma", LINEAR_TOL, |r| {
            let (x, g, b, groups) = gn_operands(r);
            trial(g, move |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                t.group_norm(x, v, b, groups)
            })
        }),
        c("group_norm.beta", LINEAR_TOL, |r| {
            let (x, g, b, groups) = gn_operands(r);
            trial(b, move |t, v| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                t.group_norm(x, g, v, groups)
            })
        }),
        c("conv3x3.x", LINEAR_TOL, |r| {
            let (x, w, b, stride) = conv_operands(r);
            trial(x, move |t, v| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                t.conv3x3(v, w, b, stride)
            })
        }),
        c("conv3x3.w", LINEAR_TOL, |r| {
            let (x, w, b, stride) = conv_operands(r);
            trial(w, move |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                t.conv3x3(x, v, b, stride)
            })
        }),
        c("conv3x3.bias", LINEAR_TOL, |r| {
            let (x, w, b, stride) = conv_operands(r);
            trial(b, move |t, v| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                t.conv3x3(x, w, v, stride)
            })
        }),
        c("upsample_nearest2x", LINEAR_TOL, |r| {
            let s = chw(r);
            trial(gauss(r, &s), Tape::upsample_nearest2x)
        }),
        c("resize_bilinear", LINEAR_TOL, |r| {
            let s = chw(r);
            let (oh, ow) = (dim(r, 1, 8), dim(r, 1, 8));
            trial(gauss(r, &s), move |t, v| t.resize_bilinear(v, oh, ow))
        }),
        c("upsample_bilinear2x", LINEAR_TOL, |r| {
            let s = chw(r);
            trial(gauss(r, &s), Tape::upsample_bilinear2x)
        }),
        c("embedding.table", LINEAR_TOL, |r| {
            let (vocab, d) = (dim(r, 2, 5), dim(r, 1, 4));
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(vocab)).collect();
            trial(gauss(r, &[vocab, d]), move |t, v| t.embedding(v, &ids, None))
        }),
        c("embedding.override", LINEAR_TOL, |r| {
            let (vocab, d) = (dim(r, 2, 5), dim(r, 1, 4));
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(vocab)).collect();
            let over = ids[r.below(ids.len())];
            let table = gauss(r, &[vocab, d]);
            trial(gauss(r, &[d]), move |t, v| {
                let tb = t.constant(table.clone());
                t.embedding(tb, &ids, Some((v, over)))
            })
        }),
        c("sum", LINEAR_TOL, |r| {
            let s = chw(r);
            trial(gauss(r, &s), Tape::sum)
        }),
        c("mean", LINEAR_TOL, |r| {
            let s = chw(r);
            trial(gauss(r, &s), Tape::mean)
        }),
        c("l1", LINEAR_TOL, |r| {
            let s = matrix(r);
            trial(away_from_zero(r, &s), Tape::l1)
        }),
        c("softmax", ATTENTION_TOL, |r| {
            let s = chw(r);
            let axis = r.below(3);
            trial(gauss(r, &s), move |t, v| t.softmax(v, axis))
        }),
        c("masked_softmax_rows", ATTENTION_TOL, |r| {
            let [m, n] = [dim(r, 1, 5), dim(r, 2, 6)];
            let keep = keep_mask(r, n);
            trial(gauss(r, &[m, n]), move |t, v| t.masked_softmax_rows(v, &keep))
        }),
        c("attention.query", ATTENTION_TOL, |r| attention_trial(r, 0)),
        c("attention.key", ATTENTION_TOL, |r| attention_trial(r, 1)),
        c("attention.value", ATTENTION_TOL, |r| attention_trial(r, 2)),
    ]
}

/// Contracts the op's output with a fixed random tensor.
fn project(t: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv)?;
    t.sum(p)
}

fn run_case(case: &Case, trials: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let Trial { x, op } = (case.draw)(rng);
        let shape = {
            let mut t = Tape::new();
            let v = t.input(x.clone());
            let y = op(&mut t, v)?;
            t.shape(y).to_vec()
        };
        let r = gauss(rng, &shape);
        let res = grad_check(
            |t, v| {
                let y = op(t, v)?;
                project(t, y, &r)
            },
            &x,
            STEP,
        )?;
        worst = worst.max(res.max_rel_error);
    }
    Ok(report(case.name, trials, worst, case.tol))
}

fn report(name: &str, trials: usize, worst: f64, tol: f64) -> SuiteReport {
    SuiteReport {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        tolerance: tol,
        passed: worst < tol,
    }
}

/// Every tape operation, `trials` draws each.
pub fn diffcore_suite(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut rng = Rng::with_stream_id(seed, 0x6772_6164);
    cases().iter().map(|c| run_case(c, trials, &mut rng)).collect()
}

/// Normalisation ranges and energy targets frozen at a base point, so the
/// finite differences see the same piecewise-smooth branch as the tape.
struct Frozen {
    ranges: Vec<(f64, f64)>,
    targets: Vec<f64>,
}

/// `Σ_k g(A_k)` over `words` with each map built by `maps_of`. With
/// `frozen = None` the constants are taken from the current values and
/// returned.
fn word_energy(
    t: &mut Tape<f64>,
    maps: &[(Var, usize)],
    words: &[usize],
    lambda: f64,
    frozen: Option<&Frozen>,
) -> Result<(Var, Frozen)> {
    let mut total: Option<Var> = None;
    let mut out = Frozen {
        ranges: Vec::new(),
        targets: Vec::new(),
    };
    for (i, &k) in words.iter().enumerate() {
        let (a, range) = aggregate_with_range(t, maps, k, frozen.map(|f| f.ranges[i]))?;
        let c = frozen.map_or_else(|| erase_target(t.value(a), lambda), |f| f.targets[i]);
        let g = erase_energy_with_target(t, a, c)?;
        out.ranges.push(range);
        out.targets.push(c);
        total = Some(match total {
            Some(acc) => t.add(acc, g)?,
            None => g,
        });
    }
    Ok((total.ok_or_else(|| Error::invalid("empty word set"))?, out))
}

fn guidance_draw(rng: &mut Rng) -> (PromptTokens, Vec<usize>, f64) {
    let scene = gen_two_object_scene(rng);
    let target = rng.below(scene.objects.len());
    let words = scene.object_positions(target).expect("object index in range");
    let lambda = rng.uniform_range(0.2, 1.0);
    (scene.tokens, words, lambda)
}

/// Elementwise check of `∇_z Σ_k g` on an 8×8 latent through the stem and
/// the first cross-attention layer.
fn lowres_guidance(weights: &DenoiserWeights, trials: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let side = CROSS_SIDES[0];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (tokens, words, lambda) = guidance_draw(rng);
        let z = gauss(rng, &[3, side, side]);
        let energy = |t: &mut Tape<f64>, v: Var, frozen: Option<&Frozen>| -> Result<(Var, Frozen)> {
            let p = weights.bind(t, false);
            let map = weights.cross_attention_probe(t, &p, v, &tokens)?;
            word_energy(t, &[(map, side)], &words, lambda, frozen)
        };
        let frozen = {
            let mut t = Tape::new();
            let v = t.input(z.clone());
            energy(&mut t, v, None)?.1
        };
        let res = grad_check(|t, v| energy(t, v, Some(&frozen)).map(|(g, _)| g), &z, STEP)?;
        worst = worst.max(res.max_rel_error);
    }
    Ok(report("guidance.energy_lowres", trials, worst, ATTENTION_TOL))
}

/// Directional check of `∇_z Σ_k g` through the full network at 16×16:
/// `⟨∇g, d⟩` against `(g(z+hd) − g(z−hd)) / 2h` for a random unit `d`.
fn full_guidance(weights: &DenoiserWeights, trials: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (tokens, words, lambda) = guidance_draw(rng);
        let step = 1 + rng.below(200);
        let z = gauss(rng, &IMAGE_SHAPE);
        let d = gauss(rng, &IMAGE_SHAPE);
        let d = d.scale(1.0 / d.norm_l2());
        let energy = |z: &Tensor<f64>, frozen: Option<&Frozen>, grad: bool| -> Result<(f64, Frozen, Option<Tensor<f64>>)> {
            let mut t = Tape::new();
            let v = if grad { t.input(z.clone()) } else { t.constant(z.clone()) };
            let p = weights.bind(&mut t, false);
            let out = weights.forward(&mut t, &p, v, step, &tokens, None, KvMode::None)?;
            let maps: Vec<(Var, usize)> = out.cross.iter().copied().zip(CROSS_SIDES).collect();
            let (g, fr) = word_energy(&mut t, &maps, &words, lambda, frozen)?;
            let value = t.value(g).item();
            let grad = if grad {
                t.backward(g)?;
                t.grad(v)
            } else {
                None
            };
            Ok((value, fr, grad))
        };
        let (_, frozen, grad) = energy(&z, None, true)?;
        let grad = grad.ok_or_else(|| Error::invalid("energy does not depend on the latent"))?;
        let analytic: f64 = grad.data().iter().zip(d.data()).map(|(g, d)| g * d).sum();
        let h = 1e-3;
        let shifted = |sign: f64| -> Result<f64> {
            let zs = z.zip_map(&d, "directional probe", |a, b| a + sign * h * b)?;
            Ok(energy(&zs, Some(&frozen), false)?.0)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (numeric.abs() + crate::diffcore::REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(report("guidance.energy_full_directional", trials, worst, ATTENTION_TOL))
}

/// The two erasure-energy gradient suites on freshly initialised weights.
pub fn guidance_suite(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let weights = DenoiserWeights::init(seed);
    let mut rng = Rng::with_stream_id(seed, 0x6775_6964);
    Ok(vec![
        lowres_guidance(&weights, trials, &mut rng)?,
        full_guidance(&weights, trials, &mut rng)?,
    ])
}

/// Both suites.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    if trials == 0 {
        return Err(Error::invalid("gradcheck needs at least one trial"));
    }
    let mut out = diffcore_suite(trials, seed)?;
    out.extend(guidance_suite(trials, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        for r in diffcore_suite(3, 11).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn guidance_suites_pass_a_few_trials() {
        for r in guidance_suite(2, 5).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
