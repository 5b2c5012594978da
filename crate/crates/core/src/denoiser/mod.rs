//! Tiny conditional noise predictor `ε_θ(z_t; t, y)`.
//!
//! Layout (C = 32 channels, 16×16 input):
//!
//! ```text
//! z ─ stem ─ RB1 ─ RB2 ─┬─ down(8×8) ─ self-attn ─ cross-attn A ─ up(16×16) ─(+)─ cross-attn B ─ RB3 ─ head ─ ε
//!                       └──────────────────────── skip ─────────────────────┘
//! ```
//!
//! Residual blocks are modulated through a per-block scale/shift by a
//! sinusoidal time embedding plus a projection of the mean prompt embedding
//! over non-PAD positions. Cross-attention keys/values come from the token
//! embedding table; PAD columns are masked out of the softmax. The
//! self-attention block can record its K/V or run on injected K/V.

mod attention;
pub mod tokens;
mod weights;

pub use attention::{aggregate_cross_attention, aggregate_on_tape, aggregate_with_range};
pub use tokens::PromptTokens;
pub use weights::{DenoiserWeights, CHECKPOINT_KIND};

use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 32;
pub const TIME_DIM: usize = 64;
pub const EMBED_DIM: usize = 32;
pub const IMAGE: usize = 16;
pub const LOW: usize = 8;
pub const GROUPS: usize = 8;
/// Image shape `[3, 16, 16]`.
pub const IMAGE_SHAPE: [usize; 3] = [3, IMAGE, IMAGE];
/// Spatial side of cross-attention layers A and B.
pub const CROSS_SIDES: [usize; 2] = [LOW, IMAGE];

/// Self-attention keys and values (`positions × d` each).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfKv<F: Float = f32> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

/// What the self-attention block does with its keys/values.
#[derive(Debug, Clone, Copy)]
pub enum KvMode<'a, F: Float = f32> {
    None,
    Record,
    Inject(&'a SelfKv<F>),
}

/// One cross-attention layer's post-softmax map, `[side², L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMap<F: Float = f32> {
    pub side: usize,
    pub map: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<F: Float = f32> {
    pub tokens: PromptTokens,
    pub cross: Vec<CrossMap<F>>,
    pub kv: Option<SelfKv<F>>,
}

/// Tape handles produced by [`DenoiserWeights::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars<F: Float = f32> {
    pub eps: Var,
    /// Cross-attention maps of layers A and B.
    pub cross: [Var; 2],
    pub kv: Option<SelfKv<F>>,
}

impl<F: Float> ForwardVars<F> {
    pub fn record(&self, tape: &Tape<F>, tokens: PromptTokens) -> AttentionRecord<F> {
        AttentionRecord {
            tokens,
            cross: self
                .cross
                .iter()
                .zip(CROSS_SIDES)
                .map(|(&v, side)| CrossMap {
                    side,
                    map: tape.value(v).detach(),
                })
                .collect(),
            kv: self.kv.clone(),
        }
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = exp(−ln(10000)·i/32)`.
pub fn time_features<F: Float>(t: usize) -> Tensor<F> {
    let half = TIME_DIM / 2;
    let mut data = vec![F::zero(); TIME_DIM];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        data[i] = F::of(a.sin());
        data[half + i] = F::of(a.cos());
    }
    Tensor::raw(vec![1, TIME_DIM], data)
}

/// Parameters bound onto a tape, addressed by name.
pub struct Bound<'w> {
    weights: &'w DenoiserWeights,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.weights.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn to_tokens<F: Float>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

fn from_tokens<F: Float>(tape: &mut Tape<F>, x: Var, side: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, side, side])
}

impl DenoiserWeights {
    /// Places every parameter on `tape`, as inputs when `trainable`.
    pub fn bind<F: Float>(&self, tape: &mut Tape<F>, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors()
            .iter()
            .map(|t| {
                let c = t.cast::<F>();
                if trainable {
                    tape.input(c)
                } else {
                    tape.constant(c)
                }
            })
            .collect();
        Bound { weights: self, vars }
    }

    fn linear<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = tape.matmul(x, p.p(&format!("{prefix}.w")))?;
        tape.add_row(h, p.p(&format!("{prefix}.b")))
    }

    fn norm<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        tape.group_norm(
            x,
            p.p(&format!("{prefix}.gamma")),
            p.p(&format!("{prefix}.beta")),
            GROUPS,
        )
    }

    fn conv<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        tape.conv3x3(x, p.p(&format!("{prefix}.w")), p.p(&format!("{prefix}.b")), stride)
    }

    fn res_block<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, temb: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(tape, p, x, &format!("{prefix}.gn1"))?;
        let h = tape.silu(h)?;
        let h = self.conv(tape, p, h, &format!("{prefix}.conv1"), 1)?;
        let mods = self.linear(tape, p, temb, &format!("{prefix}.temb"))?;
        let scale = tape.slice(mods, 0, CHANNELS)?;
        let scale = tape.add_scalar(scale, F::one())?;
        let shift = tape.slice(mods, CHANNELS, CHANNELS)?;
        let h = self.norm(tape, p, h, &format!("{prefix}.gn2"))?;
        let h = tape.mul_channel(h, scale)?;
        let h = tape.add_channel(h, shift)?;
        let h = tape.silu(h)?;
        let h = self.conv(tape, p, h, &format!("{prefix}.conv2"), 1)?;
        tape.add(x, h)
    }

    fn self_attention<F: Float>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        kv: KvMode<'_, F>,
    ) -> Result<(Var, Option<SelfKv<F>>)> {
        let side = tape.shape(x)[1];
        let h = self.norm(tape, p, x, "sa.gn")?;
        let h = to_tokens(tape, h)?;
        let q = tape.matmul(h, p.p("sa.wq"))?;
        let (k, v) = match kv {
            KvMode::Inject(rec) => {
                let want = [side * side, CHANNELS];
                if rec.k.shape() != want || rec.v.shape() != want {
                    return Err(Error::shape(
                        "kv inject",
                        format!("expected {want:?}, got k {:?} v {:?}", rec.k.shape(), rec.v.shape()),
                    ));
                }
                (tape.constant(rec.k.detach()), tape.constant(rec.v.detach()))
            }
            _ => (tape.matmul(h, p.p("sa.wk"))?, tape.matmul(h, p.p("sa.wv"))?),
        };
        let recorded = matches!(kv, KvMode::Record).then(|| SelfKv {
            k: tape.value(k).detach(),
            v: tape.value(v).detach(),
        });
        let o = self.attend(tape, p, q, k, v, None, "sa")?;
        let o = from_tokens(tape, o, side)?;
        Ok((tape.add(x, o)?, recorded))
    }

    fn cross_attention<F: Float>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        ctx: Var,
        keep: &[bool],
        prefix: &str,
    ) -> Result<(Var, Var)> {
        let side = tape.shape(x)[1];
        let h = self.norm(tape, p, x, &format!("{prefix}.gn"))?;
        let h = to_tokens(tape, h)?;
        let q = tape.matmul(h, p.p(&format!("{prefix}.wq")))?;
        let k = tape.matmul(ctx, p.p(&format!("{prefix}.wk")))?;
        let v = tape.matmul(ctx, p.p(&format!("{prefix}.wv")))?;
        let mut attn = None;
        let o = self.attend(tape, p, q, k, v, Some((keep, &mut attn)), prefix)?;
        let o = from_tokens(tape, o, side)?;
        Ok((tape.add(x, o)?, attn.expect("cross-attention map")))
    }

    /// `softmax(q·kᵀ/√d)·v` followed by the output projection.
    #[allow(clippy::too_many_arguments)]
    fn attend<F: Float>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<(&[bool], &mut Option<Var>)>,
        prefix: &str,
    ) -> Result<Var> {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, F::of(1.0 / (CHANNELS as f64).sqrt()))?;
        let a = match mask {
            Some((keep, out)) => {
                let a = tape.masked_softmax_rows(logits, keep)?;
                *out = Some(a);
                a
            }
            None => tape.softmax(logits, 1)?,
        };
        let o = tape.matmul(a, v)?;
        self.linear(tape, p, o, &format!("{prefix}.out"))
    }

    /// Runs the network on `z[3,16,16]`. `null` replaces the NULL token's
    /// embedding row wherever NULL occurs in `tokens`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        z: Var,
        t: usize,
        tokens: &PromptTokens,
        null: Option<Var>,
        kv: KvMode<'_, F>,
    ) -> Result<ForwardVars<F>> {
        if tape.shape(z) != IMAGE_SHAPE {
            return Err(Error::shape("predict_noise", format!("latent {:?}", tape.shape(z))));
        }
        let tf = tape.constant(time_features(t));
        let temb = self.linear(tape, p, tf, "time.l1")?;
        let temb = tape.silu(temb)?;
        let temb = self.linear(tape, p, temb, "time.l2")?;

        let ctx = tape.embedding(p.p("tok_emb"), &tokens.ids, null.map(|n| (n, tokens::NULL)))?;
        let keep = tokens.keep_mask();
        let n = F::of(1.0 / tokens.non_pad() as f64);
        let avg = tape.constant(Tensor::raw(
            vec![1, tokens::PROMPT_LEN],
            keep.iter().map(|&k| if k { n } else { F::zero() }).collect(),
        ));
        let pooled = tape.matmul(avg, ctx)?;
        let pooled = self.linear(tape, p, pooled, "pool")?;
        let temb = tape.add(temb, pooled)?;
        let temb = tape.silu(temb)?;

        let h = self.conv(tape, p, z, "stem", 1)?;
        let h = self.res_block(tape, p, h, temb, "rb1")?;
        let skip = self.res_block(tape, p, h, temb, "rb2")?;
        let h = self.conv(tape, p, skip, "down", 2)?;
        let (h, kv_out) = self.self_attention(tape, p, h, kv)?;
        let (h, attn_a) = self.cross_attention(tape, p, h, ctx, &keep, "xa")?;
        let h = tape.upsample_nearest2x(h)?;
        let h = tape.add(h, skip)?;
        let (h, attn_b) = self.cross_attention(tape, p, h, ctx, &keep, "xb")?;
        let h = self.res_block(tape, p, h, temb, "rb3")?;
        let h = self.norm(tape, p, h, "head.gn")?;
        let h = tape.silu(h)?;
        let eps = self.conv(tape, p, h, "head", 1)?;
        Ok(ForwardVars {
            eps,
            cross: [attn_a, attn_b],
            kv: kv_out,
        })
    }

    /// Stem followed by cross-attention A, run at the latent's own
    /// resolution. Returns the `[side², 6]` attention map. Used by the
    /// finite-difference suite on latents smaller than the model input.
    pub fn cross_attention_probe<F: Float>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        z: Var,
        tokens: &PromptTokens,
    ) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::shape("cross_attention_probe", format!("latent {s:?}")));
        }
        let ctx = tape.embedding(p.p("tok_emb"), &tokens.ids, None)?;
        let h = self.conv(tape, p, z, "stem", 1)?;
        let (_, attn) = self.cross_attention(tape, p, h, ctx, &tokens.keep_mask(), "xa")?;
        Ok(attn)
    }

    /// Inference-only noise prediction.
    pub fn predict_noise(
        &self,
        z: &Tensor,
        t: usize,
        tokens: &PromptTokens,
        null_override: Option<&Tensor>,
        kv: KvMode<'_>,
    ) -> Result<(Tensor, AttentionRecord)> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.detach());
        let null = null_override.map(|n| tape.constant(n.detach()));
        let out = self.forward(&mut tape, &p, zv, t, tokens, null, kv)?;
        let eps = tape.value(out.eps).detach();
        Ok((eps, out.record(&tape, *tokens)))
    }
}
