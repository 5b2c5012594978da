//! Parameter layout, initialisation and checkpoint I/O.

use std::collections::HashMap;
use std::path::Path;

use super::{tokens::VOCAB, CHANNELS, EMBED_DIM, TIME_DIM};
use crate::diffcore::{Rng, Stream, Tensor};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::store;

pub const CHECKPOINT_KIND: &str = "checkpoint";

fn layout() -> Vec<(String, Vec<usize>)> {
    let c = CHANNELS;
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: &[usize]| v.push((name, shape.to_vec()));
    push("tok_emb".into(), &[VOCAB, EMBED_DIM]);
    for l in ["time.l1", "time.l2"] {
        push(format!("{l}.w"), &[TIME_DIM, TIME_DIM]);
        push(format!("{l}.b"), &[TIME_DIM]);
    }
    push("pool.w".into(), &[EMBED_DIM, TIME_DIM]);
    push("pool.b".into(), &[TIME_DIM]);
    push("stem.w".into(), &[c, 3, 3, 3]);
    push("stem.b".into(), &[c]);
    let res_block = |push: &mut dyn FnMut(String, &[usize]), rb: &str| {
        push(format!("{rb}.gn1.gamma"), &[c]);
        push(format!("{rb}.gn1.beta"), &[c]);
        push(format!("{rb}.conv1.w"), &[c, c, 3, 3]);
        push(format!("{rb}.conv1.b"), &[c]);
        push(format!("{rb}.temb.w"), &[TIME_DIM, 2 * c]);
        push(format!("{rb}.temb.b"), &[2 * c]);
        push(format!("{rb}.gn2.gamma"), &[c]);
        push(format!("{rb}.gn2.beta"), &[c]);
        push(format!("{rb}.conv2.w"), &[c, c, 3, 3]);
        push(format!("{rb}.conv2.b"), &[c]);
    };
    let attention = |push: &mut dyn FnMut(String, &[usize]), a: &str, kv_in: usize| {
        push(format!("{a}.gn.gamma"), &[c]);
        push(format!("{a}.gn.beta"), &[c]);
        push(format!("{a}.wq"), &[c, c]);
        push(format!("{a}.wk"), &[kv_in, c]);
        push(format!("{a}.wv"), &[kv_in, c]);
        push(format!("{a}.out.w"), &[c, c]);
        push(format!("{a}.out.b"), &[c]);
    };
    res_block(&mut push, "rb1");
    res_block(&mut push, "rb2");
    push("down.w".into(), &[c, c, 3, 3]);
    push("down.b".into(), &[c]);
    attention(&mut push, "sa", c);
    attention(&mut push, "xa", EMBED_DIM);
    attention(&mut push, "xb", EMBED_DIM);
    res_block(&mut push, "rb3");
    push("head.gn.gamma".into(), &[c]);
    push("head.gn.beta".into(), &[c]);
    push("head.w".into(), &[3, c, 3, 3]);
    push("head.b".into(), &[3]);
    v
}

/// All denoiser parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl DenoiserWeights {
    /// Seeded initialisation: token embeddings ~ N(0, 1); weights
    /// ~ U(±1/√fan_in); biases and norm shifts 0; norm scales 1.
    pub fn init(seed: u64) -> Self {
        let mut rng = Rng::new(seed, Stream::Init);
        let (names, tensors) = layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == "tok_emb" {
                    rng.gaussian_tensor(&shape)
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".b") || name.ends_with(".beta") {
                    Tensor::zeros(&shape)
                } else {
                    // conv [cout, cin, 3, 3] or linear [in, out]
                    let fan_in = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    rng.uniform_tensor(&shape, -bound, bound)
                };
                (name, t)
            })
            .unzip();
        Self::from_named(names, tensors).expect("layout is consistent")
    }

    fn from_named(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = layout();
        if expected.len() != names.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                names.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(names.iter().zip(&tensors)) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {n} {:?} does not match layout entry {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(DenoiserWeights {
            names,
            tensors,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Trained embedding row of the NULL token.
    pub fn null_embedding(&self) -> Tensor {
        let table = &self.tensors[self.index["tok_emb"]];
        let row = table.data()[..EMBED_DIM].to_vec();
        Tensor::new(&[EMBED_DIM], row).expect("embedding row")
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self, schedule: ScheduleParams, meta: serde_json::Value) -> Result<Vec<u8>> {
        let mut meta = meta;
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("param_count".into(), self.param_count().into());
        }
        let named: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.tensors).collect();
        store::encode(CHECKPOINT_KIND, schedule, meta, &named)
    }

    pub fn from_stored(stored: store::Stored) -> Result<(Self, ScheduleParams)> {
        let schedule = stored.header.schedule;
        let declared = stored.header.meta.get("param_count").and_then(|v| v.as_u64());
        let (names, tensors): (Vec<_>, Vec<_>) = stored.tensors.into_iter().unzip();
        let w = Self::from_named(names, tensors)?;
        if let Some(n) = declared {
            if n as usize != w.param_count() {
                return Err(Error::Format(format!(
                    "header declares {n} parameters, payload has {}",
                    w.param_count()
                )));
            }
        }
        Ok((w, schedule))
    }

    pub fn save(&self, path: &Path, schedule: ScheduleParams, meta: serde_json::Value) -> Result<()> {
        store::write(path, &self.to_bytes(schedule, meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, ScheduleParams)> {
        Self::from_stored(store::read(path, CHECKPOINT_KIND)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        assert_eq!(DenoiserWeights::init(9), DenoiserWeights::init(9));
        assert_ne!(DenoiserWeights::init(9), DenoiserWeights::init(10));
    }

    #[test]
    fn checkpoint_bytes_roundtrip_and_validate() {
        let w = DenoiserWeights::init(1);
        let bytes = w.to_bytes(ScheduleParams::default(), serde_json::json!({})).unwrap();
        let (back, sched) =
            DenoiserWeights::from_stored(store::decode(&bytes, CHECKPOINT_KIND).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(sched, ScheduleParams::default());

        let mut names = w.names().to_vec();
        names.swap(0, 1);
        assert!(DenoiserWeights::from_named(names, w.tensors().to_vec()).is_err());
    }
}
