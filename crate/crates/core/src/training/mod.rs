//! Scene generation and ε-prediction training of the denoiser.

mod scene;

pub use scene::{gen_scene, gen_two_object_scene, Color, SceneObject, SceneSpec, Shape, BACKGROUND};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserWeights, KvMode, PromptTokens, IMAGE_SHAPE};
use crate::diffcore::{Rng, Stream, Tape, Tensor};
use crate::error::{Error, Result};
use crate::schedule::{q_sample, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of replacing a sample's prompt with the all-NULL prompt.
    pub uncond_prob: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            uncond_prob: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr/beta1/beta2 out of range");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return bad("uncond_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Adam with bias correction over a list of flat parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params[i] -= lr·m̂/(√v̂ + eps)`.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", "parameter group count"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam", "parameter length"));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

/// Per-element mean squared error.
pub fn noise_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target, "noise_mse")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

/// One sample's training inputs after noising.
#[derive(Debug, Clone)]
pub struct NoisedSample {
    pub z: Tensor,
    pub t: usize,
    pub eps: Tensor,
    pub tokens: PromptTokens,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and the prompt dropout for one sample.
pub fn noise_sample(
    image: &Tensor,
    tokens: &PromptTokens,
    uncond_prob: f64,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<NoisedSample> {
    let t = 1 + rng.below(sched.steps());
    let eps: Tensor = rng.gaussian_tensor(&IMAGE_SHAPE);
    let tokens = if rng.coin(uncond_prob) { PromptTokens::null() } else { *tokens };
    Ok(NoisedSample {
        z: q_sample(image, t, &eps, sched)?,
        t,
        eps,
        tokens,
    })
}

/// Loss and parameter gradients (f64, summed over the batch in order) for a
/// batch of noised samples; the loss is the batch mean of per-sample MSE.
pub fn batch_gradients(weights: &DenoiserWeights, batch: &[NoisedSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads: Vec<Vec<f64>> = weights.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for s in batch {
        let mut tape = Tape::<f32>::new();
        let p = weights.bind(&mut tape, true);
        let z = tape.constant(s.z.detach());
        let out = weights.forward(&mut tape, &p, z, s.t, &s.tokens, None, KvMode::None)?;
        let target = tape.constant(s.eps.detach());
        let diff = tape.sub(out.eps, target)?;
        let sq = tape.mul(diff, diff)?;
        let l = tape.mean(sq)?;
        let lv = tape.value(l).item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        loss += lv * inv_b;
        tape.backward(l)?;
        for (g, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(gt) = tape.grad(v) {
                for (a, &b) in g.iter_mut().zip(gt.data()) {
                    *a += b as f64 * inv_b;
                }
            }
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("training gradient"));
    }
    Ok((loss, grads))
}

/// Forward/backward on `batch` and one Adam update. On any non-finite
/// value the weights and optimizer state are left untouched.
pub fn train_step(
    weights: &mut DenoiserWeights,
    adam: &mut Adam,
    batch: &[(Tensor, PromptTokens)],
    uncond_prob: f64,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let noised = batch
        .iter()
        .map(|(img, tok)| noise_sample(img, tok, uncond_prob, rng, sched))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = batch_gradients(weights, &noised)?;
    let mut params: Vec<&mut [f32]> = weights.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    adam.update(&mut params, &grads)?;
    Ok(loss)
}

/// Streaming training state: weights, optimizer and the two seeded streams.
pub struct Trainer {
    pub weights: DenoiserWeights,
    pub adam: Adam,
    pub config: TrainConfig,
    data_rng: Rng,
    noise_rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = DenoiserWeights::init(init_seed);
        let sizes: Vec<usize> = weights.tensors().iter().map(Tensor::numel).collect();
        let adam = Adam::new(&sizes, config.lr, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            weights,
            adam,
            data_rng: Rng::new(config.seed, Stream::DataGen),
            noise_rng: Rng::new(config.seed, Stream::TrainNoise),
            config,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn next_batch(&mut self) -> Vec<(Tensor, PromptTokens)> {
        (0..self.config.batch)
            .map(|_| {
                let s = gen_scene(&mut self.data_rng);
                (s.render(), s.tokens)
            })
            .collect()
    }

    pub fn step(&mut self, sched: &NoiseSchedule) -> Result<f64> {
        let batch = self.next_batch();
        let loss = train_step(
            &mut self.weights,
            &mut self.adam,
            &batch,
            self.config.uncond_prob,
            &mut self.noise_rng,
            sched,
        )?;
        self.step += 1;
        Ok(loss)
    }
}

/// Progress record emitted every `log_every` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub loss: f64,
    /// Mean loss over the most recent (up to) 1000 steps.
    pub running_loss: f64,
}

/// Runs `config.steps` steps. `on_log` receives progress records;
/// `on_checkpoint` is called every `checkpoint_every` steps and at the end.
pub fn run_training(
    trainer: &mut Trainer,
    sched: &NoiseSchedule,
    mut on_log: impl FnMut(&TrainLog) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Trainer, &TrainLog) -> Result<()>,
) -> Result<TrainLog> {
    let mut window = std::collections::VecDeque::with_capacity(RUNNING_WINDOW);
    let mut window_sum = 0.0;
    let mut last = None;
    while trainer.step_index() < trainer.config.steps {
        let loss = trainer.step(sched)?;
        if window.len() == RUNNING_WINDOW {
            window_sum -= window.pop_front().unwrap_or(0.0);
        }
        window.push_back(loss);
        window_sum += loss;
        let log = TrainLog {
            step: trainer.step_index(),
            loss,
            running_loss: window_sum / window.len() as f64,
        };
        let every = |n: usize| n > 0 && log.step % n == 0;
        if every(trainer.config.log_every) {
            on_log(&log)?;
        }
        if every(trainer.config.checkpoint_every) || log.step == trainer.config.steps {
            on_checkpoint(trainer, &log)?;
        }
        last = Some(log);
    }
    last.ok_or_else(|| Error::Config("train.steps must be positive".into()))
}

pub const RUNNING_WINDOW: usize = 1000;
