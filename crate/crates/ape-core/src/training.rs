//! Training loop: Adam under a triangular learning-rate schedule, label
//! smoothing, count-weighted gradient accumulation, and an exponential
//! moving average of the weights that is what gets evaluated and saved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_by_tokens, DataError, EncodedExample, Triplet};
use crate::decoding::{translate_corpus, BeamConfig};
use crate::metrics::score_corpus;
use crate::model::{train_rng, Model, ModelError, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::TensorError;
use crate::tokenizer::Vocab;

/// Error type checkpoint-writing hooks may raise.
pub type HookError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("event hook failed: {0}")]
    Hook(#[source] HookError),
}

/// Every knob the optimization loop reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer updates to run.
    pub max_steps: usize,
    /// Learning rate at the top of the triangle.
    pub peak_lr: f64,
    /// Steps spent climbing linearly from zero to `peak_lr`.
    pub warmup_steps: usize,
    /// Probability mass spread uniformly over the wrong labels.
    pub label_smoothing: f64,
    /// L2 coefficient folded into the gradient of decaying slots.
    pub weight_decay: f64,
    /// Per-step blend factor of the weight shadow.
    pub ema_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Target-token budget per micro-batch.
    pub batch_tokens: usize,
    /// Micro-batches whose gradients pool into one update.
    pub grad_accum: usize,
    pub seed: u64,
    /// Steps between dev evaluations.
    pub eval_interval: usize,
    /// Stop early once a dev evaluation reaches this TER, if set.
    pub stop_at_ter: Option<f64>,
    /// Beam settings for dev decoding.
    pub dev_beam: BeamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 10_000,
            peak_lr: 5e-5,
            warmup_steps: 5_000,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            ema_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_tokens: 2_000,
            grad_accum: 1,
            seed: 42,
            eval_interval: 500,
            stop_at_ter: None,
            dev_beam: BeamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        for (name, v) in [
            ("batch_tokens", self.batch_tokens),
            ("grad_accum", self.grad_accum),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err("peak_lr must be finite and non-negative".into());
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err("label_smoothing must lie in [0, 1)".into());
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err("weight_decay must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err("ema_decay must lie in [0, 1]".into());
        }
        if self.dev_beam.beam == 0 || self.dev_beam.max_len == 0 {
            return Err("dev_beam width and max_len must be positive".into());
        }
        Ok(())
    }

    /// Triangular schedule: linear from zero to `peak_lr` over the warmup,
    /// then linear back to zero at `max_steps`. With no warmup the first
    /// step already runs at the peak.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.max_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else {
            self.peak_lr * (self.max_steps - step) as f64
                / (self.max_steps - self.warmup_steps) as f64
        }
    }
}

/// Adam with bias correction; weight decay is classic L2 folded into the
/// gradient of slots flagged for decay.
pub struct Adam<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParameterStore<S>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<S>> = (0..store.num_slots())
            .map(|i| vec![S::zero(); store.slot(i).numel()])
            .collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads` holds one gradient buffer per slot.
    pub fn step(&mut self, store: &mut ParameterStore<S>, grads: &[Vec<S>], lr: f64) {
        assert_eq!(grads.len(), store.num_slots(), "one gradient per slot");
        self.t += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let ob1 = S::of_f64(1.0 - self.beta1);
        let ob2 = S::of_f64(1.0 - self.beta2);
        let bc1 = S::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::of_f64(lr);
        let eps = S::of_f64(self.eps);
        for slot in 0..store.num_slots() {
            let wd = if store.decays(slot) {
                S::of_f64(self.weight_decay)
            } else {
                S::zero()
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.slot_mut(slot).data_mut();
            for j in 0..p.len() {
                let g = grads[slot][j] + wd * p[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of every parameter slot.
pub struct Ema<S: Scalar> {
    decay: f64,
    shadow: Vec<Vec<S>>,
}

impl<S: Scalar> Ema<S> {
    /// Starts the shadow at the model's current weights.
    pub fn new(model: &Model<S>, decay: f64) -> Self {
        Self {
            decay,
            shadow: (0..model.store().num_slots())
                .map(|i| model.store().slot(i).data().to_vec())
                .collect(),
        }
    }

    /// `shadow <- (1 - decay) * shadow + decay * param`, element-wise.
    pub fn update(&mut self, model: &Model<S>) {
        let d = S::of_f64(self.decay);
        let od = S::of_f64(1.0 - self.decay);
        for (slot, shadow) in self.shadow.iter_mut().enumerate() {
            for (s, &p) in shadow.iter_mut().zip(model.store().slot(slot).data()) {
                *s = od * *s + d * p;
            }
        }
    }

    /// A copy of `model` carrying the shadow weights; ties are preserved
    /// because slots, not names, hold the storage.
    pub fn shadow_model(&self, model: &Model<S>) -> Result<Model<S>, ModelError> {
        let mut store = model.store().clone();
        for (slot, shadow) in self.shadow.iter().enumerate() {
            store.slot_mut(slot).data_mut().copy_from_slice(shadow);
        }
        Model::from_parts(model.cfg().clone(), model.sharing().clone(), store)
    }
}

/// One optimizer update, as reported to the hook.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// 1-based count of completed updates.
    pub step: usize,
    /// Count-weighted mean loss per gold token across the update's batches.
    pub loss: f64,
    /// Learning rate the update used.
    pub lr: f64,
}

/// One dev evaluation of the shadow weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLog {
    pub step: usize,
    pub dev_ter: f64,
    pub dev_bleu: f64,
}

/// What the training loop tells its hook. `Eval` and `Finished` hand over
/// the shadow model so the hook can persist checkpoints.
pub enum TrainEvent<'a, S: Scalar> {
    Step(StepLog),
    Eval {
        log: EvalLog,
        model: &'a Model<S>,
        is_best: bool,
    },
    /// Training ran to completion; carries the final shadow weights. Not
    /// emitted after a non-finite abort.
    Finished { model: &'a Model<S> },
    /// The loss went non-finite; nothing was updated this step.
    NanAbort { step: usize },
}

/// Where a finished (or aborted) run ended up.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Updates actually applied.
    pub steps: usize,
    /// Loss of the last applied update.
    pub final_loss: Option<f64>,
    /// Evaluation with the lowest dev TER; ties go to the later step.
    pub best: Option<EvalLog>,
    pub evals: Vec<EvalLog>,
    /// Step whose loss went non-finite, if training aborted.
    pub nan_step: Option<usize>,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the optimization loop over `examples`, evaluating on `dev` every
/// `eval_interval` steps. Batches are redrawn each epoch from a seed derived
/// from the epoch number, so runs are reproducible end to end.
///
/// A non-finite loss aborts the run before the poisoned update is applied;
/// the report then carries `nan_step` and the hook has already seen every
/// checkpointable state.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    examples: &[EncodedExample],
    dev: &[Triplet],
    vocab: &Vocab,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<(), HookError>,
) -> Result<TrainReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = train_rng(cfg.seed);
    let mut adam = Adam::new(model.store(), cfg);
    let mut ema = Ema::new(model, cfg.ema_decay);
    let mut report = TrainReport {
        steps: 0,
        final_loss: None,
        best: None,
        evals: Vec::new(),
        nan_step: None,
    };
    let dev_items: Vec<(String, String)> = dev
        .iter()
        .map(|t| (t.src.clone(), t.mt.clone()))
        .collect();
    let dev_refs: Vec<String> = dev.iter().map(|t| t.pe.clone()).collect();

    let mut epoch: u64 = 0;
    'run: while report.steps < cfg.max_steps {
        let batches = batch_by_tokens(
            examples,
            cfg.batch_tokens,
            epoch_seed(cfg.seed, epoch),
            vocab,
        )?;
        for chunk in batches.chunks(cfg.grad_accum) {
            if report.steps >= cfg.max_steps {
                break;
            }
            let lr = cfg.lr_at(report.steps);

            // Pool chunk gradients weighted by gold-token count, so the
            // update equals one big batch over the whole chunk.
            let mut accum: Vec<Vec<S>> = (0..model.store().num_slots())
                .map(|i| vec![S::zero(); model.store().slot(i).numel()])
                .collect();
            let mut weighted_loss = 0.0f64;
            let mut total_tokens = 0usize;
            for batch in chunk {
                let mut tape = Tape::new();
                let p = model.params_on_tape(&mut tape);
                let (mean, count) = model.batch_loss_on_tape(
                    &mut tape,
                    &p,
                    batch,
                    cfg.label_smoothing,
                    vocab.pad_id(),
                    true,
                    &mut rng,
                )?;
                tape.backward(mean)?;
                let w = S::of_f64(count as f64);
                for (slot, acc) in accum.iter_mut().enumerate() {
                    if let Some(g) = tape.grad(p.var(slot)) {
                        for (a, &gj) in acc.iter_mut().zip(g) {
                            *a += w * gj;
                        }
                    }
                }
                weighted_loss += tape.value(mean)[0].as_f64() * count as f64;
                total_tokens += count;
            }
            let loss = weighted_loss / total_tokens as f64;
            if !loss.is_finite() {
                let step = report.steps + 1;
                hook(TrainEvent::NanAbort { step }).map_err(TrainError::Hook)?;
                report.nan_step = Some(step);
                return Ok(report);
            }
            let tw = S::of_f64(total_tokens as f64);
            for acc in &mut accum {
                for a in acc.iter_mut() {
                    *a /= tw;
                }
            }

            adam.step(model.store_mut(), &accum, lr);
            ema.update(model);
            report.steps += 1;
            report.final_loss = Some(loss);
            hook(TrainEvent::Step(StepLog {
                step: report.steps,
                loss,
                lr,
            }))
            .map_err(TrainError::Hook)?;

            let due = report.steps % cfg.eval_interval == 0 || report.steps == cfg.max_steps;
            if due && !dev.is_empty() {
                let shadow = ema.shadow_model(model)?;
                let outs = translate_corpus(&shadow, vocab, &dev_items, &cfg.dev_beam);
                let hyps: Vec<String> = outs.into_iter().map(|t| t.text).collect();
                let scores = score_corpus(&hyps, &dev_refs);
                let log = EvalLog {
                    step: report.steps,
                    dev_ter: scores.ter,
                    dev_bleu: scores.bleu,
                };
                let is_best = report.best.as_ref().map_or(true, |b| log.dev_ter <= b.dev_ter);
                if is_best {
                    report.best = Some(log.clone());
                }
                report.evals.push(log.clone());
                hook(TrainEvent::Eval {
                    log: log.clone(),
                    model: &shadow,
                    is_best,
                })
                .map_err(TrainError::Hook)?;
                if cfg.stop_at_ter.is_some_and(|t| log.dev_ter <= t) {
                    break 'run;
                }
            }
        }
        epoch += 1;
    }
    let shadow = ema.shadow_model(model)?;
    hook(TrainEvent::Finished { model: &shadow }).map_err(TrainError::Hook)?;
    Ok(report)
}
