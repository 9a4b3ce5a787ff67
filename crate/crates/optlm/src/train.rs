//! Optimization loop wiring the frozen backbone, the plug-in, the objectives
//! and checkpointing into reproducible runs.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are kept in f64 so optimizer
/// state serializes identically regardless of the training precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(param_sizes: Vec<usize>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<F: Scalar>(&mut self, mut params: Vec<&mut Tensor<F>>, grads: &[Tensor<F>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, pv) in p.data.iter_mut().enumerate() {
                let g = grads[i].data[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                *pv = F::from_f64(pv.as_f64() - upd);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in &g.data {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v = *v * s;
            }
        }
    }
}

use crate::backbone::{hidden_states, BackboneParams};
use crate::datagen::{Label, LabeledCorpus, Token};
use crate::error::{Error, Result};
use crate::objectives::{build_losses, KlController, KlControllerConfig, LossReport};
use crate::plugin::PluginParams;
use crate::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub kl: KlControllerConfig,
    /// 0 means checkpoint only at the end of the run.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        self.kl.validate()
    }
}

/// Hidden states of the frozen backbone for every prediction position of a
/// corpus, computed once up front. Training only ever reads rows out of this.
pub struct FrozenFeatures<F: Scalar> {
    pub h: Tensor<F>,
    pub targets: Vec<Token>,
    pub labels: Vec<Label>,
    /// (sequence index, position within sequence) per row.
    pub origin: Vec<(usize, usize)>,
}

pub fn precompute_features<F: Scalar>(
    backbone: &BackboneParams<F>,
    corpus: &LabeledCorpus,
) -> Result<FrozenFeatures<F>> {
    let d = backbone.config.hidden_dim;
    let total: usize = corpus.sequences.iter().map(|s| s.tokens.len() - 1).sum();
    let mut h = Tensor::zeros(vec![total, d]);
    let mut targets = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut origin = Vec::with_capacity(total);
    let mut row = 0usize;
    for (si, seq) in corpus.sequences.iter().enumerate() {
        let hs = hidden_states(backbone, &seq.tokens)?;
        let n = seq.tokens.len() - 1;
        h.data[row * d..(row + n) * d].copy_from_slice(&hs.data[..n * d]);
        for t in 0..n {
            targets.push(seq.tokens[t + 1]);
            labels.push(seq.labels[t]);
            origin.push((si, t));
        }
        row += n;
    }
    Ok(FrozenFeatures { h, targets, labels, origin })
}

impl<F: Scalar> FrozenFeatures<F> {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn gather(&self, rows: &[usize]) -> (Tensor<F>, Vec<Token>) {
        let d = self.h.last_dim();
        let mut out = Tensor::zeros(vec![rows.len(), d]);
        let mut t = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            out.data[i * d..(i + 1) * d].copy_from_slice(&self.h.data[r * d..(r + 1) * d]);
            t.push(self.targets[r]);
        }
        (out, t)
    }
}

/// Everything that evolves during plug-in training. The backbone stays
/// frozen; only plug-in parameters receive optimizer updates.
#[derive(Debug)]
pub struct TrainState<F: Scalar> {
    pub config: TrainConfig,
    pub backbone: BackboneParams<F>,
    pub plugin: PluginParams<F>,
    pub adam: Adam,
    pub controller: KlController,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(
        config: TrainConfig,
        backbone: BackboneParams<F>,
        plugin: PluginParams<F>,
    ) -> Result<Self> {
        config.validate()?;
        if plugin.hidden_dim != backbone.config.hidden_dim {
            return Err(Error::Config(format!(
                "plug-in built for hidden_dim {}, backbone has {}",
                plugin.hidden_dim, backbone.config.hidden_dim
            )));
        }
        let sizes = plugin.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        let adam = Adam::new(sizes, config.learning_rate);
        let controller = KlController::new(config.kl)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(TrainState {
            config,
            backbone,
            plugin,
            adam,
            controller,
            rng,
            step: 0,
        })
    }

    /// Fraction of all parameters (backbone + plug-in) that receive updates.
    pub fn trainable_fraction(&self) -> f64 {
        let frozen: usize = self.backbone.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        let live = self.plugin.n_params();
        live as f64 / (frozen + live) as f64
    }

    /// One optimizer step over a uniformly sampled batch of positions.
    pub fn train_step(&mut self, features: &FrozenFeatures<F>) -> Result<LossReport> {
        let n = features.n_rows();
        if n == 0 {
            return Err(Error::Data("no training positions".into()));
        }
        let rows: Vec<usize> =
            (0..self.config.batch_size).map(|_| self.rng.gen_range(0..n)).collect();
        let (h_batch, targets) = features.gather(&rows);

        let mut tape = Tape::<F>::new();
        let bvars = self.backbone.register(&mut tape, false);
        let pvars = self.plugin.register(&mut tape, true);
        let h_var = tape.constant(h_batch);
        let alpha = self.controller.alpha;
        let losses = build_losses(
            &mut tape,
            &bvars,
            &pvars,
            h_var,
            &targets,
            self.plugin.config.estimator,
            self.plugin.config.gumbel_temperature,
            alpha,
            &mut self.rng,
        )?;
        let report = LossReport {
            step: self.step,
            ce: tape.value(losses.ce).item().as_f64(),
            kl: tape.value(losses.kl).item().as_f64(),
            policy: tape.value(losses.policy).item().as_f64(),
            alpha,
            total: tape.value(losses.total).item().as_f64(),
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: ce {} kl {} policy {}",
                self.step, report.ce, report.kl, report.policy
            )));
        }
        tape.backward(losses.total)?;

        let vars = pvars.vars_in_order();
        let mut grads: Vec<Tensor<F>> = Vec::with_capacity(vars.len());
        for (v, (_, p)) in vars.iter().zip(self.plugin.named_tensors()) {
            grads.push(tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape.clone())));
        }
        clip_global_norm(&mut grads, self.config.grad_clip);
        let params: Vec<&mut Tensor<F>> =
            self.plugin.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        self.adam.step(params, &grads);

        self.controller.adapt(report.kl)?;
        self.step += 1;
        Ok(report)
    }
}

/// Run `state` up to `config.steps`, streaming one JSON record per step to
/// `metrics` and checkpointing to `checkpoint_path` per the config. On a
/// non-finite loss the run aborts with an error naming the last checkpoint.
pub fn fit<F: Scalar>(
    state: &mut TrainState<F>,
    features: &FrozenFeatures<F>,
    metrics: Option<&mut dyn Write>,
    checkpoint_path: Option<&std::path::Path>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<LossReport> {
    let mut metrics = metrics;
    let mut last_saved: Option<std::path::PathBuf> = None;
    let mut last = None;
    while state.step < state.config.steps {
        let report = match state.train_step(features) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                let hint = match &last_saved {
                    Some(p) => format!("; last good checkpoint: {}", p.display()),
                    None => "; no checkpoint written yet".into(),
                };
                return Err(Error::Numeric(format!("{msg}{hint}")));
            }
            Err(e) => return Err(e),
        };
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &report).map_err(Error::from)?;
            writeln!(w).map_err(Error::from)?;
        }
        on_step(&report);
        let every = state.config.checkpoint_every;
        if let Some(path) = checkpoint_path {
            if (every > 0 && state.step % every == 0) || state.step == state.config.steps {
                crate::checkpoint::save_train_state(path, state)?;
                last_saved = Some(path.to_path_buf());
            }
        }
        last = Some(report);
    }
    last.ok_or_else(|| Error::Contract("fit called with no steps remaining".into()))
}
