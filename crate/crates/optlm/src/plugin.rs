//! The option plug-in: encoder E (hidden state + target embedding -> latent
//! distribution), decoder D (option + hidden state -> additive hidden-state
//! bias), policy (hidden state -> latent distribution), and the composed
//! biased-logits path through the shared lm_head.
//!
//! Every head's final linear layer is zero-initialized, so the plug-in is an
//! exact identity at step 0: biased logits equal baseline logits bitwise.

use crate::backbone::{BackboneParams, BackboneVars};
use crate::datagen::Token;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{argmax, gumbel_from_uniform, gumbel_noise, softmax_row, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    StraightThroughGumbel,
    ExactMarginal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptionConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub policy_hidden: usize,
    #[serde(default = "default_opt_dim")]
    pub option_embed_dim: usize,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_temperature")]
    pub gumbel_temperature: f64,
}

fn default_k() -> usize {
    10
}
fn default_opt_dim() -> usize {
    64
}
fn default_estimator() -> Estimator {
    Estimator::StraightThroughGumbel
}
fn default_temperature() -> f64 {
    1.0
}

impl OptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("option count K must be at least 2".into()));
        }
        if self.encoder_hidden == 0
            || self.decoder_hidden == 0
            || self.policy_hidden == 0
            || self.option_embed_dim == 0
        {
            return Err(Error::Config("plug-in hidden sizes must be positive".into()));
        }
        if self.gumbel_temperature <= 0.0 {
            return Err(Error::Config("gumbel_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Point on the K-simplex over option ids.
#[derive(Debug, Clone)]
pub struct LatentDistribution<F: Scalar> {
    pub probs: Vec<F>,
}

impl<F: Scalar> LatentDistribution<F> {
    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0f64;
        for &p in &self.probs {
            let p = p.as_f64();
            if p.is_nan() || p < 0.0 {
                return Err(Error::Contract("latent distribution off the simplex".into()));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "latent distribution sums to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentSource {
    Sampled,
    Argmax,
    Forced,
}

/// A concrete option choice. `z` is 0-based internally; human-facing output
/// renders option ids 1-based.
#[derive(Debug, Clone)]
pub struct LatentAssignment<F: Scalar> {
    pub z: usize,
    pub one_hot: Vec<F>,
    pub source: AssignmentSource,
}

impl<F: Scalar> LatentAssignment<F> {
    pub fn new(z: usize, k: usize, source: AssignmentSource) -> Result<Self> {
        if z >= k {
            return Err(Error::IndexOutOfRange {
                what: "option id",
                index: z,
                limit: k,
            });
        }
        let mut one_hot = vec![F::zero(); k];
        one_hot[z] = F::one();
        Ok(LatentAssignment { z, one_hot, source })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.one_hot.len();
        if self.z >= k {
            return Err(Error::Contract("assignment id out of range".into()));
        }
        for (i, &v) in self.one_hot.iter().enumerate() {
            let expect = if i == self.z { 1.0 } else { 0.0 };
            if v.as_f64() != expect {
                return Err(Error::Contract("malformed one-hot assignment".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PluginParams<F: Scalar> {
    pub config: OptionConfig,
    pub hidden_dim: usize,
    pub enc_w1: Tensor<F>,
    pub enc_b1: Tensor<F>,
    pub enc_w2: Tensor<F>,
    pub enc_b2: Tensor<F>,
    pub opt_emb: Tensor<F>,
    pub dec_w1: Tensor<F>,
    pub dec_b1: Tensor<F>,
    pub dec_w2: Tensor<F>,
    pub dec_b2: Tensor<F>,
    pub pol_w1: Tensor<F>,
    pub pol_b1: Tensor<F>,
    pub pol_w2: Tensor<F>,
    pub pol_b2: Tensor<F>,
}

impl<F: Scalar> PluginParams<F> {
    /// Hidden layers get small random weights; every final linear layer is
    /// zero-initialized so encoder and policy start uniform and the decoder
    /// bias starts as the exact 0-vector.
    pub fn init<R: Rng>(config: &OptionConfig, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = hidden_dim;
        let k = config.k;
        let (eh, dh, ph, dz) = (
            config.encoder_hidden,
            config.decoder_hidden,
            config.policy_hidden,
            config.option_embed_dim,
        );
        Ok(PluginParams {
            config: config.clone(),
            hidden_dim: d,
            enc_w1: Tensor::randn(vec![2 * d, eh], 0.02, rng),
            enc_b1: Tensor::zeros(vec![eh]),
            enc_w2: Tensor::zeros(vec![eh, k]),
            enc_b2: Tensor::zeros(vec![k]),
            // unit scale, not 0.02: the option embedding must be commensurate
            // with the layer-normed hidden state it is concatenated with, or
            // the decoder takes far too long to tell the options apart
            opt_emb: Tensor::randn(vec![k, dz], 1.0, rng),
            dec_w1: Tensor::randn(vec![d + dz, dh], 0.02, rng),
            dec_b1: Tensor::zeros(vec![dh]),
            dec_w2: Tensor::zeros(vec![dh, d]),
            dec_b2: Tensor::zeros(vec![d]),
            pol_w1: Tensor::randn(vec![d, ph], 0.02, rng),
            pol_b1: Tensor::zeros(vec![ph]),
            pol_w2: Tensor::zeros(vec![ph, k]),
            pol_b2: Tensor::zeros(vec![k]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("enc_w1".into(), &self.enc_w1),
            ("enc_b1".into(), &self.enc_b1),
            ("enc_w2".into(), &self.enc_w2),
            ("enc_b2".into(), &self.enc_b2),
            ("opt_emb".into(), &self.opt_emb),
            ("dec_w1".into(), &self.dec_w1),
            ("dec_b1".into(), &self.dec_b1),
            ("dec_w2".into(), &self.dec_w2),
            ("dec_b2".into(), &self.dec_b2),
            ("pol_w1".into(), &self.pol_w1),
            ("pol_b1".into(), &self.pol_b1),
            ("pol_w2".into(), &self.pol_w2),
            ("pol_b2".into(), &self.pol_b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("enc_w1".into(), &mut self.enc_w1),
            ("enc_b1".into(), &mut self.enc_b1),
            ("enc_w2".into(), &mut self.enc_w2),
            ("enc_b2".into(), &mut self.enc_b2),
            ("opt_emb".into(), &mut self.opt_emb),
            ("dec_w1".into(), &mut self.dec_w1),
            ("dec_b1".into(), &mut self.dec_b1),
            ("dec_w2".into(), &mut self.dec_w2),
            ("dec_b2".into(), &mut self.dec_b2),
            ("pol_w1".into(), &mut self.pol_w1),
            ("pol_b1".into(), &mut self.pol_b1),
            ("pol_w2".into(), &mut self.pol_w2),
            ("pol_b2".into(), &mut self.pol_b2),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn register(&self, tape: &mut Tape<F>, requires_grad: bool) -> PluginVars {
        PluginVars {
            enc_w1: tape.leaf(self.enc_w1.clone(), requires_grad),
            enc_b1: tape.leaf(self.enc_b1.clone(), requires_grad),
            enc_w2: tape.leaf(self.enc_w2.clone(), requires_grad),
            enc_b2: tape.leaf(self.enc_b2.clone(), requires_grad),
            opt_emb: tape.leaf(self.opt_emb.clone(), requires_grad),
            dec_w1: tape.leaf(self.dec_w1.clone(), requires_grad),
            dec_b1: tape.leaf(self.dec_b1.clone(), requires_grad),
            dec_w2: tape.leaf(self.dec_w2.clone(), requires_grad),
            dec_b2: tape.leaf(self.dec_b2.clone(), requires_grad),
            pol_w1: tape.leaf(self.pol_w1.clone(), requires_grad),
            pol_b1: tape.leaf(self.pol_b1.clone(), requires_grad),
            pol_w2: tape.leaf(self.pol_w2.clone(), requires_grad),
            pol_b2: tape.leaf(self.pol_b2.clone(), requires_grad),
            k: self.config.k,
        }
    }
}

pub struct PluginVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_w2: Var,
    pub enc_b2: Var,
    pub opt_emb: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_w2: Var,
    pub dec_b2: Var,
    pub pol_w1: Var,
    pub pol_b1: Var,
    pub pol_w2: Var,
    pub pol_b2: Var,
    pub k: usize,
}

impl PluginVars {
    pub fn vars_in_order(&self) -> Vec<Var> {
        vec![
            self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.opt_emb, self.dec_w1,
            self.dec_b1, self.dec_w2, self.dec_b2, self.pol_w1, self.pol_b1, self.pol_w2,
            self.pol_b2,
        ]
    }

    /// Encoder logits over K options for a batch of (h, e(y)) pairs.
    pub fn encoder_logits<F: Scalar>(&self, tape: &mut Tape<F>, h: Var, e_y: Var) -> Result<Var> {
        let x = tape.concat_cols(h, e_y)?;
        let x = tape.matmul(x, self.enc_w1)?;
        let x = tape.add_bias(x, self.enc_b1)?;
        let x = tape.gelu(x);
        let x = tape.matmul(x, self.enc_w2)?;
        tape.add_bias(x, self.enc_b2)
    }

    /// Policy logits from the hidden state alone (no access to the target).
    pub fn policy_logits<F: Scalar>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        let x = tape.matmul(h, self.pol_w1)?;
        let x = tape.add_bias(x, self.pol_b1)?;
        let x = tape.gelu(x);
        let x = tape.matmul(x, self.pol_w2)?;
        tape.add_bias(x, self.pol_b2)
    }

    /// Hidden-state bias for a batch of option rows: z_rows is [N x K]
    /// (one-hot or relaxed), h is [N x d].
    pub fn decode_bias<F: Scalar>(&self, tape: &mut Tape<F>, z_rows: Var, h: Var) -> Result<Var> {
        let opt_vec = tape.matmul(z_rows, self.opt_emb)?;
        let x = tape.concat_cols(h, opt_vec)?;
        let x = tape.matmul(x, self.dec_w1)?;
        let x = tape.add_bias(x, self.dec_b1)?;
        let x = tape.gelu(x);
        let x = tape.matmul(x, self.dec_w2)?;
        tape.add_bias(x, self.dec_b2)
    }

    /// lm_head(h + decode_bias(z, h)) through the shared projection.
    pub fn biased_logits<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        backbone: &BackboneVars,
        z_rows: Var,
        h: Var,
    ) -> Result<Var> {
        let bias = self.decode_bias(tape, z_rows, h)?;
        let biased = tape.add(h, bias)?;
        backbone.lm_logits(tape, biased)
    }

    /// Straight-through Gumbel sample from encoder logits: forward value is
    /// the hard one-hot of argmax(log q + g); backward follows the softened
    /// softmax((log q + g) / temperature).
    pub fn sample_latent_st<F: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<F>,
        enc_logits: Var,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let log_q = tape.log_softmax(enc_logits)?;
        let shape = tape.value(log_q).shape.clone();
        let noise = tape.constant(gumbel_noise(shape, rng));
        let perturbed = tape.add(log_q, noise)?;
        let scaled = tape.scale(perturbed, F::from_f64(1.0 / temperature));
        let soft = tape.softmax(scaled)?;
        tape.straight_through(soft)
    }
}

// ---------------------------------------------------------------------------
// Plain-value forward paths (no tape) used by evaluation and generation.
// Each is pinned to the tape path by an equivalence test below.
// ---------------------------------------------------------------------------

fn mlp2<F: Scalar>(
    x: &[F],
    w1: &Tensor<F>,
    b1: &Tensor<F>,
    w2: &Tensor<F>,
    b2: &Tensor<F>,
) -> Vec<F> {
    let (din, dh) = (w1.shape[0], w1.shape[1]);
    debug_assert_eq!(x.len(), din);
    let dout = w2.shape[1];
    let mut hid = b1.data.clone();
    for i in 0..din {
        let xv = x[i];
        let row = &w1.data[i * dh..(i + 1) * dh];
        for (hv, &wv) in hid.iter_mut().zip(row) {
            *hv = *hv + xv * wv;
        }
    }
    for v in hid.iter_mut() {
        *v = crate::tape::gelu_value(*v);
    }
    let mut out = b2.data.clone();
    for i in 0..dh {
        let hv = hid[i];
        let row = &w2.data[i * dout..(i + 1) * dout];
        for (ov, &wv) in out.iter_mut().zip(row) {
            *ov = *ov + hv * wv;
        }
    }
    out
}

/// Encoder distribution p(z | h_t, e(y_next)) for one position.
pub fn encode_latent<F: Scalar>(
    plugin: &PluginParams<F>,
    backbone: &BackboneParams<F>,
    h: &[F],
    y_next: Token,
) -> Result<LatentDistribution<F>> {
    let v = backbone.config.vocab_size;
    if y_next as usize >= v {
        return Err(Error::IndexOutOfRange {
            what: "target token",
            index: y_next as usize,
            limit: v,
        });
    }
    let d = plugin.hidden_dim;
    let e_y = &backbone.tok_emb.data[y_next as usize * d..(y_next as usize + 1) * d];
    let mut x = Vec::with_capacity(2 * d);
    x.extend_from_slice(h);
    x.extend_from_slice(e_y);
    let mut logits = mlp2(&x, &plugin.enc_w1, &plugin.enc_b1, &plugin.enc_w2, &plugin.enc_b2);
    softmax_row(&mut logits);
    Ok(LatentDistribution { probs: logits })
}

/// Policy distribution pi(z | h_t) for one position.
pub fn policy_latent<F: Scalar>(plugin: &PluginParams<F>, h: &[F]) -> LatentDistribution<F> {
    let mut logits = mlp2(h, &plugin.pol_w1, &plugin.pol_b1, &plugin.pol_w2, &plugin.pol_b2);
    softmax_row(&mut logits);
    LatentDistribution { probs: logits }
}

/// Hidden-state bias for one position and one hard option.
pub fn decode_bias<F: Scalar>(
    plugin: &PluginParams<F>,
    z: &LatentAssignment<F>,
    h: &[F],
) -> Result<Vec<F>> {
    z.validate()?;
    let dz = plugin.opt_emb.shape[1];
    let opt = &plugin.opt_emb.data[z.z * dz..(z.z + 1) * dz];
    let mut x = Vec::with_capacity(h.len() + dz);
    x.extend_from_slice(h);
    x.extend_from_slice(opt);
    Ok(mlp2(&x, &plugin.dec_w1, &plugin.dec_b1, &plugin.dec_w2, &plugin.dec_b2))
}

/// lm_head(h + decode_bias(z, h)) for one position.
pub fn biased_logits<F: Scalar>(
    plugin: &PluginParams<F>,
    backbone: &BackboneParams<F>,
    z: &LatentAssignment<F>,
    h: &[F],
) -> Result<Vec<F>> {
    let bias = decode_bias(plugin, z, h)?;
    let d = plugin.hidden_dim;
    let v = backbone.config.vocab_size;
    let mut biased = Vec::with_capacity(d);
    for i in 0..d {
        biased.push(h[i] + bias[i]);
    }
    let mut logits = vec![F::zero(); v];
    crate::tensor::matmul_nt(&biased, &backbone.tok_emb.data, 1, d, v, &mut logits);
    Ok(logits)
}

/// Baseline logits lm_head(h) for one position.
pub fn baseline_logits_row<F: Scalar>(backbone: &BackboneParams<F>, h: &[F]) -> Vec<F> {
    let d = backbone.config.hidden_dim;
    let v = backbone.config.vocab_size;
    let mut logits = vec![F::zero(); v];
    crate::tensor::matmul_nt(h, &backbone.tok_emb.data, 1, d, v, &mut logits);
    logits
}

/// Sample a hard option from a latent distribution via Gumbel-max.
pub fn sample_latent<F: Scalar, R: Rng>(
    dist: &LatentDistribution<F>,
    rng: &mut R,
) -> Result<LatentAssignment<F>> {
    if dist.probs.iter().all(|p| p.is_nan() || *p <= F::zero()) {
        return Err(Error::Numeric("sample_latent: no positive probability mass".into()));
    }
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &p) in dist.probs.iter().enumerate() {
        let p = p.as_f64();
        if p <= 0.0 || p.is_nan() {
            continue;
        }
        let v = p.ln() + gumbel_from_uniform(rng.gen::<f64>());
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    LatentAssignment::new(best, dist.probs.len(), AssignmentSource::Sampled)
}

/// Exact mixture over all K options: sum_z weights[z] * softmax(biased_logits(h, z)).
pub fn mixture_next_token<F: Scalar>(
    plugin: &PluginParams<F>,
    backbone: &BackboneParams<F>,
    weights: &LatentDistribution<F>,
    h: &[F],
) -> Result<Vec<F>> {
    weights.validate()?;
    let k = plugin.config.k;
    if weights.probs.len() != k {
        return Err(Error::Contract(format!(
            "mixture weights have {} entries for K = {k}",
            weights.probs.len()
        )));
    }
    let v = backbone.config.vocab_size;
    let mut mix = vec![F::zero(); v];
    for z in 0..k {
        let w = weights.probs[z];
        if w == F::zero() {
            continue;
        }
        let assign = LatentAssignment::new(z, k, AssignmentSource::Forced)?;
        let mut probs = biased_logits(plugin, backbone, &assign, h)?;
        softmax_row(&mut probs);
        for (m, &p) in mix.iter_mut().zip(&probs) {
            *m = *m + w * p;
        }
    }
    Ok(mix)
}

/// Latent selection rule during generation.
#[derive(Debug, Clone)]
pub enum LatentMode {
    PolicySample,
    PolicyArgmax,
    Fixed(usize),
    PerStepForced(Vec<usize>),
}

/// Token selection rule during generation.
#[derive(Debug, Clone, Copy)]
pub enum Decoding {
    Greedy,
    Sample(f64),
}

#[derive(Debug, Clone)]
pub struct GenerationStep {
    pub z: usize,
    pub token: Token,
}

/// Autoregressive rollout: at each step compute h_t, select an option per
/// `latent_mode`, then take a token from the biased logits per `decoding`.
pub fn generate<F: Scalar, R: Rng>(
    plugin: &PluginParams<F>,
    backbone: &BackboneParams<F>,
    prefix: &[Token],
    steps: usize,
    latent_mode: &LatentMode,
    decoding: Decoding,
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<GenerationStep>)> {
    if prefix.is_empty() {
        return Err(Error::Contract("generate: prefix must be nonempty".into()));
    }
    if prefix.len() + steps > backbone.config.context_len {
        return Err(Error::Contract(format!(
            "generate: prefix {} + steps {steps} exceeds context_len {}",
            prefix.len(),
            backbone.config.context_len
        )));
    }
    if let LatentMode::PerStepForced(zs) = latent_mode {
        if zs.len() != steps {
            return Err(Error::Contract(format!(
                "generate: {} forced latents for {steps} steps",
                zs.len()
            )));
        }
    }
    let k = plugin.config.k;
    let d = backbone.config.hidden_dim;
    let mut tokens = prefix.to_vec();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let hs = crate::backbone::hidden_states(backbone, &tokens)?;
        let h = &hs.data[(tokens.len() - 1) * d..tokens.len() * d];
        let z = match latent_mode {
            LatentMode::PolicySample => {
                let dist = policy_latent(plugin, h);
                sample_latent(&dist, rng)?
            }
            LatentMode::PolicyArgmax => {
                let dist = policy_latent(plugin, h);
                LatentAssignment::new(dist.argmax(), k, AssignmentSource::Argmax)?
            }
            LatentMode::Fixed(z) => LatentAssignment::new(*z, k, AssignmentSource::Forced)?,
            LatentMode::PerStepForced(zs) => {
                LatentAssignment::new(zs[step], k, AssignmentSource::Forced)?
            }
        };
        let logits = biased_logits(plugin, backbone, &z, h)?;
        let token = match decoding {
            Decoding::Greedy => argmax(&logits) as Token,
            Decoding::Sample(temperature) => {
                if temperature <= 0.0 {
                    return Err(Error::Contract("sampling temperature must be positive".into()));
                }
                let mut probs: Vec<F> = logits
                    .iter()
                    .map(|&l| l * F::from_f64(1.0 / temperature))
                    .collect();
                softmax_row(&mut probs);
                let dist = LatentDistribution { probs };
                sample_latent(&dist, rng)?.z as Token
            }
        };
        trace.push(GenerationStep { z: z.z, token });
        tokens.push(token);
    }
    Ok((tokens, trace))
}
