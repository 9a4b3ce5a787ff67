//! Training objective: next-token cross-entropy through the biased logits,
//! a KL-to-uniform regularizer on the encoder distribution with an adaptive
//! multiplier, and a behavioral-cloning loss that trains the policy to imitate
//! the encoder's argmax choices.
//!
//! Gradient-flow contracts (each pinned by a test):
//! - the cross-entropy term never reaches the policy head,
//! - the KL term never reaches the decoder,
//! - the policy term never reaches the encoder (its targets are detached).

use crate::backbone::BackboneVars;
use crate::datagen::Token;
use crate::error::{Error, Result};
use crate::plugin::{Estimator, PluginVars};
use crate::scalar::Scalar;
use crate::tape::{argmax, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KlControllerConfig {
    #[serde(default = "default_target")]
    pub target: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
}

fn default_target() -> f64 {
    0.2
}
fn default_rate() -> f64 {
    0.01
}
fn default_alpha_init() -> f64 {
    1.0
}
fn default_alpha_min() -> f64 {
    1e-4
}
fn default_alpha_max() -> f64 {
    1e3
}

impl Default for KlControllerConfig {
    fn default() -> Self {
        KlControllerConfig {
            target: default_target(),
            rate: default_rate(),
            alpha_init: default_alpha_init(),
            alpha_min: default_alpha_min(),
            alpha_max: default_alpha_max(),
        }
    }
}

impl KlControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0) || !(self.rate > 0.0) {
            return Err(Error::Config("KL target and rate must be positive".into()));
        }
        if !(self.alpha_min > 0.0) || self.alpha_min > self.alpha_max {
            return Err(Error::Config("need 0 < alpha_min <= alpha_max".into()));
        }
        if self.alpha_init < self.alpha_min || self.alpha_init > self.alpha_max {
            return Err(Error::Config("alpha_init outside [alpha_min, alpha_max]".into()));
        }
        Ok(())
    }
}

/// Multiplicative controller: after every step the KL weight moves by
/// exp(rate * (observed - target)), clamped to [alpha_min, alpha_max], so it
/// grows while the encoder is too confident and shrinks once the mean KL
/// drops under the target.
#[derive(Debug, Clone)]
pub struct KlController {
    pub config: KlControllerConfig,
    pub alpha: f64,
}

impl KlController {
    pub fn new(config: KlControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(KlController {
            alpha: config.alpha_init,
            config,
        })
    }

    pub fn from_state(config: KlControllerConfig, alpha: f64) -> Result<Self> {
        config.validate()?;
        if !alpha.is_finite() || alpha < config.alpha_min || alpha > config.alpha_max {
            return Err(Error::Checkpoint(format!(
                "stored KL weight {alpha} outside [{}, {}]",
                config.alpha_min, config.alpha_max
            )));
        }
        Ok(KlController { config, alpha })
    }

    pub fn adapt(&mut self, observed_kl: f64) -> Result<f64> {
        // low-precision forward passes can report a KL a few ulps below zero
        if !observed_kl.is_finite() || observed_kl < -1e-6 {
            return Err(Error::Numeric(format!(
                "observed KL {observed_kl} is not a finite nonnegative value"
            )));
        }
        let observed_kl = observed_kl.max(0.0);
        let next = self.alpha * (self.config.rate * (observed_kl - self.config.target)).exp();
        self.alpha = next.clamp(self.config.alpha_min, self.config.alpha_max);
        Ok(self.alpha)
    }
}

/// KL(q || uniform over k) = ln k - H(q), in nats. Zero-probability entries
/// contribute nothing.
pub fn kl_to_uniform(probs: &[f64]) -> Result<f64> {
    let k = probs.len();
    if k == 0 {
        return Err(Error::Contract("kl_to_uniform of empty distribution".into()));
    }
    let mut sum = 0.0;
    let mut kl = 0.0;
    for &p in probs {
        if p.is_nan() || p < 0.0 {
            return Err(Error::Contract("kl_to_uniform: distribution off the simplex".into()));
        }
        sum += p;
        if p > 0.0 {
            kl += p * (p * k as f64).ln();
        }
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("kl_to_uniform: mass sums to {sum}")));
    }
    Ok(kl.max(0.0))
}

/// The three loss terms plus their weighted sum, as live tape nodes.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
    pub policy: Var,
}

/// Per-step scalar record emitted to the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub ce: f64,
    pub kl: f64,
    pub policy: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Build total = CE + alpha * KL + policy on the tape for one batch.
///
/// `h` is an [N x d] constant of frozen-backbone hidden states and `targets`
/// the N next tokens. The cross-entropy path either samples one option per
/// position (straight-through) or marginalizes over all K exactly.
pub fn build_losses<F: Scalar, R: Rng>(
    tape: &mut Tape<F>,
    bvars: &BackboneVars,
    pvars: &PluginVars,
    h: Var,
    targets: &[Token],
    estimator: Estimator,
    gumbel_temperature: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<LossVars> {
    let n = tape.value(h).rows();
    if targets.len() != n {
        return Err(Error::Contract(format!(
            "build_losses: {} targets for {n} positions",
            targets.len()
        )));
    }
    let k = pvars.k;
    let target_idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();

    let e_y = tape.gather_rows(bvars.tok_emb, &target_idx)?;
    let enc_logits = pvars.encoder_logits(tape, h, e_y)?;
    let q = tape.softmax(enc_logits)?;

    // KL(q || uniform): mean over positions of sum_z q ln(q k).
    let log_q = tape.log_softmax(enc_logits)?;
    let shifted = tape.add_scalar(log_q, F::from_f64((k as f64).ln()));
    let prod = tape.mul(q, shifted)?;
    let per_pos = tape.row_sum(prod);
    let kl = tape.mean_all(per_pos);

    let ce = match estimator {
        Estimator::StraightThroughGumbel => {
            let z = pvars.sample_latent_st(tape, enc_logits, gumbel_temperature, rng)?;
            let logits = pvars.biased_logits(tape, bvars, z, h)?;
            tape.cross_entropy_mean(logits, &target_idx, None)?
        }
        Estimator::ExactMarginal => {
            let mut mix: Option<Var> = None;
            for z in 0..k {
                let mut one_hot = Tensor::zeros(vec![n, k]);
                for r in 0..n {
                    one_hot.data[r * k + z] = F::one();
                }
                let z_rows = tape.constant(one_hot);
                let logits = pvars.biased_logits(tape, bvars, z_rows, h)?;
                let probs = tape.softmax(logits)?;
                let p_y = tape.gather_per_row(probs, &target_idx)?;
                let q_col = tape.slice_cols(q, z, 1)?;
                let q_col = tape.reshape(q_col, vec![n])?;
                let term = tape.mul(q_col, p_y)?;
                mix = Some(match mix {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let mix = mix.expect("k >= 2");
            let log_mix = tape.log(mix)?;
            let mean = tape.mean_all(log_mix);
            tape.neg(mean)
        }
    };

    // Behavioral cloning: the policy imitates the encoder's argmax. Targets
    // are plain indices read off the forward values, so no gradient reaches
    // the encoder; ties resolve to the lowest option id.
    let z_star: Vec<usize> = {
        let qv = tape.value(q);
        (0..n).map(|r| argmax(&qv.data[r * k..(r + 1) * k])).collect()
    };
    let pol_logits = pvars.policy_logits(tape, h)?;
    let policy = tape.cross_entropy_mean(pol_logits, &z_star, None)?;

    let weighted_kl = tape.scale(kl, F::from_f64(alpha));
    let ce_kl = tape.add(ce, weighted_kl)?;
    let total = tape.add(ce_kl, policy)?;
    Ok(LossVars { total, ce, kl, policy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};
    use crate::gradcheck::check_gradients;
    use crate::plugin::{OptionConfig, PluginParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (BackboneParams<f64>, PluginParams<f64>, Tensor<f64>, Vec<Token>) {
        let bc = BackboneConfig {
            vocab_size: 12,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 8,
            tied_embeddings: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let backbone = BackboneParams::<f64>::init(&bc, &mut rng).unwrap();
        let oc = OptionConfig {
            k: 4,
            encoder_hidden: 12,
            decoder_hidden: 12,
            policy_hidden: 12,
            option_embed_dim: 6,
            estimator: Estimator::ExactMarginal,
            gumbel_temperature: 1.0,
        };
        let mut plugin = PluginParams::<f64>::init(&oc, bc.hidden_dim, &mut rng).unwrap();
        // perturb the zero-init output layers so gradients are generic
        for (_, t) in plugin.named_tensors_mut() {
            for v in t.data.iter_mut() {
                *v += 0.05 * rng.gen::<f64>() - 0.025;
            }
        }
        let h = crate::backbone::hidden_states(&backbone, &[0, 3, 5, 2, 7]).unwrap();
        let targets: Vec<Token> = vec![3, 5, 2, 7, 1];
        (backbone, plugin, h, targets)
    }


    #[test]
    fn controller_moves_alpha_toward_target() {
        let mut c = KlController::new(KlControllerConfig::default()).unwrap();
        let a1 = c.adapt(1.2).unwrap();
        assert!((a1 - (0.01f64 * (1.2 - 0.2)).exp()).abs() < 1e-12);
        let a2 = c.adapt(0.0).unwrap();
        assert!(a2 < a1);
        // clamping at both ends
        let mut lo = KlController::new(KlControllerConfig::default()).unwrap();
        for _ in 0..100_000 {
            lo.adapt(0.0).unwrap();
        }
        assert_eq!(lo.alpha, 1e-4);
        let mut hi = KlController::new(KlControllerConfig::default()).unwrap();
        for _ in 0..100_000 {
            hi.adapt(100.0).unwrap();
        }
        assert_eq!(hi.alpha, 1e3);
        assert!(c.adapt(f64::NAN).is_err());
    }

    #[test]
    fn kl_to_uniform_known_values() {
        let k = 10usize;
        assert!(kl_to_uniform(&vec![0.1; k]).unwrap().abs() < 1e-12);
        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let kl = kl_to_uniform(&onehot).unwrap();
        assert!((kl - (k as f64).ln()).abs() < 1e-12);
        assert!(kl_to_uniform(&[0.5, 0.6]).is_err());
        assert!(kl_to_uniform(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn tape_kl_matches_plain_kl() {
        let (backbone, plugin, h, targets) = tiny();
        let mut tape = Tape::<f64>::new();
        let bvars = backbone.register(&mut tape, false);
        let pvars = plugin.register(&mut tape, false);
        let h_var = tape.constant(h.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let losses = build_losses(
            &mut tape, &bvars, &pvars, h_var, &targets,
            Estimator::ExactMarginal, 1.0, 0.7, &mut rng,
        )
        .unwrap();
        // recompute the KL by hand from the plain encoder path
        let d = backbone.config.hidden_dim;
        let mut manual = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let row = &h.data[t * d..(t + 1) * d];
            let q = crate::plugin::encode_latent(&plugin, &backbone, row, y).unwrap();
            manual += kl_to_uniform(&q.probs).unwrap();
        }
        manual /= targets.len() as f64;
        assert!((tape.value(losses.kl).item() - manual).abs() < 1e-10);
        // total = ce + alpha*kl + policy
        let total = tape.value(losses.total).item();
        let parts = tape.value(losses.ce).item()
            + 0.7 * tape.value(losses.kl).item()
            + tape.value(losses.policy).item();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradcheck_exact_marginal() {
        let (backbone, plugin, h, targets) = tiny();
        let leaves: Vec<Tensor<f64>> =
            plugin.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let k = plugin.config.k;
        let report = check_gradients(&leaves, 1e-5, |tape, vars| {
            let bvars = backbone.register(tape, false);
            let pvars = PluginVars {
                enc_w1: vars[0], enc_b1: vars[1], enc_w2: vars[2], enc_b2: vars[3],
                opt_emb: vars[4], dec_w1: vars[5], dec_b1: vars[6], dec_w2: vars[7],
                dec_b2: vars[8], pol_w1: vars[9], pol_b1: vars[10], pol_w2: vars[11],
                pol_b2: vars[12], k,
            };
            let h_var = tape.constant(h.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let losses = build_losses(
                tape, &bvars, &pvars, h_var, &targets,
                Estimator::ExactMarginal, 1.0, 0.5, &mut rng,
            )?;
            Ok(losses.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    fn grads_by_name(
        backbone: &BackboneParams<f64>,
        plugin: &PluginParams<f64>,
        h: &Tensor<f64>,
        targets: &[Token],
        pick: fn(&LossVars) -> Var,
    ) -> Vec<(String, Option<Tensor<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let bvars = backbone.register(&mut tape, false);
        let pvars = plugin.register(&mut tape, true);
        let h_var = tape.constant(h.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let losses = build_losses(
            &mut tape, &bvars, &pvars, h_var, targets,
            Estimator::ExactMarginal, 1.0, 0.5, &mut rng,
        )
        .unwrap();
        let loss = pick(&losses);
        tape.backward(loss).unwrap();
        plugin
            .named_tensors()
            .iter()
            .zip(pvars.vars_in_order())
            .map(|((name, _), v)| (name.clone(), tape.grad(v)))
            .collect()
    }

    fn grad_norm(g: &Option<Tensor<f64>>) -> f64 {
        g.as_ref().map_or(0.0, |t| t.data.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn stop_gradient_contracts() {
        let (backbone, plugin, h, targets) = tiny();
        // policy loss must not reach encoder or decoder parameters
        for (name, g) in grads_by_name(&backbone, &plugin, &h, &targets, |l| l.policy) {
            let n = grad_norm(&g);
            if name.starts_with("pol_") {
                assert!(n > 0.0, "{name} should be trained by the policy loss");
            } else {
                assert_eq!(n, 0.0, "{name} leaked into the policy loss");
            }
        }
        // KL must not reach decoder or policy parameters
        for (name, g) in grads_by_name(&backbone, &plugin, &h, &targets, |l| l.kl) {
            let n = grad_norm(&g);
            if name.starts_with("enc_") {
                assert!(n > 0.0, "{name} should be trained by the KL term");
            } else {
                assert_eq!(n, 0.0, "{name} leaked into the KL term");
            }
        }
        // CE must not reach the policy head
        for (name, g) in grads_by_name(&backbone, &plugin, &h, &targets, |l| l.ce) {
            let n = grad_norm(&g);
            if name.starts_with("pol_") {
                assert_eq!(n, 0.0, "{name} leaked into the CE term");
            }
        }
    }

    // With K = 2 the straight-through estimator should agree with exact
    // marginalization in expectation: gradients averaged over many sampled
    // tapes match the exact gradient in sign and roughly in magnitude.
    #[test]
    fn straight_through_tracks_exact_marginal() {
        let (backbone, plugin, h, targets) = {
            let (b, mut p, h, t) = tiny();
            p.config.k = 2;
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            p.enc_w2 = Tensor::randn(vec![p.config.encoder_hidden, 2], 0.3, &mut rng);
            p.enc_b2 = Tensor::zeros(vec![2]);
            p.pol_w2 = Tensor::randn(vec![p.config.policy_hidden, 2], 0.3, &mut rng);
            p.pol_b2 = Tensor::zeros(vec![2]);
            p.opt_emb = Tensor::randn(vec![2, p.config.option_embed_dim], 0.3, &mut rng);
            (b, p, h, t)
        };
        let run = |est: Estimator, seed: u64| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let bvars = backbone.register(&mut tape, false);
            let pvars = plugin.register(&mut tape, true);
            let h_var = tape.constant(h.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let losses = build_losses(
                &mut tape, &bvars, &pvars, h_var, &targets, est, 1.0, 0.0, &mut rng,
            )
            .unwrap();
            tape.backward(losses.ce).unwrap();
            tape.grad(pvars.dec_w1).unwrap().data
        };
        let exact = run(Estimator::ExactMarginal, 0);
        let n = exact.len();
        let mut avg = vec![0.0; n];
        let trials = 400;
        for s in 0..trials {
            let g = run(Estimator::StraightThroughGumbel, 1000 + s);
            for i in 0..n {
                avg[i] += g[i] / trials as f64;
            }
        }
        let dot: f64 = exact.iter().zip(&avg).map(|(a, b)| a * b).sum();
        let ne: f64 = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na: f64 = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (ne * na);
        assert!(cosine > 0.8, "cosine similarity {cosine}");
        assert!(
            (na / ne) > 0.5 && (na / ne) < 2.0,
            "magnitude ratio {}",
            na / ne
        );
    }
}
