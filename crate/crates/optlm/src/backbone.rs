//! Small decoder-only autoregressive transformer. It is trained once per
//! experiment suite, then frozen; the plug-in only ever consumes its input
//! embedding e(.), the final hidden states h_t, and the shared lm_head.
//!
//! Pre-norm blocks, GELU feed-forward, learned absolute positions, bias-free
//! lm_head tied to the input embedding table.

use crate::datagen::{LabeledCorpus, Token};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.context_len == 0
        {
            return Err(Error::Config("backbone config fields must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size > 512 {
            return Err(Error::Config("vocab_size exceeds desk-scale limit 512".into()));
        }
        if self.context_len > 256 {
            return Err(Error::Config("context_len exceeds desk-scale limit 256".into()));
        }
        if !self.tied_embeddings {
            return Err(Error::Config(
                "untied embeddings are not supported; lm_head is the tied table".into(),
            ));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<F: Scalar> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_ff1: Tensor<F>,
    pub b_ff1: Tensor<F>,
    pub w_ff2: Tensor<F>,
    pub b_ff2: Tensor<F>,
}

/// All backbone weights. `tok_emb` doubles as the bias-free lm_head
/// (tied embeddings), so the baseline and option paths share it by identity.
#[derive(Debug, Clone)]
pub struct BackboneParams<F: Scalar> {
    pub config: BackboneConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub ln_f_gain: Tensor<F>,
    pub ln_f_bias: Tensor<F>,
}

impl<F: Scalar> BackboneParams<F> {
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let ff = config.ffn_dim();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(vec![d], F::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                w_q: Tensor::randn(vec![d, d], 0.02, rng),
                w_k: Tensor::randn(vec![d, d], 0.02, rng),
                w_v: Tensor::randn(vec![d, d], 0.02, rng),
                w_o: Tensor::randn(vec![d, d], 0.02, rng),
                ln2_gain: Tensor::full(vec![d], F::one()),
                ln2_bias: Tensor::zeros(vec![d]),
                w_ff1: Tensor::randn(vec![d, ff], 0.02, rng),
                b_ff1: Tensor::zeros(vec![ff]),
                w_ff2: Tensor::randn(vec![ff, d], 0.02, rng),
                b_ff2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(BackboneParams {
            config: config.clone(),
            tok_emb: Tensor::randn(vec![v, d], 0.02, rng),
            pos_emb: Tensor::randn(vec![config.context_len, d], 0.01, rng),
            layers,
            ln_f_gain: Tensor::full(vec![d], F::one()),
            ln_f_bias: Tensor::zeros(vec![d]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.w_q"), &l.w_q));
            out.push((format!("layer{i}.w_k"), &l.w_k));
            out.push((format!("layer{i}.w_v"), &l.w_v));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1));
            out.push((format!("layer{i}.b_ff1"), &l.b_ff1));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2));
            out.push((format!("layer{i}.b_ff2"), &l.b_ff2));
        }
        out.push(("ln_f_gain".into(), &self.ln_f_gain));
        out.push(("ln_f_bias".into(), &self.ln_f_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.w_q"), &mut l.w_q));
            out.push((format!("layer{i}.w_k"), &mut l.w_k));
            out.push((format!("layer{i}.w_v"), &mut l.w_v));
            out.push((format!("layer{i}.w_o"), &mut l.w_o));
            out.push((format!("layer{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
            out.push((format!("layer{i}.w_ff1"), &mut l.w_ff1));
            out.push((format!("layer{i}.b_ff1"), &mut l.b_ff1));
            out.push((format!("layer{i}.w_ff2"), &mut l.w_ff2));
            out.push((format!("layer{i}.b_ff2"), &mut l.b_ff2));
        }
        out.push(("ln_f_gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f_bias".into(), &mut self.ln_f_bias));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape handles for every backbone tensor, registered once per tape.
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
    config: BackboneConfig,
}

pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

impl<F: Scalar> BackboneParams<F> {
    pub fn register(&self, tape: &mut Tape<F>, requires_grad: bool) -> BackboneVars {
        BackboneVars {
            tok_emb: tape.leaf(self.tok_emb.clone(), requires_grad),
            pos_emb: tape.leaf(self.pos_emb.clone(), requires_grad),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gain: tape.leaf(l.ln1_gain.clone(), requires_grad),
                    ln1_bias: tape.leaf(l.ln1_bias.clone(), requires_grad),
                    w_q: tape.leaf(l.w_q.clone(), requires_grad),
                    w_k: tape.leaf(l.w_k.clone(), requires_grad),
                    w_v: tape.leaf(l.w_v.clone(), requires_grad),
                    w_o: tape.leaf(l.w_o.clone(), requires_grad),
                    ln2_gain: tape.leaf(l.ln2_gain.clone(), requires_grad),
                    ln2_bias: tape.leaf(l.ln2_bias.clone(), requires_grad),
                    w_ff1: tape.leaf(l.w_ff1.clone(), requires_grad),
                    b_ff1: tape.leaf(l.b_ff1.clone(), requires_grad),
                    w_ff2: tape.leaf(l.w_ff2.clone(), requires_grad),
                    b_ff2: tape.leaf(l.b_ff2.clone(), requires_grad),
                })
                .collect(),
            ln_f_gain: tape.leaf(self.ln_f_gain.clone(), requires_grad),
            ln_f_bias: tape.leaf(self.ln_f_bias.clone(), requires_grad),
            config: self.config.clone(),
        }
    }
}

impl BackboneVars {
    /// Token embedding rows e(token): [T x d].
    pub fn embed<F: Scalar>(&self, tape: &mut Tape<F>, tokens: &[Token]) -> Result<Var> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        for &i in &idx {
            if i >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: i,
                    limit: self.config.vocab_size,
                });
            }
        }
        tape.gather_rows(self.tok_emb, &idx)
    }

    /// Final hidden states h_t for every position: [T x d]. Causal by
    /// construction of the masked attention.
    pub fn forward_hidden<F: Scalar>(&self, tape: &mut Tape<F>, tokens: &[Token]) -> Result<Var> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Contract("forward_hidden: minimum input length is 1".into()));
        }
        if t_len > self.config.context_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds context_len {}",
                t_len, self.config.context_len
            )));
        }
        let d = self.config.hidden_dim;
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let tok = self.embed(tape, tokens)?;
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.gather_rows(self.pos_emb, &positions)?;
        let mut h = tape.add(tok, pos)?;

        for layer in &self.layers {
            let normed = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias)?;
            let q = tape.matmul(normed, layer.w_q)?;
            let k = tape.matmul(normed, layer.w_k)?;
            let v = tape.matmul(normed, layer.w_v)?;
            let mut head_outs: Option<Var> = None;
            for hd in 0..n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.causal_masked_softmax(scores)?;
                let ctx = tape.matmul(attn, vh)?;
                head_outs = Some(match head_outs {
                    None => ctx,
                    Some(acc) => tape.concat_cols(acc, ctx)?,
                });
            }
            let attn_out = tape.matmul(head_outs.unwrap(), layer.w_o)?;
            h = tape.add(h, attn_out)?;

            let normed2 = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias)?;
            let ff = tape.matmul(normed2, layer.w_ff1)?;
            let ff = tape.add_bias(ff, layer.b_ff1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, layer.w_ff2)?;
            let ff = tape.add_bias(ff, layer.b_ff2)?;
            h = tape.add(h, ff)?;
        }
        tape.layer_norm(h, self.ln_f_gain, self.ln_f_bias)
    }

    /// Vocabulary projection through the tied embedding table: [.. x d] -> [.. x V].
    /// The identical matrix serves the baseline path and the biased path.
    pub fn lm_logits<F: Scalar>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        tape.matmul_nt(h, self.tok_emb)
    }
}

/// Run the backbone outside any training tape and return the final hidden
/// states as a plain tensor.
pub fn hidden_states<F: Scalar>(params: &BackboneParams<F>, tokens: &[Token]) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let h = vars.forward_hidden(&mut tape, tokens)?;
    Ok(tape.value(h).clone())
}

/// Baseline logits lm_head(h_t) for every position, outside any tape.
pub fn baseline_logits<F: Scalar>(
    params: &BackboneParams<F>,
    tokens: &[Token],
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let h = vars.forward_hidden(&mut tape, tokens)?;
    let logits = vars.lm_logits(&mut tape, h)?;
    Ok(tape.value(logits).clone())
}

/// Settings for manufacturing a frozen backbone at desk scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub seed: u64,
}

fn default_clip() -> f64 {
    1.0
}

/// Standard next-token CE training of the backbone. The returned parameters
/// are frozen by the caller for all plug-in experiments.
pub fn pretrain_backbone<F: Scalar>(
    corpus: &LabeledCorpus,
    config: &BackboneConfig,
    settings: &PretrainSettings,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<BackboneParams<F>> {
    config.validate()?;
    if corpus.vocab_size > config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} exceeds backbone vocab {}",
            corpus.vocab_size, config.vocab_size
        )));
    }
    for seq in &corpus.sequences {
        if seq.tokens.len() > config.context_len {
            return Err(Error::Contract(format!(
                "corpus sequence length {} exceeds context_len {}",
                seq.tokens.len(),
                config.context_len
            )));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(settings.seed);
    use rand::SeedableRng;
    let mut params = BackboneParams::<F>::init(config, &mut rng)?;
    let mut opt = crate::train::Adam::new(
        params.named_tensors().iter().map(|(_, t)| t.numel()).collect(),
        settings.learning_rate,
    );

    let n = corpus.sequences.len();
    let mut initial_loss = None;
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    for step in 0..settings.steps {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let mut total: Option<Var> = None;
        let mut total_positions = 0usize;
        for _ in 0..settings.batch_size {
            let seq = &corpus.sequences[rng.gen_range(0..n)];
            let t_len = seq.tokens.len();
            let h = vars.forward_hidden(&mut tape, &seq.tokens)?;
            // predict token t+1 from h_t: drop the last row
            let h_pred = tape.slice_rows(h, 0, t_len - 1)?;
            let logits = vars.lm_logits(&mut tape, h_pred)?;
            let targets: Vec<usize> = seq.tokens[1..].iter().map(|&t| t as usize).collect();
            let ce = tape.cross_entropy_mean(logits, &targets, None)?;
            let weighted = tape.scale(ce, F::from_f64((t_len - 1) as f64));
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
            total_positions += t_len - 1;
        }
        let loss = tape.scale(total.unwrap(), F::from_f64(1.0 / total_positions as f64));
        let loss_val = tape.value(loss).item().as_f64();
        if loss_val.is_nan() {
            return Err(Error::Numeric(format!("NaN pretraining loss at step {step}")));
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor<F>> = Vec::new();
        {
            let named = params.named_tensors();
            let vars_list = vars_in_order(&vars);
            debug_assert_eq!(named.len(), vars_list.len());
            for (i, v) in vars_list.iter().enumerate() {
                grads.push(
                    tape.grad(*v)
                        .unwrap_or_else(|| Tensor::zeros(named[i].1.shape.clone())),
                );
            }
        }
        crate::train::clip_global_norm(&mut grads, settings.grad_clip);
        {
            let mut named = params.named_tensors_mut();
            opt.step(
                named.iter_mut().map(|(_, t)| &mut **t).collect::<Vec<_>>(),
                &grads,
            );
        }

        initial_loss.get_or_insert(loss_val);
        recent.push_back(loss_val);
        if recent.len() > 50 {
            recent.pop_front();
        }
        if step >= settings.steps / 5 && step % 50 == 0 {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            if mean > initial_loss.unwrap() {
                return Err(Error::Diverged(format!(
                    "pretraining loss {mean:.4} above initial {:.4} at step {step}",
                    initial_loss.unwrap()
                )));
            }
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(step, loss_val);
        }
    }
    Ok(params)
}

fn vars_in_order(vars: &BackboneVars) -> Vec<Var> {
    let mut out = vec![vars.tok_emb, vars.pos_emb];
    for l in &vars.layers {
        out.extend([
            l.ln1_gain, l.ln1_bias, l.w_q, l.w_k, l.w_v, l.w_o, l.ln2_gain, l.ln2_bias, l.w_ff1,
            l.b_ff1, l.w_ff2, l.b_ff2,
        ]);
    }
    out.extend([vars.ln_f_gain, vars.ln_f_bias]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 16,
            hidden_dim: 32,
            n_layers: 2,
            n_heads: 4,
            context_len: 16,
            tied_embeddings: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c2 = tiny_config();
        c2.vocab_size = 1024;
        assert!(c2.validate().is_err());
    }

    #[test]
    fn embed_rows_match_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BackboneParams::<f64>::init(&tiny_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let e = vars.embed(&mut tape, &[0, 3, 3]).unwrap();
        let v = tape.value(e);
        assert_eq!(&v.data[..32], &params.tok_emb.data[..32]);
        // identical tokens -> identical rows
        assert_eq!(&v.data[32..64], &v.data[64..96]);
        assert!(vars.embed(&mut tape, &[16]).is_err());
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = BackboneParams::<f64>::init(&tiny_config(), &mut rng).unwrap();
        let a = hidden_states(&params, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        let b = hidden_states(&params, &[1, 2, 3, 4, 9, 6, 7]).unwrap();
        assert_eq!(a.shape, vec![7, 32]);
        let d = 32;
        // h_t for t < 4 bit-identical, t >= 4 differs
        assert_eq!(&a.data[..4 * d], &b.data[..4 * d]);
        assert_ne!(&a.data[4 * d..5 * d], &b.data[4 * d..5 * d]);
    }

    #[test]
    fn forward_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = BackboneParams::<f64>::init(&tiny_config(), &mut rng).unwrap();
        assert!(hidden_states(&params, &[]).is_err());
        assert!(hidden_states(&params, &vec![1; 17]).is_err());
        assert!(hidden_states(&params, &[1]).is_ok());
    }

    #[test]
    fn lm_logits_is_linear_and_biasfree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::<f64>::init(&tiny_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let zero = tape.constant(Tensor::zeros(vec![1, 32]));
        let l0 = vars.lm_logits(&mut tape, zero).unwrap();
        assert!(tape.value(l0).data.iter().all(|&v| v == 0.0));

        let a = tape.constant(Tensor::randn(vec![1, 32], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(vec![1, 32], 1.0, &mut rng));
        let ab = tape.add(a, b).unwrap();
        let la = vars.lm_logits(&mut tape, a).unwrap();
        let lb = vars.lm_logits(&mut tape, b).unwrap();
        let lab = vars.lm_logits(&mut tape, ab).unwrap();
        let sum = tape.add(la, lb).unwrap();
        for (x, y) in tape.value(lab).data.iter().zip(&tape.value(sum).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_gradcheck_through_full_forward() {
        // gradient of a CE loss through the whole transformer wrt a few leaves
        let config = BackboneConfig {
            vocab_size: 8,
            hidden_dim: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 8,
            tied_embeddings: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::<f64>::init(&config, &mut rng).unwrap();
        let tokens: Vec<Token> = vec![1, 5, 2, 7];
        // check wrt w_q of layer 0 and tok_emb
        let res = crate::gradcheck::check_gradients(
            &[params.layers[0].w_q.clone(), params.tok_emb.clone()],
            1e-5,
            |tape, vars| {
                let mut p = params.clone();
                p.layers[0].w_q = tape.value(vars[0]).clone();
                p.tok_emb = tape.value(vars[1]).clone();
                // rebuild on this tape with the checked leaves spliced in
                let mut bvars = p.register(tape, false);
                bvars.layers[0].w_q = vars[0];
                bvars.tok_emb = vars[1];
                let h = bvars.forward_hidden(tape, &tokens)?;
                let hp = tape.slice_rows(h, 0, 3)?;
                let logits = bvars.lm_logits(tape, hp)?;
                tape.cross_entropy_mean(logits, &[5, 2, 7], None)
            },
        )
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "rel err {}", res.max_rel_err);
    }
}
