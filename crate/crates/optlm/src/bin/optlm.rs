//! Command-line front end: corpus generation, backbone pretraining, plug-in
//! training, evaluation, diagnostics, option tables and generation.
//!
//! Exit codes: 0 success, 2 bad config, 3 bad data, 4 numeric failure,
//! 5 checkpoint problem, 1 anything else.

use clap::{Parser, Subcommand};
use optlm::backbone::{pretrain_backbone, BackboneConfig, PretrainSettings};
use optlm::checkpoint;
use optlm::datagen::{GrammarSpec, LabeledCorpus};
use optlm::error::{Error, Result};
use optlm::eval::{
    dump_option_table, entropy_diagnostics, eval_accuracy, latent_usage, mixture_fidelity,
    DistSource, MixtureWeights, SelectionMode,
};
use optlm::plugin::{self, Decoding, LatentMode, OptionConfig, PluginParams};
use optlm::train::{precompute_features, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "optlm", version, about = "Optionized next-token modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled corpus from a branching grammar.
    GenData {
        /// Grammar description (JSON).
        #[arg(long)]
        grammar: PathBuf,
        /// Number of sequences to draw.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output corpus (JSONL); defaults to corpus.jsonl in the output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a backbone from scratch on a corpus, then freeze it to a file.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON file holding {"backbone": ..., "pretrain": ...}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the option plug-in against a frozen backbone.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen backbone checkpoint (ignored when resuming).
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// JSON file holding {"option": ..., "train": ...}.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue a previous run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step JSONL metrics stream.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Next-token and answer-span accuracy under one selection rule.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// baseline | policy | oracle | fixed:N (N is a 1-based option id).
        #[arg(long)]
        mode: String,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive-entropy diagnostics and option-usage statistics.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// baseline_model | mixture | grammar.
        #[arg(long)]
        source: String,
        /// Grammar file; required for --source grammar and for fidelity.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-option table (weight and emitted token) at one position.
    Options {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Sequence index within the corpus.
        #[arg(long, default_value_t = 0)]
        seq: usize,
        /// Prediction position within the sequence.
        #[arg(long, default_value_t = 0)]
        pos: usize,
    },
    /// Autoregressive generation with a chosen option-selection rule.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated prompt tokens, e.g. "0,4,7".
        #[arg(long)]
        prefix: String,
        #[arg(long)]
        steps: usize,
        /// policy_argmax | policy_sample | fixed:N.
        #[arg(long, default_value = "policy_argmax")]
        latent: String,
        /// Greedy when absent; softmax temperature when present.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    backbone: BackboneConfig,
    pretrain: PretrainSettings,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    option: OptionConfig,
    train: TrainConfig,
}

fn out_dir() -> PathBuf {
    std::env::var_os("OPTLM_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_dir().join(default_name))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(Error::from)
}

fn parse_mode(mode: &str) -> Result<SelectionMode> {
    match mode {
        "baseline" => Ok(SelectionMode::Baseline),
        "policy" => Ok(SelectionMode::Policy),
        "oracle" => Ok(SelectionMode::Oracle),
        _ => match mode.strip_prefix("fixed:").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if n >= 1 => Ok(SelectionMode::Fixed(n - 1)),
            _ => Err(Error::Config(format!("unknown selection mode '{mode}'"))),
        },
    }
}

fn load_corpus(path: &Path, vocab_size: usize) -> Result<LabeledCorpus> {
    LabeledCorpus::read_jsonl(path, vocab_size)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn require_plugin(p: Option<PluginParams<f32>>, what: &str) -> Result<PluginParams<f32>> {
    p.ok_or_else(|| Error::Checkpoint(format!("{what} needs a checkpoint with a plug-in")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { grammar, n, seed, out } => {
            let spec = GrammarSpec::from_json_file(&grammar)?;
            let corpus = spec.generate_corpus(n, seed)?;
            let path = resolve(out, "corpus.jsonl");
            corpus.write_jsonl(&path)?;
            let (det, branch, filler, unknown) = corpus.label_counts();
            println!(
                "wrote {} sequences ({} positions: {det} det, {branch} branch, {filler} filler, {unknown} unknown) to {}",
                corpus.sequences.len(),
                corpus.n_positions(),
                path.display()
            );
        }
        Command::Pretrain { corpus, config, out } => {
            let cfg: PretrainFile = read_json(&config)?;
            let data = load_corpus(&corpus, cfg.backbone.vocab_size)?;
            let mut log = |step: usize, loss: f64| {
                if step % 100 == 0 {
                    println!("step {step:>6}  loss {loss:.4}");
                }
            };
            let backbone =
                pretrain_backbone::<f32>(&data, &cfg.backbone, &cfg.pretrain, Some(&mut log))?;
            let path = resolve(out, "backbone.ckpt");
            checkpoint::save_backbone(&path, &backbone)?;
            println!("saved frozen backbone to {}", path.display());
        }
        Command::Train { corpus, backbone, config, resume, out, metrics } => {
            let mut state = match (&resume, &backbone, &config) {
                (Some(ckpt), _, _) => checkpoint::load_train_state::<f32>(ckpt)?,
                (None, Some(bb), Some(cfg_path)) => {
                    let cfg: TrainFile = read_json(cfg_path)?;
                    let backbone = checkpoint::load_backbone::<f32>(bb)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x706c7567);
                    let plugin =
                        PluginParams::init(&cfg.option, backbone.config.hidden_dim, &mut rng)?;
                    TrainState::new(cfg.train, backbone, plugin)?
                }
                _ => {
                    return Err(Error::Config(
                        "train needs either --resume, or both --backbone and --config".into(),
                    ))
                }
            };
            let data = load_corpus(&corpus, state.backbone.config.vocab_size)?;
            let features = precompute_features(&state.backbone, &data)?;
            println!(
                "trainable fraction: {:.4} ({} plug-in parameters)",
                state.trainable_fraction(),
                state.plugin.n_params()
            );
            let path = resolve(out, "model.ckpt");
            let mut metrics_file: Option<std::fs::File> = match metrics {
                Some(p) => Some(std::fs::File::create(p)?),
                None => None,
            };
            let total = state.config.steps;
            let last = optlm::train::fit(
                &mut state,
                &features,
                metrics_file.as_mut().map(|f| f as &mut dyn Write),
                Some(&path),
                |r| {
                    if r.step % 100 == 0 || r.step + 1 == total {
                        println!(
                            "step {:>6}  ce {:.4}  kl {:.4}  policy {:.4}  alpha {:.4}",
                            r.step, r.ce, r.kl, r.policy, r.alpha
                        );
                    }
                },
            )?;
            println!(
                "finished at step {} (total loss {:.4}); checkpoint at {}",
                last.step + 1,
                last.total,
                path.display()
            );
        }
        Command::Eval { model, corpus, mode, out } => {
            let (backbone, plugin) = checkpoint::load_model::<f32>(&model)?;
            let data = load_corpus(&corpus, backbone.config.vocab_size)?;
            let mode = parse_mode(&mode)?;
            let report = eval_accuracy(&backbone, plugin.as_ref(), &data, mode)?;
            emit_json(&report, out)?;
        }
        Command::Diagnose { model, corpus, source, grammar, out } => {
            let (backbone, plugin) = checkpoint::load_model::<f32>(&model)?;
            let data = load_corpus(&corpus, backbone.config.vocab_size)?;
            let spec = match &grammar {
                Some(p) => Some(GrammarSpec::from_json_file(p)?),
                None => None,
            };
            let src = match source.as_str() {
                "baseline_model" => DistSource::BaselineModel,
                "mixture" => DistSource::Mixture,
                "grammar" => DistSource::Grammar,
                other => {
                    return Err(Error::Config(format!("unknown entropy source '{other}'")))
                }
            };
            let entropy = entropy_diagnostics(&backbone, plugin.as_ref(), spec.as_ref(), &data, src)?;
            let usage = match &plugin {
                Some(p) => Some(latent_usage(&backbone, p, &data)?),
                None => None,
            };
            let fidelity = match (&plugin, &spec) {
                (Some(p), Some(s)) => Some(mixture_fidelity(&backbone, p, s, &data, MixtureWeights::Policy)?),
                _ => None,
            };
            emit_json(
                &serde_json::json!({
                    "entropy": entropy,
                    "latent_usage": usage,
                    "mixture_fidelity": fidelity,
                }),
                out,
            )?;
        }
        Command::Options { model, corpus, seq, pos } => {
            let (backbone, plugin) = checkpoint::load_model::<f32>(&model)?;
            let plugin = require_plugin(plugin, "options")?;
            let data = load_corpus(&corpus, backbone.config.vocab_size)?;
            let sequence = data.sequences.get(seq).ok_or(Error::IndexOutOfRange {
                what: "sequence index",
                index: seq,
                limit: data.sequences.len(),
            })?;
            if pos + 1 >= sequence.tokens.len() {
                return Err(Error::IndexOutOfRange {
                    what: "prediction position",
                    index: pos,
                    limit: sequence.tokens.len() - 1,
                });
            }
            let d = backbone.config.hidden_dim;
            let hs = optlm::backbone::hidden_states(&backbone, &sequence.tokens)?;
            let h = &hs.data[pos * d..(pos + 1) * d];
            let dist = plugin::policy_latent(&plugin, h);
            let table =
                dump_option_table(&backbone, &plugin, &dist, h, &|t| t.to_string())?;
            println!(
                "sequence {seq}, position {pos} (next reference token: {})",
                sequence.tokens[pos + 1]
            );
            print!("{table}");
        }
        Command::Generate { model, prefix, steps, latent, temperature, seed } => {
            let (backbone, plugin) = checkpoint::load_model::<f32>(&model)?;
            let plugin = require_plugin(plugin, "generate")?;
            let prefix: Vec<u32> = prefix
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Config(format!("bad prefix token '{s}'")))
                })
                .collect::<Result<_>>()?;
            let mode = match latent.as_str() {
                "policy_argmax" => LatentMode::PolicyArgmax,
                "policy_sample" => LatentMode::PolicySample,
                other => match other.strip_prefix("fixed:").and_then(|n| n.parse::<usize>().ok())
                {
                    Some(n) if n >= 1 => LatentMode::Fixed(n - 1),
                    _ => return Err(Error::Config(format!("unknown latent mode '{other}'"))),
                },
            };
            let decoding = match temperature {
                None => Decoding::Greedy,
                Some(t) => Decoding::Sample(t),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tokens, trace) =
                plugin::generate(&plugin, &backbone, &prefix, steps, &mode, decoding, &mut rng)?;
            let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
            println!("tokens: {}", rendered.join(","));
            let opts: Vec<String> = trace.iter().map(|s| (s.z + 1).to_string()).collect();
            println!("options: {}", opts.join(","));
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
