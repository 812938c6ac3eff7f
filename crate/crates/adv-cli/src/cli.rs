//! Command definitions and dispatch.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime
//! failure.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use adv_core::codec::{ActionChunk, Scheme};
use adv_core::model::{draft, Instruction, Observation};
use adv_core::rng::{derive_seed, Stream};
use adv_core::verifier::{adv_infer, AdvContext};

use crate::artifacts::{codec_path, ensure_out_dir, load_checkpoint, load_codec};
use crate::config::{load_config, RunConfig};
use crate::harness::experiments::run_experiment;
use crate::harness::{load_stack, ArDecodePlanner, Planner, PolicyMode};
use crate::trainer::run_training;

#[derive(Parser)]
#[command(
    name = "adv",
    version,
    about = "Draft-and-verify action inference on a toy push-block task"
)]
pub struct Cli {
    /// JSON config file; defaults apply for every omitted key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set train.beta=1.0 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory for all artifacts (overrides the config value).
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the expert demonstration dataset for the configured chunk
    /// length.
    GenData,
    /// Fit the codec and train the configured model.
    Train {
        /// Continue from the existing checkpoint instead of reinitializing.
        #[arg(long)]
        resume: bool,
    },
    /// One inference pass from a given observation.
    Infer {
        /// ar, diffusion, or adv.
        #[arg(long)]
        mode: String,
        /// Observation as gripper_x,gripper_y,block_x,block_y.
        #[arg(long)]
        obs: String,
        /// Goal zone id in 0..=3.
        #[arg(long)]
        goal: u8,
        /// Drafting seed; defaults to a substream of the global seed.
        #[arg(long)]
        draft_seed: Option<u64>,
    },
    /// Run one named analysis experiment and write its report.
    Experiment {
        #[arg(long)]
        name: String,
    },
    /// Tokenize an action chunk, or measure round-trip reconstruction.
    Tokenize {
        /// bins, fast, vla0, or textual_fast; defaults to the config scheme.
        #[arg(long)]
        scheme: Option<String>,
        /// JSON file holding an HxD action chunk as nested arrays.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report max reconstruction error over seeded random chunks
        /// against the direct-quantization oracle.
        #[arg(long)]
        roundtrip: bool,
    },
    /// Print the header of a checkpoint, codec, or dataset metadata file.
    Inspect { path: PathBuf },
}

/// An error carrying its process exit code.
pub struct CmdError {
    pub code: i32,
    pub source: anyhow::Error,
}

impl CmdError {
    fn usage(source: anyhow::Error) -> Self {
        CmdError { code: 2, source }
    }

    fn runtime(source: anyhow::Error) -> Self {
        CmdError { code: 1, source }
    }
}

pub fn run(cli: Cli) -> Result<(), CmdError> {
    let env_seed = std::env::var("ADV_SEED").ok();
    let mut cfg = load_config(
        cli.config.as_deref(),
        &cli.overrides,
        env_seed.as_deref(),
    )
    .map_err(CmdError::usage)?;
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    match cli.command {
        Command::GenData => {
            ensure_out_dir(&cfg.out_dir).map_err(CmdError::usage)?;
            let meta = crate::dataset::generate_dataset(&cfg, cfg.codec.h)
                .map_err(CmdError::runtime)?;
            println!(
                "dataset_h{}: {} episodes, {} triples -> {}",
                meta.h,
                meta.episodes,
                meta.triples,
                crate::artifacts::dataset_path(&cfg.out_dir, meta.h).display()
            );
            Ok(())
        }
        Command::Train { resume } => {
            ensure_out_dir(&cfg.out_dir).map_err(CmdError::usage)?;
            let outcome = run_training(&cfg, resume).map_err(CmdError::runtime)?;
            println!(
                "trained {} steps; loss_vlm={:.6} loss_dif={:.6} -> {}",
                outcome.steps,
                outcome.final_vlm,
                outcome.final_dif,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Infer {
            mode,
            obs,
            goal,
            draft_seed,
        } => {
            let mode = PolicyMode::parse(&mode)
                .ok_or_else(|| anyhow!("unknown mode {mode:?}; expected ar, diffusion, or adv"))
                .map_err(CmdError::usage)?;
            let obs = parse_obs(&obs).map_err(CmdError::usage)?;
            if goal > 3 {
                return Err(CmdError::usage(anyhow!("goal must be in 0..=3")));
            }
            cmd_infer(&cfg, mode, obs, Instruction { goal_id: goal }, draft_seed)
                .map_err(CmdError::runtime)
        }
        Command::Experiment { name } => {
            if !crate::harness::experiments::EXPERIMENT_NAMES.contains(&name.as_str()) {
                return Err(CmdError::usage(anyhow!(
                    "unknown experiment {name:?}; valid names: {}",
                    crate::harness::experiments::EXPERIMENT_NAMES.join(", ")
                )));
            }
            ensure_out_dir(&cfg.out_dir).map_err(CmdError::usage)?;
            let (csv, manifest) = run_experiment(&cfg, &name).map_err(CmdError::runtime)?;
            println!("wrote {} and {}", csv.display(), manifest.display());
            Ok(())
        }
        Command::Tokenize {
            scheme,
            input,
            roundtrip,
        } => {
            let scheme_name = scheme.unwrap_or_else(|| cfg.scheme.clone());
            let scheme = Scheme::parse(&scheme_name)
                .ok_or_else(|| anyhow!("unknown scheme {scheme_name:?}"))
                .map_err(CmdError::usage)?;
            if input.is_none() && !roundtrip {
                return Err(CmdError::usage(anyhow!(
                    "tokenize needs --input FILE and/or --roundtrip"
                )));
            }
            cmd_tokenize(&cfg, scheme, input.as_deref(), roundtrip).map_err(CmdError::runtime)
        }
        Command::Inspect { path } => cmd_inspect(&path).map_err(CmdError::runtime),
    }
}

fn parse_obs(text: &str) -> Result<Observation> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        bail!("--obs expects four comma-separated numbers, got {text:?}");
    }
    let mut values = [0.0; 4];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .with_context(|| format!("bad observation component {part:?}"))?;
    }
    Ok(Observation(values))
}

fn cmd_infer(
    cfg: &RunConfig,
    mode: PolicyMode,
    obs: Observation,
    instr: Instruction,
    draft_seed: Option<u64>,
) -> Result<()> {
    let stack = load_stack(
        &cfg.out_dir,
        cfg.codec.h,
        "cotrain",
        Scheme::TextualFast,
        cfg.train.seed,
    )?;
    let base_seed = draft_seed.unwrap_or_else(|| derive_seed(cfg.seed, "infer", 0));
    match mode {
        PolicyMode::Adv => {
            let ctx = AdvContext {
                codec: &stack.codec,
                vocab: &stack.vocab,
                tokenizer: &stack.tokenizer,
                scheme: stack.scheme,
                verifier: &cfg.verifier,
                m: cfg.infer.m,
                steps: cfg.infer.steps,
            };
            let (chunk, diagnostics) = adv_infer(&obs, instr, &stack.model, &ctx, base_seed)?;
            print_chunk(&chunk);
            println!("{}", serde_json::to_string(&diagnostics)?);
        }
        PolicyMode::Diffusion => {
            let set = draft(
                &obs,
                instr,
                &stack.model,
                1,
                cfg.infer.steps,
                base_seed,
                &stack.codec.norm,
            );
            print_chunk(&set.chunks[0]);
            println!("{{\"mode\":\"diffusion\",\"seed\":{base_seed}}}");
        }
        PolicyMode::ArDecode => {
            let planner = ArDecodePlanner {
                stack: &stack,
                max_len: cfg.infer.max_decode_len,
            };
            let (chunk, info) = planner.plan(&obs, instr, base_seed);
            print_chunk(&chunk);
            println!(
                "{{\"mode\":\"ar_decode\",\"decode_failed\":{}}}",
                info.decode_failed
            );
        }
    }
    Ok(())
}

fn print_chunk(chunk: &ActionChunk) {
    for step in 0..chunk.h() {
        let row: Vec<String> = chunk.row(step).iter().map(|v| format!("{v:.6}")).collect();
        println!("{}", row.join(" "));
    }
}

fn cmd_tokenize(
    cfg: &RunConfig,
    scheme: Scheme,
    input: Option<&std::path::Path>,
    roundtrip: bool,
) -> Result<()> {
    let (codec, vocab) = load_codec(&codec_path(&cfg.out_dir, cfg.codec.h))?;
    let tk = adv_core::codec::TextTokenizer::standard();
    if let Some(path) = input {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading chunk file {}", path.display()))?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
            .with_context(|| format!("parsing chunk file {}: expected nested arrays", path.display()))?;
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let chunk = ActionChunk::new(codec.h, codec.d, values).map_err(|e| {
            anyhow!("chunk file does not match codec h={} d={}: {e}", codec.h, codec.d)
        })?;
        let tokens = scheme.encode(&chunk, &codec, &vocab, &tk)?;
        let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        println!("{}", rendered.join(" "));
        if roundtrip {
            let back = scheme.decode(&tokens, &codec, &vocab, &tk)?;
            println!("max_error={:.9}", chunk.max_abs_difference(&back));
        }
        return Ok(());
    }
    // Round-trip report over seeded random chunks inside the fitted range.
    let mut stream = Stream::substream(cfg.seed, "tokenize", 0);
    let mut max_error = 0.0f64;
    let mut max_vs_oracle = 0.0f64;
    let n = 1000;
    for _ in 0..n {
        let values: Vec<f64> = (0..codec.h * codec.d)
            .map(|i| {
                let dim = i % codec.d;
                stream.uniform_in(codec.norm.lo[dim], codec.norm.hi[dim])
            })
            .collect();
        let chunk = ActionChunk::new(codec.h, codec.d, values)?;
        let tokens = scheme.encode(&chunk, &codec, &vocab, &tk)?;
        let back = scheme.decode(&tokens, &codec, &vocab, &tk)?;
        max_error = max_error.max(chunk.max_abs_difference(&back));
        if matches!(scheme, Scheme::Fast | Scheme::TextualFast) {
            let oracle = direct_quantization(&chunk, &codec)?;
            max_vs_oracle = max_vs_oracle.max(back.max_abs_difference(&oracle));
        }
    }
    let bound = oracle_bound(scheme, &codec);
    println!(
        "scheme={} chunks={n} max_error={max_error:.9} oracle_bound={bound:.9} within_bound={}",
        scheme.name(),
        max_error <= bound
    );
    if matches!(scheme, Scheme::Fast | Scheme::TextualFast) {
        println!("max_vs_direct_quantization={max_vs_oracle:.9}");
    }
    Ok(())
}

/// The reconstruction the token layers must reproduce exactly.
fn direct_quantization(
    chunk: &ActionChunk,
    codec: &adv_core::codec::CodecConfig,
) -> Result<ActionChunk> {
    use adv_core::codec::{dct_forward, dct_inverse, denormalize, dequantize, normalize, quantize};
    let coeffs = dct_forward(&normalize(chunk, &codec.norm)?);
    let q = quantize(&coeffs, codec);
    Ok(denormalize(
        &dct_inverse(&dequantize(&q.values, codec)?),
        &codec.norm,
    )?)
}

/// Worst-case per-value reconstruction error for in-range chunks.
fn oracle_bound(scheme: Scheme, codec: &adv_core::codec::CodecConfig) -> f64 {
    let half_range: f64 = (0..codec.d)
        .map(|d| (codec.norm.hi[d] - codec.norm.lo[d]) * 0.5)
        .fold(0.0, f64::max);
    match scheme {
        // Half a bin in normalized units, scaled back to action units.
        Scheme::Bins | Scheme::Vla0 => half_range / codec.bins as f64,
        // Rounding of every coefficient by 0.5/gamma, spread by the inverse
        // transform over sqrt(h) orthonormal terms.
        Scheme::Fast | Scheme::TextualFast => {
            half_range * libm::sqrt(codec.h as f64) * 0.5 / codec.gamma
        }
    }
}

fn cmd_inspect(path: &std::path::Path) -> Result<()> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    if name.ends_with(".ckpt") {
        let ckpt = load_checkpoint(path)?;
        println!("{}", serde_json::to_string_pretty(&ckpt.header)?);
    } else if name.starts_with("codec") {
        let (codec, vocab) = load_codec(path)?;
        println!(
            "{{\"h\":{},\"d\":{},\"gamma\":{},\"q_max\":{},\"bins\":{},\"merges\":{}}}",
            codec.h,
            codec.d,
            codec.gamma,
            codec.q_max,
            codec.bins,
            vocab.merges().len()
        );
    } else {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        println!("{text}");
    }
    Ok(())
}
