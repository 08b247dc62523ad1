//! Command-line front end. Results go to stdout as JSON; progress goes to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::metrics::{self, DcfParams, ScoreSet};
use crate::model::{Checkpoint, EmbeddingModality, ModelState, Sharing};
use crate::numcore::RngStream;
use crate::patchio::Manifest;
use crate::selfcheck;
use crate::trainer::{self, SynthSpec};
use crate::verify;

pub const THREADS_ENV: &str = "UAV_SSL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "uavssl", version, about = "Audio-visual self-supervised speaker verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Audio,
    Visual,
    Audiovisual,
}

impl From<ModeArg> for EmbeddingModality {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Audio => EmbeddingModality::Audio,
            ModeArg::Visual => EmbeddingModality::Visual,
            ModeArg::Audiovisual => EmbeddingModality::Audiovisual,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskModeArg {
    Asymmetric,
    Symmetric,
    Complementary,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired dataset (images, spectrograms, manifest, trials).
    Synth {
        /// Run config whose model section fixes the input sizes.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        per_speaker: usize,
        /// Index of the first speaker; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        speaker_offset: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 8)]
        latent_dim: usize,
        /// Scale of the template shared by all samples of a modality.
        #[arg(long, default_value_t = 1.0)]
        template_scale: f64,
        /// Scale of the speaker-dependent component.
        #[arg(long, default_value_t = 0.5)]
        speaker_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides train.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides mask.mode.
        #[arg(long, value_enum)]
        mask_mode: Option<MaskModeArg>,
        /// Full checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed every manifest record with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine score of two embeddings, or of every trial against an embedding index.
    Score {
        #[arg(long, requires = "emb_b", conflicts_with_all = ["embeddings", "trials"])]
        emb_a: Option<PathBuf>,
        #[arg(long, requires = "emb_a")]
        emb_b: Option<PathBuf>,
        /// `embeddings.jsonl` written by `embed`.
        #[arg(long, requires_all = ["trials", "out"])]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Scores file to write (`id1 id2 score` lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and minDCF of a scores file against a trial list.
    Eval {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
        /// Also write DET operating points as CSV.
        #[arg(long)]
        det_csv: Option<PathBuf>,
    },
    /// Gradient checks, masking statistics and metric oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts for the shared model vs. separate per-modality backbones.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `argv` and runs. Usage errors exit 2 (clap prints usage).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match run(cli.command) {
        Ok(v) => {
            emit(&serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

// A closed pipe (e.g. `| head`) is not an error for the caller.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn fail(e: &Error) -> ExitCode {
    let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    emit(&body.to_string());
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A global pool can only be built once per process; later calls are no-ops.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

pub fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Synth {
            config,
            out,
            speakers,
            per_speaker,
            speaker_offset,
            noise_std,
            latent_dim,
            template_scale,
            speaker_scale,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let spec = SynthSpec {
                n_speakers: speakers,
                samples_per_speaker: per_speaker,
                latent_dim,
                noise_std,
                seed,
                speaker_offset,
                template_scale,
                speaker_scale,
                visual_size: cfg.model.visual_size(),
                audio_size: cfg.model.audio_size(),
            };
            let manifest = trainer::generate_synthetic(&spec, &out)?;
            eprintln!("wrote {} samples to {}", manifest.len(), out.display());
            Ok(json!({
                "out": out,
                "manifest": out.join("manifest.jsonl"),
                "trials": out.join("trials.txt"),
                "samples": manifest.len(),
                "spec": spec,
            }))
        }
        Command::Train {
            config,
            manifest,
            out,
            seed,
            steps,
            mask_mode,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if manifest.is_some() {
                cfg.train.manifest = manifest;
            }
            if out.is_some() {
                cfg.train.out_dir = out;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(m) = mask_mode {
                cfg.mask.mode = match m {
                    MaskModeArg::Asymmetric => MaskMode::Asymmetric,
                    MaskModeArg::Symmetric => MaskMode::Symmetric,
                    MaskModeArg::Complementary => MaskMode::Complementary,
                };
            }
            cfg.validate()?;
            let manifest_path = cfg
                .train
                .manifest
                .clone()
                .ok_or_else(|| Error::Config("train.manifest is required (or pass --manifest)".into()))?;
            let out_dir = cfg
                .train
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("train.out_dir is required (or pass --out)".into()))?;
            let manifest = Manifest::load(&manifest_path)?;
            let t0 = Instant::now();
            let outcome = trainer::train(&cfg, &manifest, &out_dir, resume.as_deref())?;
            eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());
            let first = outcome.records.first();
            let last = outcome.records.last();
            Ok(json!({
                "out": out_dir,
                "steps": cfg.train.steps,
                "final_checkpoint": outcome.final_checkpoint,
                "inference_checkpoint": outcome.inference_checkpoint,
                "first": first,
                "last": last,
            }))
        }
        Command::Embed {
            checkpoint,
            manifest,
            mode,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let state: ModelState<f32> = ck.model_state()?;
            let manifest = Manifest::load(&manifest)?;
            let mode: EmbeddingModality = mode.into();
            let items: Vec<(String, _)> = manifest
                .records
                .par_iter()
                .map(|rec| Ok((rec.id.clone(), verify::embed_record(&manifest, rec, mode, &state)?)))
                .collect::<Result<_>>()?;
            let index = verify::write_embeddings(&out, &items)?;
            write_json(
                &out.join("config.json"),
                &json!({"checkpoint": checkpoint, "mode": mode, "model": state.config}),
            )?;
            eprintln!("embedded {} records", items.len());
            Ok(json!({
                "index": index,
                "count": items.len(),
                "dim": state.config.dim,
                "mode": mode,
            }))
        }
        Command::Score {
            emb_a,
            emb_b,
            embeddings,
            trials,
            out,
        } => match (emb_a, emb_b, embeddings, trials, out) {
            (Some(a), Some(b), None, None, _) => {
                let s = verify::score_vectors(&verify::read_embedding(&a)?, &verify::read_embedding(&b)?)?;
                Ok(json!(s))
            }
            (None, None, Some(index), Some(trials), Some(out)) => {
                let emb = verify::read_embedding_index(&index)?;
                let trials = metrics::parse_trials(&trials)?;
                let (rows, _) = verify::score_trials(&trials, &emb)?;
                verify::write_scores(&out, &rows)?;
                Ok(json!({"scores": out, "count": rows.len()}))
            }
            _ => Err(Error::Config(
                "score needs either --emb-a/--emb-b or --embeddings/--trials/--out".into(),
            )),
        },
        Command::Eval {
            trials,
            scores,
            p_target,
            c_miss,
            c_fa,
            det_csv,
        } => {
            let params = DcfParams {
                p_target,
                c_miss,
                c_fa,
            };
            params.validate()?;
            let trials = metrics::parse_trials(&trials)?;
            let scores = metrics::parse_scores(&scores)?;
            let set = ScoreSet::join(&trials, &scores)?;
            let report = metrics::evaluate(&set, &params)?;
            if let Some(p) = det_csv {
                metrics::write_det_csv(&set, &p)?;
            }
            Ok(serde_json::to_value(report)?)
        }
        Command::Selfcheck { seed } => {
            let t0 = Instant::now();
            let checks = selfcheck::run_all(seed)?;
            eprintln!("selfcheck finished in {:.1}s", t0.elapsed().as_secs_f64());
            let pass = checks.iter().all(|c| c.pass);
            Ok(json!({"pass": pass, "checks": checks}))
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            let state: ModelState<f32> = ModelState::init(cfg.model.clone(), &RngStream::new(0))?;
            let shared = state.count_parameters(Sharing::Shared);
            let dual = state.count_parameters(Sharing::DualHypothetical);
            let backbone = state.backbone_parameters();
            Ok(json!({
                "shared_count": shared,
                "dual_count": dual,
                "backbone_count": backbone,
                "backbone_ratio": backbone as f64 / (2 * backbone) as f64,
                "ratio": shared as f64 / dual as f64,
            }))
        }
    }
}
