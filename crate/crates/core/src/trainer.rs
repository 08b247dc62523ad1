//! Synthetic paired data, batch assembly, the dual-objective training step,
//! optimizers, and the checkpointed training loop.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossReport};
use crate::masking::{apply_mask, sample_ratios_for, MaskConfig, MaskPlan};
use crate::metrics::{Trial, TrialSet};
use crate::model::{self, Checkpoint, CheckpointKind, ModelConfig, ModelState};
use crate::numcore::{DTensor, Gradients, Real, RngStream, Tape, Var};
use crate::patchio::{self, Manifest, ManifestRecord, Modality, TokenSequence};

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub samples_per_speaker: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Index of the first generated speaker. Disjoint ranges give disjoint
    /// speaker sets that share the same rendering maps (e.g. train/eval).
    #[serde(default)]
    pub speaker_offset: usize,
    /// Scale of the fixed per-modality template shared by every sample.
    #[serde(default = "default_template_scale")]
    pub template_scale: f64,
    /// Scale of the speaker-dependent component.
    #[serde(default = "default_speaker_scale")]
    pub speaker_scale: f64,
    /// `(height, width)` of the RGB image.
    pub visual_size: (usize, usize),
    /// `(bins, frames)` of the spectrogram.
    pub audio_size: (usize, usize),
}

fn default_template_scale() -> f64 {
    1.0
}
fn default_speaker_scale() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn for_model(cfg: &ModelConfig, n_speakers: usize, samples_per_speaker: usize) -> Self {
        SynthSpec {
            n_speakers,
            samples_per_speaker,
            latent_dim: 8,
            noise_std: 0.05,
            seed: 0,
            speaker_offset: 0,
            template_scale: default_template_scale(),
            speaker_scale: default_speaker_scale(),
            visual_size: cfg.visual_size(),
            audio_size: cfg.audio_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.samples_per_speaker == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "n_speakers, samples_per_speaker and latent_dim must be positive".into(),
            ));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("template_scale", self.template_scale),
            ("speaker_scale", self.speaker_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        let (vh, vw) = self.visual_size;
        let (ah, aw) = self.audio_size;
        if vh * vw == 0 || ah * aw == 0 {
            return Err(Error::Config("input sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One generated paired sample, in memory.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub speaker: String,
    pub image: Vec<f32>,
    pub spectrogram: Vec<f32>,
}

fn random_map(rng: &mut RngStream, rows: usize, latent: usize) -> Vec<f64> {
    let s = 1.0 / (latent as f64).sqrt();
    (0..rows * latent).map(|_| rng.normal() * s).collect()
}

struct Renderer {
    template: Vec<f64>,
    map: Vec<f64>,
}

impl Renderer {
    fn new(root: &RngStream, modality: &str, len: usize, spec: &SynthSpec) -> Self {
        let mut t = root.substream(&format!("synth:template_{modality}"), 0);
        Renderer {
            template: (0..len).map(|_| t.normal() * spec.template_scale).collect(),
            map: random_map(
                &mut root.substream(&format!("synth:map_{modality}"), 0),
                len,
                spec.latent_dim,
            ),
        }
    }

    fn render(&self, z: &[f64], scale: f64, noise: &mut RngStream, noise_std: f64) -> Vec<f32> {
        self.map
            .chunks_exact(z.len())
            .zip(&self.template)
            .map(|(row, &base)| {
                let v: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                let eps = if noise_std > 0.0 { noise.normal() * noise_std } else { 0.0 };
                (base + scale * v + eps) as f32
            })
            .collect()
    }
}

/// Each modality has a fixed template (the "mean face" or mean spectrogram)
/// and a fixed random linear map; a sample is the template plus the map
/// applied to its speaker's latent vector, plus per-sample noise.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let (vh, vw) = spec.visual_size;
    let (ah, aw) = spec.audio_size;
    let vis = Renderer::new(&root, "visual", vh * vw * 3, spec);
    let aud = Renderer::new(&root, "audio", ah * aw, spec);
    let mut out = Vec::with_capacity(spec.n_speakers * spec.samples_per_speaker);
    for s in spec.speaker_offset..spec.speaker_offset + spec.n_speakers {
        let mut zr = root.substream("synth:speaker", s as u64);
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| zr.normal()).collect();
        for j in 0..spec.samples_per_speaker {
            let key = (s * spec.samples_per_speaker + j) as u64;
            let mut nv = root.substream("synth:noise_visual", key);
            let mut na = root.substream("synth:noise_audio", key);
            out.push(SynthSample {
                id: format!("spk{s:04}_{j:03}"),
                speaker: format!("spk{s:04}"),
                image: vis.render(&z, spec.speaker_scale, &mut nv, spec.noise_std),
                spectrogram: aud.render(&z, spec.speaker_scale, &mut na, spec.noise_std),
            });
        }
    }
    Ok(out)
}

/// Synthesizes in memory and tokenizes for `cfg`, skipping the file round trip.
pub fn synth_dataset(spec: &SynthSpec, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let (vh, vw) = spec.visual_size;
    let (ah, aw) = spec.audio_size;
    synthesize(spec)?
        .into_iter()
        .map(|s| {
            let v = patchio::RawInput::new(Modality::Visual, vh, vw, 3, s.image)?;
            let a = patchio::RawInput::new(Modality::Audio, ah, aw, 1, s.spectrogram)?;
            let sample = Sample {
                id: s.id,
                speaker: s.speaker,
                audio: patchio::patchify(&patchio::inflate_channels(&a)?, cfg.patch_size)?,
                visual: patchio::patchify(&v, cfg.patch_size)?,
            };
            check_grid(&sample.audio, cfg)?;
            check_grid(&sample.visual, cfg)?;
            Ok(sample)
        })
        .collect()
}

/// All unordered sample pairs as trials, labelled by speaker identity.
pub fn all_pair_trials(records: &[ManifestRecord]) -> TrialSet {
    let mut trials = Vec::new();
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            trials.push(Trial {
                label: (records[i].speaker == records[j].speaker) as u8,
                enroll: records[i].id.clone(),
                test: records[j].id.clone(),
            });
        }
    }
    TrialSet { trials }
}

/// Writes UAVT files, `manifest.jsonl` and `trials.txt` under `dir`.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    let samples = synthesize(spec)?;
    for sub in ["images", "spectrograms"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let (vh, vw) = spec.visual_size;
    let (ah, aw) = spec.audio_size;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.uavt", s.id));
        let spectrogram = PathBuf::from("spectrograms").join(format!("{}.uavt", s.id));
        patchio::write_uavt(&dir.join(&image), &[vh, vw, 3], &s.image)?;
        patchio::write_uavt(&dir.join(&spectrogram), &[ah, aw, 1], &s.spectrogram)?;
        records.push(ManifestRecord {
            id: s.id,
            speaker: s.speaker,
            image,
            spectrogram,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.save(&dir.join("manifest.jsonl"))?;
    all_pair_trials(&manifest.records).save(&dir.join("trials.txt"))?;
    let spec_path = dir.join("synth.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?)
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Dataset

/// A tokenized audio-visual pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub speaker: String,
    pub audio: TokenSequence,
    pub visual: TokenSequence,
}

fn check_grid(seq: &TokenSequence, cfg: &ModelConfig) -> Result<()> {
    let want = cfg.grid(seq.modality);
    if seq.grid != want {
        return Err(Error::Geometry(format!(
            "{} input has patch grid {:?}, model expects {:?}",
            seq.modality.as_str(),
            seq.grid,
            want
        )));
    }
    Ok(())
}

pub fn load_sample(manifest: &Manifest, rec: &ManifestRecord, cfg: &ModelConfig) -> Result<Sample> {
    let inner = || -> Result<Sample> {
        let audio = patchio::tokenize_file(&manifest.resolve(&rec.spectrogram), Modality::Audio, cfg.patch_size)?;
        let visual = patchio::tokenize_file(&manifest.resolve(&rec.image), Modality::Visual, cfg.patch_size)?;
        check_grid(&audio, cfg)?;
        check_grid(&visual, cfg)?;
        Ok(Sample {
            id: rec.id.clone(),
            speaker: rec.speaker.clone(),
            audio,
            visual,
        })
    };
    inner().map_err(|e| Error::Sample {
        id: rec.id.clone(),
        source: Box::new(e),
    })
}

pub fn load_dataset(manifest: &Manifest, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    if manifest.is_empty() {
        return Err(Error::Precondition("manifest has no samples".into()));
    }
    manifest
        .records
        .iter()
        .map(|r| load_sample(manifest, r, cfg))
        .collect()
}

/// Dataset indices for a step. Samples are drawn from a fresh seeded
/// permutation each epoch, so each appears exactly once per epoch.
pub fn batch_indices(root: &RngStream, n: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + b;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, root.substream("data", epoch).permutation(n)));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

/// Ratios are drawn once per step; index sets per (step, batch slot).
pub fn make_plans(
    root: &RngStream,
    mask: &MaskConfig,
    step: u64,
    batch: &[&Sample],
) -> Result<Vec<MaskPlan>> {
    let (ra, rv) = sample_ratios_for(&mut root.substream("mask.ratio", step), mask)?;
    let idx_root = root.substream("mask.index", step);
    batch
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let mut r = idx_root.substream("slot", b as u64);
            let (_, audio) = apply_mask(&s.audio, ra, &mut r)?;
            let (_, visual) = apply_mask(&s.visual, rv, &mut r)?;
            Ok(MaskPlan {
                ratio_audio: ra,
                ratio_visual: rv,
                audio,
                visual,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Objective

/// Handles into a tape holding the combined objective for one batch.
pub struct Objective {
    pub total: Var,
    pub l_c: Var,
    pub l_r: Var,
    pub f_audio: Var,
    pub f_visual: Var,
}

/// Builds `L = L_r + λ·L_c` for a batch: each sample's unmasked tokens go
/// through the shared backbone; pooled features feed the contrastive term and
/// the joint encoder/decoder feeds the reconstruction term (averaged over
/// the batch).
pub fn batch_objective<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    batch: &[&Sample],
    plans: &[MaskPlan],
    loss: &LossConfig,
) -> Result<Objective> {
    if batch.len() != plans.len() {
        return Err(Error::Dimension("one mask plan per sample required".into()));
    }
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let mut pooled_a = Vec::with_capacity(batch.len());
    let mut pooled_v = Vec::with_capacity(batch.len());
    let mut recon_sum: Option<Var> = None;
    for (s, plan) in batch.iter().zip(plans) {
        let kept_a = s.audio.select(&plan.audio.unmasked);
        let kept_v = s.visual.select(&plan.visual.unmasked);
        let fa = model::encode(tape, state, &kept_a)?;
        let fv = model::encode(tape, state, &kept_v)?;
        pooled_a.push((tape.mean_rows(fa)?, 0));
        pooled_v.push((tape.mean_rows(fv)?, 0));
        let joint = model::joint_encode(tape, state, fa, &kept_a.positions, fv, &kept_v.positions)?;
        let (ra, rv) = model::joint_decode(tape, state, joint, plan)?;
        let lr = losses::reconstruction_loss_var(
            tape,
            &s.audio.tokens.cast::<T>(),
            ra,
            &s.visual.tokens.cast::<T>(),
            rv,
            plan,
            loss,
        )?;
        recon_sum = Some(match recon_sum {
            Some(acc) => tape.add(acc, lr)?,
            None => lr,
        });
    }
    let l_r = tape.scale(recon_sum.unwrap(), T::one() / T::of_usize(batch.len()))?;
    let f_audio = tape.select_rows(pooled_a)?;
    let f_visual = tape.select_rows(pooled_v)?;
    let l_c = losses::contrastive_loss_var(tape, f_audio, f_visual, loss)?;
    let total = losses::total_loss_var(tape, l_r, l_c, loss.lambda)?;
    Ok(Objective {
        total,
        l_c,
        l_r,
        f_audio,
        f_visual,
    })
}

// ---------------------------------------------------------------------------
// Optimizers

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T: Real = f32> {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: IndexMap<String, DTensor<T>>,
    pub v: IndexMap<String, DTensor<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptState {
            kind,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        state: &mut ModelState<T>,
        grads: &IndexMap<String, DTensor<T>>,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let scale = match clip {
            Some(c) if norm > c => T::of(c / norm),
            _ => T::one(),
        };
        self.t += 1;
        let lr_t = T::of(lr);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let bc1 = T::one() - T::of(BETA1.powi(self.t as i32));
        let bc2 = T::one() - T::of(BETA2.powi(self.t as i32));
        let eps = T::of(ADAM_EPS);
        for (name, g) in grads {
            let p = state
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr_t * gv * scale;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| DTensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| DTensor::zeros(g.shape()));
                    for (((w, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gs = gv * scale;
                        *mv = b1 * *mv + (T::one() - b1) * gs;
                        *vv = b2 * *vv + (T::one() - b2) * gs * gs;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}

// ---------------------------------------------------------------------------
// Training step and loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    pub ratio_audio: f64,
    pub ratio_visual: f64,
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer update for `step` (0-based).
pub fn train_step<T: Real>(
    batch: &[&Sample],
    state: &mut ModelState<T>,
    opt: &mut OptState<T>,
    cfg: &RunConfig,
    root: &RngStream,
    step: u64,
) -> Result<(LossReport, Vec<MaskPlan>, Gradients<T>, f64)> {
    let wrap = |e: Error| match e {
        Error::Numeric(msg) => Error::NonFiniteLoss { step: step + 1, msg },
        other => other,
    };
    let plans = make_plans(root, &cfg.mask, step, batch)?;
    let mut tape = Tape::<T>::new();
    let obj = batch_objective(&mut tape, state, batch, &plans, &cfg.loss).map_err(wrap)?;
    let report = LossReport {
        l_c: tape.value(obj.l_c).item().f64(),
        l_r: tape.value(obj.l_r).item().f64(),
        l: tape.value(obj.total).item().f64(),
        batch_size: batch.len(),
    };
    let grads = tape.backward(obj.total).map_err(wrap)?;
    let norm = opt
        .step(state, &grads.params(), cfg.train.learning_rate, cfg.train.grad_clip)
        .map_err(wrap)?;
    Ok((report, plans, grads, norm))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub inference_checkpoint: PathBuf,
    pub state: ModelState<f32>,
}

fn optimizer_meta(cfg: &RunConfig, opt: &OptState<f32>) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "run": serde_json::to_value(cfg)?,
        "optimizer": {"kind": opt.kind, "t": opt.t},
    }))
}

/// Full training checkpoint: model parameters plus optimizer moments.
pub fn training_checkpoint(
    state: &ModelState<f32>,
    opt: &OptState<f32>,
    cfg: &RunConfig,
    step: u64,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_state(state, step, optimizer_meta(cfg, opt)?);
    for (name, m) in &opt.m {
        ck.tensors.insert(format!("optim.m.{name}"), m.clone());
    }
    for (name, v) in &opt.v {
        ck.tensors.insert(format!("optim.v.{name}"), v.clone());
    }
    Ok(ck)
}

/// Restores model and optimizer state from a full training checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(ModelState<f32>, OptState<f32>)> {
    if ck.kind != CheckpointKind::Full {
        return Err(Error::Precondition(
            "cannot resume training from an inference checkpoint".into(),
        ));
    }
    let state = ck.model_state::<f32>()?;
    let opt_meta = ck
        .meta
        .get("optimizer")
        .ok_or_else(|| Error::Format("checkpoint lacks optimizer metadata".into()))?;
    let kind: OptimizerKind = serde_json::from_value(opt_meta["kind"].clone())?;
    let t = opt_meta["t"]
        .as_u64()
        .ok_or_else(|| Error::Format("optimizer step counter missing".into()))?;
    let mut opt = OptState::new(kind);
    opt.t = t;
    for (name, tensor) in &ck.tensors {
        if let Some(p) = name.strip_prefix("optim.m.") {
            opt.m.insert(p.to_string(), tensor.clone());
        } else if let Some(p) = name.strip_prefix("optim.v.") {
            opt.v.insert(p.to_string(), tensor.clone());
        }
    }
    Ok((state, opt))
}

fn write_log_prefix(path: &Path, keep_through: u64) -> Result<fs::File> {
    let mut kept = Vec::new();
    if keep_through > 0 && path.exists() {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let rec: StepRecord = serde_json::from_str(&line)?;
            if rec.step <= keep_through {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Runs training to `cfg.train.steps`, optionally resuming from a full
/// checkpoint. Writes `config.json`, `metrics.jsonl`, periodic checkpoints
/// under `checkpoints/`, `final.ckpt` and the decoder-stripped
/// `inference.ckpt` into `out_dir`.
pub fn train(
    cfg: &RunConfig,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = load_dataset(manifest, &cfg.model)?;
    train_on(cfg, &samples, out_dir, resume)
}

pub fn train_on(
    cfg: &RunConfig,
    samples: &[Sample],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let TrainConfig {
        steps,
        batch_size,
        seed,
        checkpoint_every,
        log_every,
        ..
    } = cfg.train;
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json_pretty()?).map_err(|e| Error::io(&cfg_path, e))?;

    let root = RngStream::new(seed);
    let (mut state, mut opt, start) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model != cfg.model {
                return Err(Error::Config("resume checkpoint has a different model config".into()));
            }
            let (s, o) = restore(&ck)?;
            (s, o, ck.step)
        }
        None => (
            ModelState::<f32>::init(cfg.model.clone(), &root.substream("init", 0))?,
            OptState::new(cfg.train.optimizer),
            0,
        ),
    };
    if start > steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, beyond train.steps = {steps}"
        )));
    }
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = write_log_prefix(&log_path, start)?;
    let mut records = Vec::new();
    for step in start..steps {
        let idx = batch_indices(&root, samples.len(), batch_size, step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (report, plans, _, norm) = train_step(&batch, &mut state, &mut opt, cfg, &root, step)?;
        let done = step + 1;
        let rec = StepRecord {
            step: done,
            l: report.l,
            l_c: report.l_c,
            l_r: report.l_r,
            ratio_audio: plans[0].ratio_audio,
            ratio_visual: plans[0].ratio_visual,
            grad_norm: norm,
        };
        if done % log_every == 0 || done == steps {
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        }
        records.push(rec);
        if checkpoint_every > 0 && done % checkpoint_every == 0 && done != steps {
            training_checkpoint(&state, &opt, cfg, done)?
                .save(&ck_dir.join(format!("step_{done:06}.ckpt")))?;
        }
    }
    let final_ck = training_checkpoint(&state, &opt, cfg, steps)?;
    let final_path = out_dir.join("final.ckpt");
    final_ck.save(&final_path)?;
    let inf_path = out_dir.join("inference.ckpt");
    final_ck.inference_export().save(&inf_path)?;
    Ok(TrainOutcome {
        records,
        final_checkpoint: final_path,
        inference_checkpoint: inf_path,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                joint_decoder_depth: 1,
                ..ModelConfig::toy()
            },
            mask: MaskConfig::default(),
            loss: LossConfig {
                tau: 0.1,
                lambda: 1.0,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 3,
                batch_size: 4,
                ..Default::default()
            },
            eval: Default::default(),
        }
    }

    fn toy_samples(cfg: &ModelConfig, n_spk: usize, per: usize) -> Vec<Sample> {
        synth_dataset(&SynthSpec::for_model(cfg, n_spk, per), cfg).unwrap()
    }

    #[test]
    fn synth_counts_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::for_model(&ModelConfig::toy(), 4, 8);
        spec.seed = 3;
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(m.len(), 32);
        let count = |sub: &str| fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(count("images") + count("spectrograms"), 64);
        let reloaded = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.records, m.records);
        let trials = crate::metrics::parse_trials(&dir.path().join("trials.txt")).unwrap();
        assert_eq!(trials.len(), 32 * 31 / 2);
    }

    #[test]
    fn zero_noise_speakers_are_constant() {
        let mut spec = SynthSpec::for_model(&ModelConfig::toy(), 3, 4);
        spec.noise_std = 0.0;
        let s = synthesize(&spec).unwrap();
        for chunk in s.chunks(4) {
            for x in chunk {
                assert_eq!(x.image, chunk[0].image);
                assert_eq!(x.spectrogram, chunk[0].spectrogram);
            }
        }
        assert_ne!(s[0].image, s[4].image);
    }

    #[test]
    fn speaker_offset_keeps_maps() {
        let mut spec = SynthSpec::for_model(&ModelConfig::toy(), 4, 1);
        spec.noise_std = 0.0;
        let all = synthesize(&spec).unwrap();
        spec.speaker_offset = 2;
        spec.n_speakers = 2;
        let tail = synthesize(&spec).unwrap();
        assert_eq!(tail[0].image, all[2].image);
        assert_eq!(tail[1].id, all[3].id);
    }

    #[test]
    fn epochs_are_permutations() {
        let root = RngStream::new(5);
        let n = 10;
        let seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(&root, n, 4, s)).collect();
        for epoch in seen.chunks(n) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            assert_eq!(e, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ratios_do_not_depend_on_batch_size() {
        let cfg = toy_cfg();
        let samples = toy_samples(&cfg.model, 2, 4);
        let root = RngStream::new(1);
        for step in 0..5 {
            let b2: Vec<&Sample> = samples[..2].iter().collect();
            let b6: Vec<&Sample> = samples[..6].iter().collect();
            let p2 = make_plans(&root, &cfg.mask, step, &b2).unwrap();
            let p6 = make_plans(&root, &cfg.mask, step, &b6).unwrap();
            assert_eq!(p2[0].ratio_audio, p6[0].ratio_audio);
            assert_eq!(p2[0].ratio_visual, p6[0].ratio_visual);
            assert_eq!(p2[1], p6[1]);
        }
    }

    #[test]
    fn lambda_zero_leaves_contrastive_path_out() {
        let mut cfg = toy_cfg();
        cfg.loss.lambda = 0.0;
        let samples = toy_samples(&cfg.model, 2, 2);
        let batch: Vec<&Sample> = samples.iter().collect();
        let state: ModelState<f64> = ModelState::init(cfg.model.clone(), &RngStream::new(0)).unwrap();
        let plans = make_plans(&RngStream::new(0), &cfg.mask, 0, &batch).unwrap();
        let mut tape = Tape::new();
        let obj = batch_objective(&mut tape, &state, &batch, &plans, &cfg.loss).unwrap();
        let grads = tape.backward(obj.total).unwrap();
        assert!(!grads.reached(obj.l_c));
        assert!(!grads.reached(obj.f_audio));
        assert!(tape.value(obj.l_c).item() > 0.0);
        let dec = grads.param("decoder.out.w").unwrap();
        assert!(dec.data().iter().any(|&g| g != 0.0));
        let bb = grads.param("backbone.patch_proj.w").unwrap();
        assert!(bb.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn identical_runs_identical_reports() {
        let cfg = toy_cfg();
        let samples = toy_samples(&cfg.model, 2, 4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train_on(&cfg, &samples, a.path(), None).unwrap();
        let rb = train_on(&cfg, &samples, b.path(), None).unwrap();
        assert_eq!(ra.records, rb.records);
        assert_eq!(
            fs::read(a.path().join("metrics.jsonl")).unwrap(),
            fs::read(b.path().join("metrics.jsonl")).unwrap()
        );
    }

    #[test]
    fn one_step_one_record() {
        let mut cfg = toy_cfg();
        cfg.train.steps = 1;
        let samples = toy_samples(&cfg.model, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let out = train_on(&cfg, &samples, dir.path(), None).unwrap();
        assert_eq!(out.records.len(), 1);
        let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert!(out.final_checkpoint.exists());
        assert_eq!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 0);
        let full = fs::metadata(&out.final_checkpoint).unwrap().len();
        let inf = fs::metadata(&out.inference_checkpoint).unwrap().len();
        assert!(inf < full);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let cfg = ModelConfig::toy();
        let mut state: ModelState<f64> = ModelState::init(cfg, &RngStream::new(0)).unwrap();
        let before = state.params["backbone.patch_proj.b"].clone();
        let mut grads = IndexMap::new();
        grads.insert(
            "backbone.patch_proj.b".to_string(),
            DTensor::full(&[8], 0.5),
        );
        let mut opt = OptState::new(OptimizerKind::Sgd);
        opt.step(&mut state, &grads, 0.1, None).unwrap();
        let after = &state.params["backbone.patch_proj.b"];
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let cfg = ModelConfig::toy();
        let mut state: ModelState<f64> = ModelState::init(cfg, &RngStream::new(0)).unwrap();
        let before = state.params["backbone.patch_proj.b"].clone();
        let mut grads = IndexMap::new();
        grads.insert("backbone.patch_proj.b".to_string(), DTensor::full(&[8], 10.0));
        let mut opt = OptState::new(OptimizerKind::Sgd);
        let norm = opt.step(&mut state, &grads, 1.0, Some(1.0)).unwrap();
        assert!((norm - (800.0f64).sqrt()).abs() < 1e-9);
        let delta: f64 = state.params["backbone.patch_proj.b"]
            .data()
            .iter()
            .zip(before.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((delta - 1.0).abs() < 1e-12);
    }
}
