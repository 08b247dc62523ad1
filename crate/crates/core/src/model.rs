//! Shared-backbone encoder plus the training-only joint encoder/decoder.
//!
//! One patch projection and one stack of transformer blocks serve both
//! modalities. Positional embeddings are per modality. The joint encoder and
//! decoder (names under `joint.` and `decoder.`) are only needed for the
//! reconstruction objective and are dropped from inference checkpoints.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numcore::layers::{self, bind_param, block_param_shapes, linear, BlockVars};
use crate::numcore::{kernels, DTensor, Real, RngStream, Tape, Var};
use crate::patchio::{Modality, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Patch grid of the image, `(rows, cols)`; `M = rows · cols`.
    pub grid_visual: (usize, usize),
    /// Patch grid of the spectrogram; `N = rows · cols`.
    pub grid_audio: (usize, usize),
    #[serde(default = "default_joint_encoder_depth")]
    pub joint_encoder_depth: usize,
    #[serde(default = "default_joint_decoder_depth")]
    pub joint_decoder_depth: usize,
    pub decoder_dim: usize,
    #[serde(default)]
    pub decoder_heads: Option<usize>,
}

fn default_joint_encoder_depth() -> usize {
    2
}
fn default_joint_decoder_depth() -> usize {
    6
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            patch_size: 16,
            grid_visual: (4, 4),
            grid_audio: (4, 4),
            joint_encoder_depth: 2,
            joint_decoder_depth: 6,
            decoder_dim: 48,
            decoder_heads: None,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            patch_size: 2,
            grid_visual: (2, 2),
            grid_audio: (2, 2),
            joint_encoder_depth: 2,
            joint_decoder_depth: 6,
            decoder_dim: 8,
            decoder_heads: Some(2),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn num_visual(&self) -> usize {
        self.grid_visual.0 * self.grid_visual.1
    }

    pub fn num_audio(&self) -> usize {
        self.grid_audio.0 * self.grid_audio.1
    }

    pub fn decoder_heads(&self) -> usize {
        self.decoder_heads.unwrap_or(self.heads)
    }

    /// `(height, width)` of images the model accepts.
    pub fn visual_size(&self) -> (usize, usize) {
        (
            self.grid_visual.0 * self.patch_size,
            self.grid_visual.1 * self.patch_size,
        )
    }

    pub fn audio_size(&self) -> (usize, usize) {
        (
            self.grid_audio.0 * self.patch_size,
            self.grid_audio.1 * self.patch_size,
        )
    }

    pub fn grid(&self, m: Modality) -> (usize, usize) {
        match m {
            Modality::Audio => self.grid_audio,
            Modality::Visual => self.grid_visual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: String| Err(Error::Config(format!("model.{k}: {msg}")));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads", format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        let dh = self.decoder_heads();
        if self.decoder_dim == 0 || dh == 0 || !self.decoder_dim.is_multiple_of(dh) {
            return bad(
                "decoder_heads",
                format!("decoder_dim {} not divisible by {dh}", self.decoder_dim),
            );
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive".into());
        }
        if self.num_visual() < 2 {
            return bad("grid_visual", "need at least 2 patches".into());
        }
        if self.num_audio() < 2 {
            return bad("grid_audio", "need at least 2 patches".into());
        }
        Ok(())
    }

    /// Every parameter of the full training model, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dd, td) = (self.dim, self.decoder_dim, self.token_dim());
        let (n, m) = (self.num_audio(), self.num_visual());
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("backbone.patch_proj.w".into(), vec![td, d]),
            ("backbone.patch_proj.b".into(), vec![d]),
        ];
        let blocks = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, depth: usize, width: usize| {
            for i in 0..depth {
                for (name, shape) in block_param_shapes(width) {
                    out.push((format!("{prefix}.{i}.{name}"), shape));
                }
            }
        };
        blocks(&mut out, "backbone.blocks", self.depth, d);
        out.push(("embed.pos_audio".into(), vec![n, d]));
        out.push(("embed.pos_visual".into(), vec![m, d]));
        out.push(("joint.type_audio".into(), vec![d]));
        out.push(("joint.type_visual".into(), vec![d]));
        out.push(("joint.pos_audio".into(), vec![n, d]));
        out.push(("joint.pos_visual".into(), vec![m, d]));
        blocks(&mut out, "joint.encoder", self.joint_encoder_depth, d);
        out.push(("decoder.adapter.w".into(), vec![d, dd]));
        out.push(("decoder.adapter.b".into(), vec![dd]));
        out.push(("decoder.mask_token".into(), vec![dd]));
        out.push(("decoder.type_audio".into(), vec![dd]));
        out.push(("decoder.type_visual".into(), vec![dd]));
        out.push(("decoder.pos_audio".into(), vec![n, dd]));
        out.push(("decoder.pos_visual".into(), vec![m, dd]));
        blocks(&mut out, "decoder.blocks", self.joint_decoder_depth, dd);
        out.push(("decoder.norm.gamma".into(), vec![dd]));
        out.push(("decoder.norm.beta".into(), vec![dd]));
        out.push(("decoder.out.w".into(), vec![dd, td]));
        out.push(("decoder.out.b".into(), vec![td]));
        out
    }
}

/// Parameters used only by the reconstruction branch.
pub fn is_discardable(name: &str) -> bool {
    name.starts_with("joint.") || name.starts_with("decoder.")
}

/// Shared backbone and patch projection (counted twice by a dual-encoder design).
pub fn is_shared_backbone(name: &str) -> bool {
    name.starts_with("backbone.")
}

fn init_value(name: &str, shape: &[usize], rng: &mut RngStream) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let in_block = name.contains(".blocks.") || name.starts_with("joint.encoder.");
    match leaf {
        "gamma" => vec![1.0; n],
        "beta" | "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => vec![0.0; n],
        "wq" | "wk" | "wv" | "wo" | "w1" | "w2" if in_block => {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.uniform(-limit, limit)).collect()
        }
        _ => (0..n).map(|_| rng.truncated_normal(0.02)).collect(),
    }
}

/// Named parameter map for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real = f32> {
    pub config: ModelConfig,
    pub params: IndexMap<String, DTensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    Shared,
    DualHypothetical,
}

impl<T: Real> ModelState<T> {
    /// Seeded initialization; each parameter draws from its own substream.
    pub fn init(config: ModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            let mut r = rng.substream(&format!("init:{name}"), 0);
            let vals = init_value(&name, &shape, &mut r);
            params.insert(name, DTensor::from_f64(shape, &vals)?);
        }
        Ok(ModelState { config, params })
    }

    /// Builds a state from loaded tensors, checking names and shapes. With
    /// `inference_only`, the reconstruction branch may be absent.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: &IndexMap<String, DTensor<f32>>,
        inference_only: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    params.insert(name, t.cast::<T>());
                }
                Some(t) => {
                    return Err(Error::Dimension(format!(
                        "parameter `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None if inference_only && is_discardable(&name) => {}
                None => return Err(Error::Config(format!("checkpoint lacks `{name}`"))),
            }
        }
        Ok(ModelState { config, params })
    }

    pub fn get(&self, name: &str) -> Result<&DTensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn has_decoder(&self) -> bool {
        self.params.keys().any(|k| is_discardable(k))
    }

    /// Copy without the joint encoder/decoder.
    pub fn inference_only(&self) -> Self {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .filter(|(k, _)| !is_discardable(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn to_f32_tensors(&self) -> IndexMap<String, DTensor<f32>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }

    pub fn count_parameters(&self, sharing: Sharing) -> usize {
        let total: usize = self.params.values().map(DTensor::len).sum();
        match sharing {
            Sharing::Shared => total,
            Sharing::DualHypothetical => total + self.backbone_parameters(),
        }
    }

    /// Patch projection plus backbone blocks.
    pub fn backbone_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| is_shared_backbone(k))
            .map(|(_, v)| v.len())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Forward passes

fn pos_name(prefix: &str, m: Modality) -> String {
    format!("{prefix}.pos_{}", m.as_str())
}

fn type_name(prefix: &str, m: Modality) -> String {
    format!("{prefix}.type_{}", m.as_str())
}

/// Patch projection, positional embeddings gathered at each token's grid
/// index, then the shared backbone blocks. Returns `[T, D]` token features.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    seq: &TokenSequence,
) -> Result<Var> {
    let cfg = &state.config;
    if seq.tokens.cols() != cfg.token_dim() {
        return Err(Error::Dimension(format!(
            "token width {} vs model token width {}",
            seq.tokens.cols(),
            cfg.token_dim()
        )));
    }
    let grid_len = cfg.grid(seq.modality).0 * cfg.grid(seq.modality).1;
    if let Some(&bad) = seq.positions.iter().find(|&&p| p >= grid_len) {
        return Err(Error::Geometry(format!(
            "grid index {bad} out of range for {} grid of {grid_len}",
            seq.modality.as_str()
        )));
    }
    let x = tape.leaf(seq.tokens.cast::<T>())?;
    let w = bind_param(tape, &state.params, "backbone.patch_proj.w")?;
    let b = bind_param(tape, &state.params, "backbone.patch_proj.b")?;
    let mut h = linear(tape, x, w, b)?;
    let pos = bind_param(tape, &state.params, &pos_name("embed", seq.modality))?;
    let pe = tape.gather_rows(pos, &seq.positions)?;
    h = tape.add(h, pe)?;
    for i in 0..cfg.depth {
        let blk = BlockVars::bind(tape, &state.params, &format!("backbone.blocks.{i}"))?;
        h = layers::transformer_block(tape, h, &blk, cfg.heads)?;
    }
    Ok(h)
}

/// Feature rows of each modality must be ordered like the corresponding
/// `unmasked` list of the plan. Output is audio rows followed by visual rows.
pub fn joint_encode<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    feat_audio: Var,
    pos_audio: &[usize],
    feat_visual: Var,
    pos_visual: &[usize],
) -> Result<Var> {
    let cfg = &state.config;
    let mut parts = Vec::with_capacity(2);
    for (m, feat, pos) in [
        (Modality::Audio, feat_audio, pos_audio),
        (Modality::Visual, feat_visual, pos_visual),
    ] {
        let (rows, cols) = tape.value(feat).rows_cols();
        if cols != cfg.dim || rows != pos.len() {
            return Err(Error::Dimension(format!(
                "{} features [{rows}, {cols}] vs {} positions at width {}",
                m.as_str(),
                pos.len(),
                cfg.dim
            )));
        }
        let p = bind_param(tape, &state.params, &pos_name("joint", m))?;
        let pe = tape.gather_rows(p, pos)?;
        let ty = bind_param(tape, &state.params, &type_name("joint", m))?;
        let h = tape.add(feat, pe)?;
        parts.push(tape.add_row(h, ty)?);
    }
    let mut h = tape.concat_rows(&parts)?;
    for i in 0..cfg.joint_encoder_depth {
        let blk = BlockVars::bind(tape, &state.params, &format!("joint.encoder.{i}"))?;
        h = layers::transformer_block(tape, h, &blk, cfg.heads)?;
    }
    Ok(h)
}

/// Inserts the mask token at masked grid cells, adds decoder positional and
/// type embeddings, runs the decoder and projects back to patch space.
/// Returns full-length `(audio [N, P·P·3], visual [M, P·P·3])` reconstructions.
pub fn joint_decode<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    joint: Var,
    plan: &MaskPlan,
) -> Result<(Var, Var)> {
    let cfg = &state.config;
    let (n, m) = (cfg.num_audio(), cfg.num_visual());
    plan.validate(n, m)?;
    let na = plan.audio.unmasked.len();
    let nv = plan.visual.unmasked.len();
    let rows = tape.value(joint).rows();
    if rows != na + nv {
        return Err(Error::Geometry(format!(
            "joint sequence has {rows} rows, plan keeps {na} audio + {nv} visual"
        )));
    }
    let aw = bind_param(tape, &state.params, "decoder.adapter.w")?;
    let ab = bind_param(tape, &state.params, "decoder.adapter.b")?;
    let z = linear(tape, joint, aw, ab)?;
    let mask_tok = bind_param(tape, &state.params, "decoder.mask_token")?;

    let mut parts = Vec::with_capacity(2);
    for (modality, entry, offset, len) in [
        (Modality::Audio, &plan.audio, 0, n),
        (Modality::Visual, &plan.visual, na, m),
    ] {
        let mut sources = vec![(mask_tok, 0); len];
        for (k, &pos) in entry.unmasked.iter().enumerate() {
            sources[pos] = (z, offset + k);
        }
        let full = tape.select_rows(sources)?;
        let pe = bind_param(tape, &state.params, &pos_name("decoder", modality))?;
        let ty = bind_param(tape, &state.params, &type_name("decoder", modality))?;
        let h = tape.add(full, pe)?;
        parts.push(tape.add_row(h, ty)?);
    }
    let mut h = tape.concat_rows(&parts)?;
    for i in 0..cfg.joint_decoder_depth {
        let blk = BlockVars::bind(tape, &state.params, &format!("decoder.blocks.{i}"))?;
        h = layers::transformer_block(tape, h, &blk, cfg.decoder_heads())?;
    }
    let g = bind_param(tape, &state.params, "decoder.norm.gamma")?;
    let b = bind_param(tape, &state.params, "decoder.norm.beta")?;
    h = tape.layer_norm(h, g, b)?;
    let ow = bind_param(tape, &state.params, "decoder.out.w")?;
    let ob = bind_param(tape, &state.params, "decoder.out.b")?;
    let out = linear(tape, h, ow, ob)?;
    let audio = tape.gather_rows(out, &(0..n).collect::<Vec<_>>())?;
    let visual = tape.gather_rows(out, &(n..n + m).collect::<Vec<_>>())?;
    Ok((audio, visual))
}

/// Names of the parameters an encoder forward pass of `modality` reads.
pub fn touched_parameters<T: Real>(state: &ModelState<T>, modality: Modality) -> Result<Vec<String>> {
    let cfg = &state.config;
    let (r, c) = cfg.grid(modality);
    let n = r * c;
    let seq = TokenSequence {
        modality,
        tokens: DTensor::full(&[n, cfg.token_dim()], 0.5),
        grid: (r, c),
        patch_size: cfg.patch_size,
        positions: (0..n).collect(),
    };
    let mut tape = Tape::<T>::new();
    encode(&mut tape, state, &seq)?;
    Ok(tape.param_names())
}

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingModality {
    Audio,
    Visual,
    Audiovisual,
}

impl From<Modality> for EmbeddingModality {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Audio => EmbeddingModality::Audio,
            Modality::Visual => EmbeddingModality::Visual,
        }
    }
}

/// Pooled fixed-width representation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub modality: EmbeddingModality,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Mean over token features, tagged with its modality.
pub fn pool_embedding(features: &DTensor<f32>, modality: EmbeddingModality) -> Result<Embedding> {
    let pooled = kernels::mean_pool(features)?;
    pooled.ensure_finite("embedding")?;
    Ok(Embedding {
        values: pooled.into_data(),
        modality,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: u64 LE header length | JSON header | concatenated LE f32 payloads.

pub const CHECKPOINT_FORMAT: &str = "uavssl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the payload, relative to the end of the header.
    pub offset: u64,
    pub discardable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub model: ModelConfig,
    /// Free-form run metadata (training config, optimizer bookkeeping).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub model: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, DTensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                discardable: is_discardable(name) || name.starts_with("optim."),
            });
            offset += 4 * t.len() as u64;
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            step: self.step,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Corruption("checkpoint shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corruption("checkpoint header truncated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let payload = &bytes[body..];
        let mut tensors = IndexMap::new();
        let mut expected = 0u64;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Corruption(format!("tensor `{}` at unexpected offset", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Corruption(format!("payload of `{}` truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), DTensor::new(e.shape.clone(), data)?);
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(Error::Corruption("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_state<T: Real>(state: &ModelState<T>, step: u64, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: CheckpointKind::Full,
            step,
            model: state.config.clone(),
            meta,
            tensors: state.to_f32_tensors(),
        }
    }

    pub fn model_state<T: Real>(&self) -> Result<ModelState<T>> {
        ModelState::from_tensors(
            self.model.clone(),
            &self.tensors,
            self.kind == CheckpointKind::Inference,
        )
    }

    /// Keeps only what inference needs: the backbone and its embeddings.
    pub fn inference_export(&self) -> Self {
        Checkpoint {
            kind: CheckpointKind::Inference,
            step: self.step,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !is_discardable(k) && !k.starts_with("optim."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{apply_mask, MaskEntry};

    fn seq_for(cfg: &ModelConfig, m: Modality, seed: u64) -> TokenSequence {
        let (r, c) = cfg.grid(m);
        let n = r * c;
        let mut rng = RngStream::new(seed);
        TokenSequence {
            modality: m,
            tokens: DTensor::new(vec![n, cfg.token_dim()], rng.normal_vec(n * cfg.token_dim(), 1.0))
                .unwrap(),
            grid: (r, c),
            patch_size: cfg.patch_size,
            positions: (0..n).collect(),
        }
    }

    fn toy_state() -> ModelState<f64> {
        ModelState::init(ModelConfig::toy(), &RngStream::new(1)).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = toy_state();
        let b = toy_state();
        assert_eq!(a, b);
        for t in a.params.values() {
            t.ensure_finite("param").unwrap();
        }
    }

    #[test]
    fn shared_parameter_audit() {
        let s = toy_state();
        let audio = touched_parameters(&s, Modality::Audio).unwrap();
        let visual = touched_parameters(&s, Modality::Visual).unwrap();
        let strip = |v: &[String]| -> Vec<String> {
            v.iter().filter(|n| is_shared_backbone(n)).cloned().collect()
        };
        assert_eq!(strip(&audio), strip(&visual));
        assert_eq!(strip(&audio).len(), 2 + 16 * s.config.depth);
        assert!(audio.contains(&"embed.pos_audio".to_string()));
        assert!(visual.contains(&"embed.pos_visual".to_string()));
    }

    #[test]
    fn depth_zero_encoder_is_projection_plus_position() {
        let cfg = ModelConfig {
            depth: 0,
            ..ModelConfig::toy()
        };
        let s: ModelState<f64> = ModelState::init(cfg.clone(), &RngStream::new(2)).unwrap();
        let seq = seq_for(&cfg, Modality::Visual, 3);
        let mut tape = Tape::new();
        let out = encode(&mut tape, &s, &seq).unwrap();
        let w = s.get("backbone.patch_proj.w").unwrap();
        let b = s.get("backbone.patch_proj.b").unwrap();
        let pos = s.get("embed.pos_visual").unwrap();
        let x = seq.tokens.cast::<f64>();
        let proj = kernels::matmul(x.data(), w.data(), 4, cfg.token_dim(), cfg.dim);
        for i in 0..4 {
            for j in 0..cfg.dim {
                let want = proj[i * cfg.dim + j] + b.data()[j] + pos.data()[i * cfg.dim + j];
                assert_eq!(tape.value(out).data()[i * cfg.dim + j], want);
            }
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let s = toy_state();
        let seq = seq_for(&s.config, Modality::Audio, 4);
        let perm = [2usize, 0, 3, 1];
        let permuted = seq.select(&perm);
        let mut t1 = Tape::new();
        let a = encode(&mut t1, &s, &seq).unwrap();
        let mut t2 = Tape::new();
        let b = encode(&mut t2, &s, &permuted).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            let ra = t1.value(a).row(src);
            let rb = t2.value(b).row(k);
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_rejects_out_of_range_grid_index() {
        let s = toy_state();
        let mut seq = seq_for(&s.config, Modality::Audio, 4);
        seq.positions[0] = 99;
        assert!(matches!(
            encode(&mut Tape::new(), &s, &seq),
            Err(Error::Geometry(_))
        ));
    }

    fn run_joint(
        s: &ModelState<f64>,
        plan: &MaskPlan,
        a: &TokenSequence,
        v: &TokenSequence,
    ) -> (Tape<f64>, Var, Var, Var) {
        let ka = a.select(&plan.audio.unmasked);
        let kv = v.select(&plan.visual.unmasked);
        let mut tape = Tape::new();
        let fa = encode(&mut tape, s, &ka).unwrap();
        let fv = encode(&mut tape, s, &kv).unwrap();
        let j = joint_encode(&mut tape, s, fa, &ka.positions, fv, &kv.positions).unwrap();
        let (ra, rv) = joint_decode(&mut tape, s, j, plan).unwrap();
        (tape, j, ra, rv)
    }

    fn plan(audio_kept: Vec<usize>, visual_kept: Vec<usize>, n: usize, m: usize) -> MaskPlan {
        let entry = |kept: Vec<usize>, n: usize| MaskEntry {
            masked: (0..n).filter(|i| !kept.contains(i)).collect(),
            unmasked: kept,
        };
        MaskPlan {
            ratio_audio: 0.5,
            ratio_visual: 0.5,
            audio: entry(audio_kept, n),
            visual: entry(visual_kept, m),
        }
    }

    #[test]
    fn joint_shapes_and_boundary() {
        let s = toy_state();
        let a = seq_for(&s.config, Modality::Audio, 5);
        let v = seq_for(&s.config, Modality::Visual, 6);
        let p = plan(vec![1, 3], vec![0], 4, 4);
        let (tape, j, ra, rv) = run_joint(&s, &p, &a, &v);
        assert_eq!(tape.value(j).shape(), &[3, 8]);
        assert_eq!(tape.value(ra).shape(), &[4, 12]);
        assert_eq!(tape.value(rv).shape(), &[4, 12]);
    }

    #[test]
    fn different_plans_give_different_reconstructions() {
        let s = toy_state();
        let a = seq_for(&s.config, Modality::Audio, 5);
        let v = seq_for(&s.config, Modality::Visual, 6);
        let (t1, _, ra1, _) = run_joint(&s, &plan(vec![0, 1], vec![0, 1], 4, 4), &a, &v);
        let (t2, _, ra2, _) = run_joint(&s, &plan(vec![2, 3], vec![0, 1], 4, 4), &a, &v);
        assert!(t1.value(ra1).max_abs_diff(t2.value(ra2)) > 1e-6);
    }

    #[test]
    fn joint_decode_checks_plan_against_rows() {
        let s = toy_state();
        let a = seq_for(&s.config, Modality::Audio, 5);
        let v = seq_for(&s.config, Modality::Visual, 6);
        let p = plan(vec![0, 1], vec![0, 1], 4, 4);
        let (mut tape, j, _, _) = run_joint(&s, &p, &a, &v);
        let other = plan(vec![0], vec![0, 1], 4, 4);
        assert!(matches!(
            joint_decode(&mut tape, &s, j, &other),
            Err(Error::Geometry(_))
        ));
        let mut broken = p.clone();
        broken.audio.masked.push(0);
        assert!(joint_decode(&mut tape, &s, j, &broken).is_err());
    }

    #[test]
    fn zeroed_types_treat_segments_identically() {
        let mut s = toy_state();
        for name in ["joint.type_audio", "joint.type_visual"] {
            s.params[name] = DTensor::zeros(&[8]);
        }
        let pv = s.params["joint.pos_visual"].clone();
        s.params["joint.pos_audio"] = pv;
        let mut tape = Tape::new();
        let feats = DTensor::new(vec![2, 8], RngStream::new(8).normal_vec(16, 1.0)).unwrap();
        let fa = tape.leaf(feats.clone()).unwrap();
        let fv = tape.leaf(feats).unwrap();
        let j = joint_encode(&mut tape, &s, fa, &[0, 3], fv, &[0, 3]).unwrap();
        let out = tape.value(j);
        for r in 0..2 {
            assert_eq!(out.row(r), out.row(r + 2));
        }
    }

    #[test]
    fn type_embeddings_receive_gradient() {
        let s = toy_state();
        let a = seq_for(&s.config, Modality::Audio, 5);
        let v = seq_for(&s.config, Modality::Visual, 6);
        let mut rng = RngStream::new(3);
        let (_, ea) = apply_mask(&a, 0.5, &mut rng).unwrap();
        let (_, ev) = apply_mask(&v, 0.5, &mut rng).unwrap();
        let p = MaskPlan {
            ratio_audio: 0.5,
            ratio_visual: 0.5,
            audio: ea,
            visual: ev,
        };
        let (mut tape, _, ra, rv) = run_joint(&s, &p, &a, &v);
        let la = tape.sum(ra).unwrap();
        let lv = tape.sum(rv).unwrap();
        let sq = tape.mul(la, lv).unwrap();
        let grads = tape.backward(sq).unwrap();
        for name in ["joint.type_audio", "joint.type_visual"] {
            let g = grads.param(name).unwrap();
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} got no gradient");
        }
    }

    #[test]
    fn parameter_counts() {
        let s = toy_state();
        let shared = s.count_parameters(Sharing::Shared);
        let dual = s.count_parameters(Sharing::DualHypothetical);
        assert_eq!(dual, shared + s.backbone_parameters());
        assert_eq!(
            s.backbone_parameters(),
            12 * 8 + 8 + 2 * layers::block_param_count(8)
        );
        assert_eq!(shared, toy_state().count_parameters(Sharing::Shared));
    }

    #[test]
    fn depth_zero_hand_count() {
        let cfg = ModelConfig {
            dim: 4,
            depth: 0,
            heads: 2,
            patch_size: 1,
            grid_visual: (1, 2),
            grid_audio: (1, 3),
            joint_encoder_depth: 0,
            joint_decoder_depth: 0,
            decoder_dim: 2,
            decoder_heads: Some(1),
        };
        let s: ModelState<f32> = ModelState::init(cfg, &RngStream::new(0)).unwrap();
        // projection 3*4+4, pos 3*4 + 2*4, joint types 2*4, joint pos 3*4+2*4,
        // adapter 4*2+2, mask 2, decoder types 2*2, decoder pos 3*2+2*2,
        // norm 2+2, out 2*3+3
        let want = 16 + 20 + 8 + 20 + 10 + 2 + 4 + 10 + 4 + 9;
        assert_eq!(s.count_parameters(Sharing::Shared), want);
        assert_eq!(s.count_parameters(Sharing::DualHypothetical), want + 16);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let s = toy_state();
        let ck = Checkpoint::from_state(&s, 7, serde_json::json!({"note": "x", "lr": 0.001}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let s2: ModelState<f32> = back.model_state().unwrap();
        assert_eq!(s2, s.cast::<f32>());
    }

    #[test]
    fn inference_export_is_smaller_and_loadable() {
        let s = toy_state();
        let ck = Checkpoint::from_state(&s, 0, serde_json::Value::Null);
        let inf = ck.inference_export();
        assert!(inf.to_bytes().unwrap().len() < ck.to_bytes().unwrap().len());
        let st: ModelState<f32> = inf.model_state().unwrap();
        assert!(!st.has_decoder());
        // a full checkpoint missing decoder params is rejected
        let mut broken = inf.clone();
        broken.kind = CheckpointKind::Full;
        assert!(broken.model_state::<f32>().is_err());
    }

    #[test]
    fn corrupt_checkpoint_detected() {
        let s = toy_state();
        let bytes = Checkpoint::from_state(&s, 0, serde_json::Value::Null)
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn pool_embedding_matches_mean_pool() {
        let x = DTensor::new(vec![3, 4], RngStream::new(1).normal_vec(12, 1.0)).unwrap();
        let e = pool_embedding(&x, EmbeddingModality::Visual).unwrap();
        assert_eq!(e.values, kernels::mean_pool(&x).unwrap().into_data());
        let one = DTensor::new(vec![1, 4], x.row(0).to_vec()).unwrap();
        assert_eq!(pool_embedding(&one, EmbeddingModality::Audio).unwrap().values, x.row(0));
        let dup = DTensor::new(vec![2, 4], [x.row(0), x.row(0)].concat()).unwrap();
        assert_eq!(pool_embedding(&dup, EmbeddingModality::Audio).unwrap().values, x.row(0));
        let empty = DTensor::<f32>::new(vec![0, 4], vec![]).unwrap();
        assert!(matches!(
            pool_embedding(&empty, EmbeddingModality::Audio),
            Err(Error::EmptyPool)
        ));
    }
}
