//! Inference-time embeddings (audio, visual, or their mean), cosine scoring
//! and retrieval checks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ScoreSet, TrialSet};
use crate::model::{self, Embedding, EmbeddingModality, ModelState};
use crate::numcore::{kernels, Tape};
use crate::patchio::{self, Manifest, ManifestRecord, Modality, TokenSequence};

/// Which embedding to produce.
pub type ModalityRequest = EmbeddingModality;

/// Encodes every token (no masking) and mean-pools the backbone features.
pub fn embed_tokens(state: &ModelState<f32>, seq: &TokenSequence) -> Result<Embedding> {
    let mut tape = Tape::<f32>::new();
    let feats = model::encode(&mut tape, state, seq)?;
    model::pool_embedding(tape.value(feats), seq.modality.into())
}

/// Elementwise mean of one audio and one visual embedding, in either order.
pub fn fuse(x: &Embedding, y: &Embedding) -> Result<Embedding> {
    let (a, v) = match (x.modality, y.modality) {
        (EmbeddingModality::Audio, EmbeddingModality::Visual) => (x, y),
        (EmbeddingModality::Visual, EmbeddingModality::Audio) => (y, x),
        (p, q) => {
            return Err(Error::Modality(format!(
                "fusion needs one audio and one visual embedding, got {p:?} and {q:?}"
            )))
        }
    };
    if a.dim() != v.dim() {
        return Err(Error::Dimension(format!(
            "audio dim {} vs visual dim {}",
            a.dim(),
            v.dim()
        )));
    }
    Ok(Embedding {
        values: a
            .values
            .iter()
            .zip(&v.values)
            .map(|(&p, &q)| (p + q) * 0.5)
            .collect(),
        modality: EmbeddingModality::Audiovisual,
    })
}

pub fn embed(
    audio: Option<&TokenSequence>,
    visual: Option<&TokenSequence>,
    mode: ModalityRequest,
    state: &ModelState<f32>,
) -> Result<Embedding> {
    let need = |seq: Option<&TokenSequence>, m: Modality| -> Result<Embedding> {
        let seq = seq.ok_or_else(|| {
            Error::Modality(format!("{mode:?} embedding requires the {} input", m.as_str()))
        })?;
        if seq.modality != m {
            return Err(Error::Modality(format!(
                "expected {} tokens, got {}",
                m.as_str(),
                seq.modality.as_str()
            )));
        }
        embed_tokens(state, seq)
    };
    match mode {
        EmbeddingModality::Audio => need(audio, Modality::Audio),
        EmbeddingModality::Visual => need(visual, Modality::Visual),
        EmbeddingModality::Audiovisual => {
            let a = need(audio, Modality::Audio)?;
            let v = need(visual, Modality::Visual)?;
            fuse(&a, &v)
        }
    }
}

/// Loads only the inputs `mode` needs and embeds them.
pub fn embed_record(
    manifest: &Manifest,
    rec: &ManifestRecord,
    mode: ModalityRequest,
    state: &ModelState<f32>,
) -> Result<Embedding> {
    let p = state.config.patch_size;
    let inner = || -> Result<Embedding> {
        let audio = match mode {
            EmbeddingModality::Visual => None,
            _ => Some(patchio::tokenize_file(
                &manifest.resolve(&rec.spectrogram),
                Modality::Audio,
                p,
            )?),
        };
        let visual = match mode {
            EmbeddingModality::Audio => None,
            _ => Some(patchio::tokenize_file(&manifest.resolve(&rec.image), Modality::Visual, p)?),
        };
        embed(audio.as_ref(), visual.as_ref(), mode, state)
    };
    inner().map_err(|e| Error::Sample {
        id: rec.id.clone(),
        source: Box::new(e),
    })
}

/// Cosine similarity in `[-1, 1]`.
pub fn score(e1: &Embedding, e2: &Embedding) -> Result<f64> {
    score_vectors(&e1.values, &e2.values)
}

pub fn score_vectors(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    kernels::cosine(&a, &b)
}

/// Fraction of queries whose most similar key (cosine) carries the same
/// label as the query. `labels[i]` labels both `queries[i]` and `keys[i]`;
/// pass `0..n` for instance-level retrieval.
pub fn recall_at_1<L: PartialEq>(queries: &[Vec<f32>], keys: &[Vec<f32>], labels: &[L]) -> Result<f64> {
    if queries.len() != keys.len() || queries.len() != labels.len() || queries.is_empty() {
        return Err(Error::Dimension(
            "recall needs equally many queries, keys and labels".into(),
        ));
    }
    let mut hits = 0;
    for (i, q) in queries.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, k) in keys.iter().enumerate() {
            let s = score_vectors(q, k)?;
            if s > best.0 {
                best = (s, j);
            }
        }
        hits += (labels[best.1] == labels[i]) as usize;
    }
    Ok(hits as f64 / queries.len() as f64)
}

// ---------------------------------------------------------------------------
// Embedding store: one UAVT vector per sample plus a JSON-lines index.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndexRecord {
    pub id: String,
    pub path: PathBuf,
    pub modality: EmbeddingModality,
}

pub const EMBEDDING_INDEX: &str = "embeddings.jsonl";

pub fn write_embeddings(dir: &Path, items: &[(String, Embedding)]) -> Result<PathBuf> {
    let vec_dir = dir.join("vectors");
    fs::create_dir_all(&vec_dir).map_err(|e| Error::io(&vec_dir, e))?;
    let index = dir.join(EMBEDDING_INDEX);
    let mut f = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    for (id, e) in items {
        let rel = PathBuf::from("vectors").join(format!("{id}.uavt"));
        patchio::write_uavt(&dir.join(&rel), &[e.dim()], &e.values)?;
        let rec = EmbeddingIndexRecord {
            id: id.clone(),
            path: rel,
            modality: e.modality,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&index, e))?;
    }
    Ok(index)
}

pub fn read_embedding(path: &Path) -> Result<Vec<f32>> {
    let (dims, data) = patchio::read_uavt(path)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!(
            "{}: embedding must be rank 1, got {dims:?}",
            path.display()
        )));
    }
    Ok(data)
}

/// Reads an embedding index (`embeddings.jsonl`) into id → vector.
pub fn read_embedding_index(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingIndexRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let p = if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            root.join(&rec.path)
        };
        out.insert(rec.id, read_embedding(&p)?);
    }
    Ok(out)
}

pub type ScoreRows = Vec<(String, String, f64)>;

/// Scores every trial; returns `(id1, id2, score)` rows in trial order and
/// the labelled score set.
pub fn score_trials(
    trials: &TrialSet,
    embeddings: &HashMap<String, Vec<f32>>,
) -> Result<(ScoreRows, ScoreSet)> {
    let mut rows = Vec::with_capacity(trials.len());
    let mut set = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let get = |id: &str| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::Precondition(format!("no embedding for `{id}`")))
        };
        let s = score_vectors(get(&t.enroll)?, get(&t.test)?)?;
        rows.push((t.enroll.clone(), t.test.clone(), s));
        set.push((s, t.label));
    }
    Ok((rows, ScoreSet::new(set)))
}

pub fn write_scores(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let mut body = String::new();
    for (a, b, s) in rows {
        body.push_str(&format!("{a} {b} {s}\n"));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::{DTensor, RngStream};

    fn e(values: Vec<f32>, modality: EmbeddingModality) -> Embedding {
        Embedding { values, modality }
    }

    fn toy() -> (ModelState<f32>, TokenSequence, TokenSequence) {
        let cfg = ModelConfig::toy();
        let state = ModelState::init(cfg.clone(), &RngStream::new(0)).unwrap();
        let mut rng = RngStream::new(1);
        let mk = |m: Modality, rng: &mut RngStream| TokenSequence {
            modality: m,
            tokens: DTensor::new(vec![4, 12], rng.normal_vec(48, 1.0)).unwrap(),
            grid: (2, 2),
            patch_size: 2,
            positions: (0..4).collect(),
        };
        let a = mk(Modality::Audio, &mut rng);
        let v = mk(Modality::Visual, &mut rng);
        (state, a, v)
    }

    #[test]
    fn score_examples() {
        let x = e(vec![0.3, -1.0, 2.0], EmbeddingModality::Audio);
        let neg = e(x.values.iter().map(|v| -v).collect(), EmbeddingModality::Audio);
        assert!((score(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((score(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let p = e(vec![1.0, 0.0], EmbeddingModality::Audio);
        let q = e(vec![0.0, 1.0], EmbeddingModality::Visual);
        assert_eq!(score(&p, &q).unwrap(), 0.0);
        let z = e(vec![0.0, 0.0], EmbeddingModality::Audio);
        assert!(matches!(score(&p, &z), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn fusion_is_exact_mean_and_order_free() {
        let (state, a, v) = toy();
        let ea = embed(Some(&a), None, EmbeddingModality::Audio, &state).unwrap();
        let ev = embed(None, Some(&v), EmbeddingModality::Visual, &state).unwrap();
        let av = embed(Some(&a), Some(&v), EmbeddingModality::Audiovisual, &state).unwrap();
        assert_eq!(ea.dim(), 8);
        assert_eq!(ev.dim(), 8);
        assert_eq!(av.dim(), 8);
        for i in 0..8 {
            assert_eq!(av.values[i], (ea.values[i] + ev.values[i]) / 2.0);
        }
        assert_eq!(fuse(&ev, &ea).unwrap(), av);
        assert!(fuse(&ea, &ea).is_err());
    }

    #[test]
    fn missing_inputs_rejected() {
        let (state, a, _) = toy();
        assert!(matches!(
            embed(Some(&a), None, EmbeddingModality::Audiovisual, &state),
            Err(Error::Modality(_))
        ));
        assert!(matches!(
            embed(None, None, EmbeddingModality::Audio, &state),
            Err(Error::Modality(_))
        ));
        assert!(matches!(
            embed(None, Some(&a), EmbeddingModality::Visual, &state),
            Err(Error::Modality(_))
        ));
    }

    #[test]
    fn decoder_free_state_embeds_deterministically() {
        let (state, a, _) = toy();
        let inf = state.inference_only();
        let x = embed(Some(&a), None, EmbeddingModality::Audio, &inf).unwrap();
        let y = embed(Some(&a), None, EmbeddingModality::Audio, &inf).unwrap();
        assert_eq!(x, y);
        assert_eq!(x, embed(Some(&a), None, EmbeddingModality::Audio, &state).unwrap());
    }

    #[test]
    fn recall_identity() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(recall_at_1(&q, &q, &[0, 1, 2]).unwrap(), 1.0);
        let k = vec![q[1].clone(), q[0].clone(), q[2].clone()];
        assert!((recall_at_1(&q, &k, &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // swapped keys share a label, so both count as hits
        assert_eq!(recall_at_1(&q, &k, &["a", "a", "b"]).unwrap(), 1.0);
    }

    #[test]
    fn embedding_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![
            ("a".to_string(), e(vec![1.0, 2.0], EmbeddingModality::Audio)),
            ("b".to_string(), e(vec![-1.0, 0.5], EmbeddingModality::Audio)),
        ];
        let idx = write_embeddings(dir.path(), &items).unwrap();
        let back = read_embedding_index(&idx).unwrap();
        assert_eq!(back["a"], vec![1.0, 2.0]);
        let trials = crate::metrics::parse_trials_str("1 a b\n0 b a\n").unwrap();
        let (rows, set) = score_trials(&trials, &back).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(set.scores[0].0, set.scores[1].0);
    }
}
