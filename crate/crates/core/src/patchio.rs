//! Tensor files, channel inflation and patch tokenization.
//!
//! UAVT layout (little-endian throughout):
//!
//! ```text
//! "UAVT" | version u8 = 1 | dtype u8 (0 = f32) | ndim u8 | reserved u8
//! ndim × u32 dims | payload: product(dims) × f32, row-major
//! ```
//!
//! Images and spectrograms are stored as `[H, W, C]` (channel innermost);
//! a rank-2 `[H, W]` file is read as a single-channel input.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::DTensor;

pub const UAVT_MAGIC: &[u8; 4] = b"UAVT";
pub const UAVT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// An image (`channels == 3`) or spectrogram (`channels == 1` on disk) in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInput {
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawInput {
    pub fn new(
        modality: Modality,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} input with {} values",
                data.len()
            )));
        }
        Ok(RawInput {
            modality,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Checks the on-disk channel convention for the modality.
    pub fn validate_channels(&self) -> Result<()> {
        let want = match self.modality {
            Modality::Audio => 1,
            Modality::Visual => 3,
        };
        if self.channels != want {
            return Err(Error::Precondition(format!(
                "{} input must have {want} channel(s), got {}",
                self.modality.as_str(),
                self.channels
            )));
        }
        Ok(())
    }
}

/// Flattened non-overlapping patches of one input, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    /// `[T, P·P·3]`
    pub tokens: DTensor<f32>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// Grid index of each token; `0..T` for a full sequence.
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Keeps the given token rows (by sequence index), preserving order.
    pub fn select(&self, rows: &[usize]) -> TokenSequence {
        let d = self.token_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.tokens.row(r));
        }
        TokenSequence {
            modality: self.modality,
            tokens: DTensor::new(vec![rows.len(), d], data).expect("row count"),
            grid: self.grid,
            patch_size: self.patch_size,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// UAVT files

pub fn encode_uavt(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", dims.len())));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Dimension(format!(
            "dims {dims:?} vs {} values",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(UAVT_MAGIC);
    out.extend_from_slice(&[UAVT_VERSION, DTYPE_F32, dims.len() as u8, 0]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_uavt(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != UAVT_MAGIC {
        return Err(Error::Format("missing UAVT magic".into()));
    }
    if bytes[4] != UAVT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Corruption("header truncated inside dims".into()));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * n {
        return Err(Error::Corruption(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_uavt(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_uavt(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_uavt(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_uavt(&bytes)
}

/// Reads an `[H, W]` or `[H, W, C]` tensor; the modality tag comes from the caller.
pub fn load_tensor(path: &Path, modality: Modality) -> Result<RawInput> {
    let (dims, data) = read_uavt(path)?;
    let (h, w, c) = match dims[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::Format(format!(
                "{}: expected rank 2 or 3, got dims {dims:?}",
                path.display()
            )))
        }
    };
    RawInput::new(modality, h, w, c, data)
}

pub fn save_tensor(path: &Path, x: &RawInput) -> Result<()> {
    write_uavt(path, &[x.height, x.width, x.channels], &x.data)
}

// ---------------------------------------------------------------------------
// Tokenization

/// Repeats a single-channel spectrogram across three channels.
pub fn inflate_channels(x: &RawInput) -> Result<RawInput> {
    if x.channels != 1 {
        return Err(Error::Precondition(format!(
            "channel inflation needs 1 channel, got {}",
            x.channels
        )));
    }
    let data = x.data.iter().flat_map(|&v| [v, v, v]).collect();
    RawInput::new(x.modality, x.height, x.width, 3, data)
}

pub fn patchify(x: &RawInput, patch_size: usize) -> Result<TokenSequence> {
    if x.channels != 3 {
        return Err(Error::Precondition(format!(
            "patchify needs 3 channels, got {}",
            x.channels
        )));
    }
    let p = patch_size;
    if p == 0 || !x.height.is_multiple_of(p) || !x.width.is_multiple_of(p) || x.height == 0 || x.width == 0 {
        return Err(Error::Geometry(format!(
            "{}x{} input is not divisible into {p}x{p} patches",
            x.height, x.width
        )));
    }
    let (gr, gc) = (x.height / p, x.width / p);
    let d = p * p * 3;
    let mut data = Vec::with_capacity(gr * gc * d);
    for r in 0..gr {
        for c in 0..gc {
            for i in 0..p {
                let start = ((r * p + i) * x.width + c * p) * 3;
                data.extend_from_slice(&x.data[start..start + p * 3]);
            }
        }
    }
    Ok(TokenSequence {
        modality: x.modality,
        tokens: DTensor::new(vec![gr * gc, d], data)?,
        grid: (gr, gc),
        patch_size: p,
        positions: (0..gr * gc).collect(),
    })
}

/// Inverse of [`patchify`]; token `i` is written to grid cell `positions[i]`.
pub fn unpatchify(t: &TokenSequence) -> Result<RawInput> {
    let (gr, gc) = t.grid;
    let p = t.patch_size;
    let n = gr * gc;
    let d = p * p * 3;
    if t.tokens.shape() != [n, d] || t.positions.len() != n {
        return Err(Error::Geometry(format!(
            "grid {gr}x{gc} with patch {p} needs [{n}, {d}] tokens, got {:?}",
            t.tokens.shape()
        )));
    }
    let mut seen = vec![false; n];
    for &pos in &t.positions {
        if pos >= n || std::mem::replace(&mut seen[pos], true) {
            return Err(Error::Geometry(format!(
                "positions are not a permutation of the {gr}x{gc} grid"
            )));
        }
    }
    let (h, w) = (gr * p, gc * p);
    let mut data = vec![0.0f32; h * w * 3];
    for (k, &pos) in t.positions.iter().enumerate() {
        let (r, c) = (pos / gc, pos % gc);
        let tok = t.tokens.row(k);
        for i in 0..p {
            let start = ((r * p + i) * w + c * p) * 3;
            data[start..start + p * 3].copy_from_slice(&tok[i * p * 3..(i + 1) * p * 3]);
        }
    }
    RawInput::new(t.modality, h, w, 3, data)
}

/// Loads, validates, inflates (audio) and tokenizes one input file.
pub fn tokenize_file(path: &Path, modality: Modality, patch_size: usize) -> Result<TokenSequence> {
    let raw = load_tensor(path, modality)?;
    raw.validate_channels()?;
    let raw = match modality {
        Modality::Audio => inflate_channels(&raw)?,
        Modality::Visual => raw,
    };
    patchify(&raw, patch_size)
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: String,
    pub image: PathBuf,
    pub spectrogram: PathBuf,
}

/// JSON-lines manifest; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(modality: Modality, h: usize, w: usize, c: usize) -> RawInput {
        let data = (0..h * w * c).map(|v| v as f32 * 0.5 - 3.0).collect();
        RawInput::new(modality, h, w, c, data).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.uavt");
        let x = ramp(Modality::Audio, 2, 2, 1);
        save_tensor(&p, &x).unwrap();
        assert_eq!(load_tensor(&p, Modality::Audio).unwrap(), x);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"UAVT\x01\x00\x03\x00");
        assert_eq!(bytes.len(), 8 + 12 + 16);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let bytes = encode_uavt(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = decode_uavt(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_uavt(&[1], &[1.0]).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_uavt(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_uavt(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn three_channel_audio_accepted_then_rejected_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.uavt");
        let x = ramp(Modality::Visual, 2, 2, 3);
        save_tensor(&p, &x).unwrap();
        let loaded = load_tensor(&p, Modality::Audio).unwrap();
        assert_eq!(loaded.channels, 3);
        assert!(loaded.validate_channels().is_err());
        assert!(inflate_channels(&loaded).is_err());
    }

    #[test]
    fn inflation_repeats_values() {
        let x = ramp(Modality::Audio, 4, 6, 1);
        let y = inflate_channels(&x).unwrap();
        assert_eq!((y.height, y.width, y.channels), (4, 6, 3));
        for r in 0..4 {
            for c in 0..6 {
                let v = x.at(r, c, 0);
                assert_eq!([y.at(r, c, 0), y.at(r, c, 1), y.at(r, c, 2)], [v, v, v]);
            }
        }
        let s_in: f64 = x.data.iter().map(|&v| v as f64).sum();
        let s_out: f64 = y.data.iter().map(|&v| v as f64).sum();
        assert_eq!(s_out, 3.0 * s_in);
        let zero = RawInput::new(Modality::Audio, 2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(inflate_channels(&zero).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_counts() {
        let x = ramp(Modality::Visual, 32, 32, 3);
        let t = patchify(&x, 16).unwrap();
        assert_eq!(t.tokens.shape(), &[4, 768]);
        assert_eq!(t.grid, (2, 2));
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let x = ramp(Modality::Visual, 4, 4, 3);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.tokens.data(), &x.data[..]);
        let back = unpatchify(&t.select(&[0])).unwrap();
        assert_eq!((back.height, back.width, back.channels), (4, 4, 3));
    }

    #[test]
    fn patch_contents_row_major() {
        let x = ramp(Modality::Visual, 4, 6, 3);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.grid, (2, 3));
        // token 4 = grid (1, 1): pixels rows 2..4, cols 2..4
        let tok = t.tokens.row(4);
        assert_eq!(tok[0], x.at(2, 2, 0));
        assert_eq!(tok[5], x.at(2, 3, 2));
        assert_eq!(tok[6], x.at(3, 2, 0));
    }

    #[test]
    fn non_divisible_is_geometry_error() {
        let x = ramp(Modality::Visual, 10, 16, 3);
        assert!(matches!(patchify(&x, 4), Err(Error::Geometry(_))));
        let a = ramp(Modality::Audio, 8, 8, 1);
        assert!(matches!(patchify(&a, 4), Err(Error::Precondition(_))));
    }

    #[test]
    fn permuted_tokens_change_image() {
        let x = ramp(Modality::Visual, 4, 4, 3);
        let mut t = patchify(&x, 2).unwrap();
        let rows: Vec<Vec<f32>> = (0..4).map(|i| t.tokens.row(i).to_vec()).collect();
        let swapped = [rows[1].clone(), rows[0].clone(), rows[2].clone(), rows[3].clone()];
        t.tokens = DTensor::from_rows(&swapped).unwrap();
        assert_ne!(unpatchify(&t).unwrap(), x);
    }

    #[test]
    fn inconsistent_grid_rejected() {
        let x = ramp(Modality::Visual, 4, 4, 3);
        let mut t = patchify(&x, 2).unwrap();
        t.grid = (1, 4);
        assert!(unpatchify(&t).is_ok());
        t.grid = (3, 3);
        assert!(matches!(unpatchify(&t), Err(Error::Geometry(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = Manifest {
            root: dir.path().to_path_buf(),
            records: vec![ManifestRecord {
                id: "s0".into(),
                speaker: "spk0".into(),
                image: "img/s0.uavt".into(),
                spectrogram: "spec/s0.uavt".into(),
            }],
        };
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolve(Path::new("x")), dir.path().join("x"));
    }
}
