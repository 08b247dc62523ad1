//! Per-iteration masking ratios and random token masking for both modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::patchio::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Independent ratio per modality each iteration.
    Asymmetric,
    /// One ratio shared by both modalities.
    Symmetric,
    /// `ratio_visual = lo + hi − ratio_audio`.
    Complementary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default = "default_mode")]
    pub mode: MaskMode,
}

fn default_lo() -> f64 {
    0.3
}
fn default_hi() -> f64 {
    0.6
}
fn default_mode() -> MaskMode {
    MaskMode::Asymmetric
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            lo: default_lo(),
            hi: default_hi(),
            mode: default_mode(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_bounds(self.lo, self.hi)
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    // lo == hi is allowed and degenerates to a fixed ratio
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::Config(format!(
            "mask ratio bounds must satisfy 0 < lo <= hi < 1, got lo={lo}, hi={hi}"
        )));
    }
    Ok(())
}

/// Two independent uniform draws from `[lo, hi]`: `(ratio_audio, ratio_visual)`.
pub fn sample_ratios(rng: &mut RngStream, lo: f64, hi: f64) -> Result<(f64, f64)> {
    check_bounds(lo, hi)?;
    let a = rng.uniform(lo, hi);
    let v = rng.uniform(lo, hi);
    Ok((a, v))
}

/// Ratios for one iteration according to the configured coupling mode.
pub fn sample_ratios_for(rng: &mut RngStream, cfg: &MaskConfig) -> Result<(f64, f64)> {
    check_bounds(cfg.lo, cfg.hi)?;
    match cfg.mode {
        MaskMode::Asymmetric => sample_ratios(rng, cfg.lo, cfg.hi),
        MaskMode::Symmetric => {
            let r = rng.uniform(cfg.lo, cfg.hi);
            Ok((r, r))
        }
        MaskMode::Complementary => {
            let r = rng.uniform(cfg.lo, cfg.hi);
            Ok((r, (cfg.lo + cfg.hi - r).clamp(cfg.lo, cfg.hi)))
        }
    }
}

/// `round_half_up(ratio · t)` clamped to `[1, t − 1]`.
pub fn masked_count(ratio: f64, t: usize) -> usize {
    let k = (ratio * t as f64 + 0.5).floor() as usize;
    k.clamp(1, t.saturating_sub(1).max(1))
}

/// Masked and kept grid indices for one modality, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
}

impl MaskEntry {
    /// Checks that the two sets partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.masked.iter().chain(&self.unmasked) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Geometry(format!(
                    "mask index sets do not partition 0..{n}"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Geometry(format!(
                "mask index sets do not cover 0..{n}"
            )));
        }
        Ok(())
    }

    /// No masking: every index kept.
    pub fn none(n: usize) -> Self {
        MaskEntry {
            masked: vec![],
            unmasked: (0..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratio_audio: f64,
    pub ratio_visual: f64,
    pub audio: MaskEntry,
    pub visual: MaskEntry,
}

impl MaskPlan {
    pub fn validate(&self, n_audio: usize, m_visual: usize) -> Result<()> {
        self.audio.validate(n_audio)?;
        self.visual.validate(m_visual)
    }
}

/// Masks a uniformly random subset of `masked_count(ratio, T)` tokens.
/// Returns the kept tokens (original order, original grid positions) and the
/// index partition in grid coordinates.
pub fn apply_mask(
    t: &TokenSequence,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<(TokenSequence, MaskEntry)> {
    let n = t.len();
    if n < 2 {
        return Err(Error::TooFewTokens(n));
    }
    let k = masked_count(ratio, n);
    let order = rng.permutation(n);
    let mut is_masked = vec![false; n];
    for &i in &order[..k] {
        is_masked[i] = true;
    }
    let keep_rows: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    let mut masked: Vec<usize> = (0..n)
        .filter(|&i| is_masked[i])
        .map(|i| t.positions[i])
        .collect();
    masked.sort_unstable();
    let kept = t.select(&keep_rows);
    let mut unmasked = kept.positions.clone();
    unmasked.sort_unstable();
    Ok((kept, MaskEntry { masked, unmasked }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::DTensor;
    use crate::patchio::Modality;

    fn seq(n: usize) -> TokenSequence {
        let data: Vec<f32> = (0..n * 3).map(|v| v as f32).collect();
        TokenSequence {
            modality: Modality::Visual,
            tokens: DTensor::new(vec![n, 3], data).unwrap(),
            grid: (1, n),
            patch_size: 1,
            positions: (0..n).collect(),
        }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(masked_count(0.5, 4), 2);
        assert_eq!(masked_count(0.6, 196), 118);
        assert_eq!(masked_count(0.01, 10), 1);
        assert_eq!(masked_count(0.99, 10), 9);
        assert_eq!(masked_count(0.25, 2), 1);
        // half rounds up: 0.5 * 5 = 2.5
        assert_eq!(masked_count(0.5, 5), 3);
    }

    #[test]
    fn exact_split_and_partition() {
        let t = seq(4);
        let mut rng = RngStream::new(9);
        let (kept, entry) = apply_mask(&t, 0.5, &mut rng).unwrap();
        assert_eq!(entry.masked.len(), 2);
        assert_eq!(kept.len(), 2);
        entry.validate(4).unwrap();
        for (row, &pos) in kept.positions.iter().enumerate() {
            assert_eq!(kept.tokens.row(row), t.tokens.row(pos));
        }
        assert!(kept.positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn deterministic_given_seed() {
        let t = seq(196);
        let a = apply_mask(&t, 0.6, &mut RngStream::new(4)).unwrap().1;
        let b = apply_mask(&t, 0.6, &mut RngStream::new(4)).unwrap().1;
        assert_eq!(a, b);
        assert_eq!(a.masked.len(), 118);
    }

    #[test]
    fn too_few_tokens() {
        let t = seq(1);
        assert!(matches!(
            apply_mask(&t, 0.5, &mut RngStream::new(0)),
            Err(Error::TooFewTokens(1))
        ));
    }

    #[test]
    fn ratio_bounds_validated() {
        let mut rng = RngStream::new(0);
        assert!(sample_ratios(&mut rng, 0.6, 0.3).is_err());
        assert!(sample_ratios(&mut rng, 0.0, 0.3).is_err());
        assert!(sample_ratios(&mut rng, 0.3, 1.0).is_err());
        assert_eq!(sample_ratios(&mut rng, 0.45, 0.45).unwrap(), (0.45, 0.45));
    }

    #[test]
    fn modes() {
        let mut rng = RngStream::new(1);
        let sym = MaskConfig {
            mode: MaskMode::Symmetric,
            ..Default::default()
        };
        let comp = MaskConfig {
            mode: MaskMode::Complementary,
            ..Default::default()
        };
        for _ in 0..100 {
            let (a, v) = sample_ratios_for(&mut rng, &sym).unwrap();
            assert_eq!(a, v);
            let (a, v) = sample_ratios_for(&mut rng, &comp).unwrap();
            assert!((a + v - 0.9).abs() < 1e-12);
        }
        let asym = MaskConfig::default();
        let distinct = (0..100)
            .filter(|_| {
                let (a, v) = sample_ratios_for(&mut rng, &asym).unwrap();
                a != v
            })
            .count();
        assert_eq!(distinct, 100);
    }
}
