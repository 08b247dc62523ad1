//! Contrastive (InfoNCE over cosine similarities), masked reconstruction
//! (MSE) and the combined objective `L = L_r + λ·L_c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numcore::{DTensor, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Audio queries against visual keys.
    A2v,
    /// Mean of the audio→visual and visual→audio terms.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    MaskedOnly,
    AllTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(default = "default_recon_target")]
    pub recon_target: ReconTarget,
}

fn default_direction() -> Direction {
    Direction::A2v
}
fn default_recon_target() -> ReconTarget {
    ReconTarget::MaskedOnly
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            lambda: 0.01,
            direction: default_direction(),
            recon_target: default_recon_target(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_r: f64,
    pub l: f64,
    pub batch_size: usize,
}

/// InfoNCE with logits `cos(F_a^i, F_v^j) / τ`; positives on the diagonal.
pub fn contrastive_loss_var<T: Real>(
    tape: &mut Tape<T>,
    f_audio: Var,
    f_visual: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (b, d) = tape.value(f_audio).rows_cols();
    if tape.value(f_visual).rows_cols() != (b, d) {
        return Err(Error::Dimension(format!(
            "audio batch {:?} vs visual batch {:?}",
            tape.shape(f_audio),
            tape.shape(f_visual)
        )));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let na = tape.l2_normalize_rows(f_audio)?;
    let nv = tape.l2_normalize_rows(f_visual)?;
    let nvt = tape.transpose(nv)?;
    let sim = tape.matmul(na, nvt)?;
    let logits = tape.scale(sim, T::of(1.0 / cfg.tau))?;
    let diag: Vec<usize> = (0..b).collect();
    let a2v = tape.nll_rows(logits, &diag)?;
    match cfg.direction {
        Direction::A2v => Ok(a2v),
        Direction::Symmetric => {
            let lt = tape.transpose(logits)?;
            let v2a = tape.nll_rows(lt, &diag)?;
            let both = tape.add(a2v, v2a)?;
            tape.scale(both, T::of(0.5))
        }
    }
}

/// Value-only contrastive loss over `[B, D]` batches.
pub fn contrastive_loss<T: Real>(
    f_audio: &DTensor<T>,
    f_visual: &DTensor<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.leaf(f_audio.clone())?;
    let v = tape.leaf(f_visual.clone())?;
    let l = contrastive_loss_var(&mut tape, a, v, cfg)?;
    Ok(tape.value(l).item())
}

fn penalized_rows(masked: &[usize], n: usize, cfg: &LossConfig) -> Result<Vec<usize>> {
    match cfg.recon_target {
        ReconTarget::AllTokens => Ok((0..n).collect()),
        ReconTarget::MaskedOnly if masked.is_empty() => Err(Error::Precondition(
            "masked-only reconstruction with no masked tokens".into(),
        )),
        ReconTarget::MaskedOnly => Ok(masked.to_vec()),
    }
}

/// `mse(A, Ã | masked_audio) + mse(V, Ṽ | masked_visual)`, each term the mean
/// squared error over all values of the penalized patches.
pub fn reconstruction_loss_var<T: Real>(
    tape: &mut Tape<T>,
    audio: &DTensor<T>,
    recon_audio: Var,
    visual: &DTensor<T>,
    recon_visual: Var,
    plan: &MaskPlan,
    cfg: &LossConfig,
) -> Result<Var> {
    let ra = penalized_rows(&plan.audio.masked, audio.rows(), cfg)?;
    let rv = penalized_rows(&plan.visual.masked, visual.rows(), cfg)?;
    let la = tape.mse_rows(recon_audio, audio, &ra)?;
    let lv = tape.mse_rows(recon_visual, visual, &rv)?;
    tape.add(la, lv)
}

pub fn reconstruction_loss<T: Real>(
    audio: &DTensor<T>,
    recon_audio: &DTensor<T>,
    visual: &DTensor<T>,
    recon_visual: &DTensor<T>,
    plan: &MaskPlan,
    cfg: &LossConfig,
) -> Result<T> {
    if audio.shape() != recon_audio.shape() || visual.shape() != recon_visual.shape() {
        return Err(Error::Dimension("reconstruction shapes differ from targets".into()));
    }
    plan.validate(audio.rows(), visual.rows())?;
    let mut tape = Tape::new();
    let a = tape.leaf(recon_audio.clone())?;
    let v = tape.leaf(recon_visual.clone())?;
    let l = reconstruction_loss_var(&mut tape, audio, a, visual, v, plan, cfg)?;
    Ok(tape.value(l).item())
}

/// `L_r + λ·L_c`.
pub fn total_loss<T: Real>(l_r: T, l_c: T, lambda: T) -> Result<T> {
    if !l_r.is_finite() || !l_c.is_finite() || !lambda.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss input: L_r={l_r}, L_c={l_c}, lambda={lambda}"
        )));
    }
    Ok(l_r + lambda * l_c)
}

/// Tape version of [`total_loss`]. With `λ = 0` the contrastive branch is
/// left out of the graph entirely.
pub fn total_loss_var<T: Real>(tape: &mut Tape<T>, l_r: Var, l_c: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(l_r);
    }
    let scaled = tape.scale(l_c, T::of(lambda))?;
    tape.add(l_r, scaled)
}
