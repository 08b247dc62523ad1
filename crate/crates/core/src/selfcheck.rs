//! Runtime invariant checks: gradient agreement on the combined objective,
//! masking-ratio statistics, and metric agreement with a brute-force sweep.

use serde::Serialize;

use crate::error::Result;
use crate::losses::LossConfig;
use crate::masking::{sample_ratios_for, MaskConfig};
use crate::metrics::{compute_eer, compute_min_dcf, DcfParams, ScoreSet};
use crate::model::{ModelConfig, ModelState};
use crate::numcore::{relative_error, DTensor, Real, RngStream, Tape};
use crate::patchio::{Modality, TokenSequence};
use crate::trainer::{batch_objective, make_plans, Sample};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub precision: &'static str,
    pub eps: f64,
    pub rtol: f64,
    /// Largest absolute tolerance applied to any sampled coordinate.
    pub atol: f64,
    pub loss: f64,
    pub sampled: usize,
    pub within_tolerance: usize,
    pub fraction: f64,
    /// Fraction passing `|a − n| / max(|a|, |n|) < rtol` with no absolute term.
    pub strict_fraction: f64,
    pub worst_rel_err: f64,
}

/// Random paired samples shaped for `cfg`.
pub fn random_samples(cfg: &ModelConfig, count: usize, rng: &mut RngStream) -> Vec<Sample> {
    let mk = |m: Modality, rng: &mut RngStream| {
        let (r, c) = cfg.grid(m);
        let n = r * c;
        TokenSequence {
            modality: m,
            tokens: DTensor::new(vec![n, cfg.token_dim()], rng.normal_vec(n * cfg.token_dim(), 1.0))
                .expect("shape"),
            grid: (r, c),
            patch_size: cfg.patch_size,
            positions: (0..n).collect(),
        }
    };
    (0..count)
        .map(|i| Sample {
            id: format!("s{i}"),
            speaker: format!("spk{i}"),
            audio: mk(Modality::Audio, rng),
            visual: mk(Modality::Visual, rng),
        })
        .collect()
}

/// Spacing between `|x|` and the next larger f64.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

/// Compares the reverse-mode gradient of `L = L_r + λ·L_c`, computed in `T`,
/// with central differences of the same loss evaluated in f64 at the same
/// parameter point, over `n_coords` uniformly sampled parameter coordinates.
///
/// A coordinate passes when `|a − n| <= rtol·max(|a|, |n|) + atol`, where
/// `atol = 2·ulp(L)/eps + eps_T·max|a_t|` (max over the coordinate's
/// tensor): the resolution of the difference quotient plus the rounding
/// scale of the analytic gradient. Without the
/// absolute term, coordinates whose true gradient is exactly zero (key
/// biases, by softmax shift invariance) or below `ulp(L)/(eps·rtol)` can
/// never pass.
pub fn grad_check_objective<T: Real>(
    cfg: &ModelConfig,
    loss: &LossConfig,
    batch_size: usize,
    n_coords: usize,
    eps: f64,
    rtol: f64,
    seed: u64,
) -> Result<GradCheckSummary> {
    let root = RngStream::new(seed);
    let state: ModelState<T> = ModelState::init(cfg.clone(), &root.substream("init", 0))?;
    let samples = random_samples(cfg, batch_size, &mut root.substream("data", 0));
    let batch: Vec<&Sample> = samples.iter().collect();
    let plans = make_plans(&root, &MaskConfig::default(), 0, &batch)?;

    let eval = |st: &ModelState<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let obj = batch_objective(&mut tape, st, &batch, &plans, loss)?;
        Ok(tape.value(obj.total).item())
    };
    let mut tape = Tape::new();
    let obj = batch_objective(&mut tape, &state, &batch, &plans, loss)?;
    let grads = tape.backward(obj.total)?.params();

    let mut probe: ModelState<f64> = state.cast();
    let l0 = eval(&probe)?;
    let resolution = 2.0 * ulp(l0) / eps;
    let tensor_atol = |name: &str| {
        let gmax = grads.get(name).map_or(0.0, |g| {
            g.data().iter().map(|x| x.f64().abs()).fold(0.0, f64::max)
        });
        resolution + T::epsilon().f64() * gmax
    };
    let mut atol = 0.0f64;

    let names: Vec<String> = state.params.keys().cloned().collect();
    let sizes: Vec<usize> = state.params.values().map(DTensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut pick = root.substream("coords", 0);
    let (mut ok, mut strict, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..n_coords {
        let mut flat = pick.below(total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = names[which].as_str();
        let orig = probe.params[name].data()[flat];
        probe.params[name].data_mut()[flat] = orig + eps;
        let fp = eval(&probe)?;
        probe.params[name].data_mut()[flat] = orig - eps;
        let fm = eval(&probe)?;
        probe.params[name].data_mut()[flat] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[flat].f64());
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let tol_abs = tensor_atol(name);
        atol = atol.max(tol_abs);
        if diff <= rtol * scale + tol_abs {
            ok += 1;
        }
        let err = relative_error(analytic, numeric, f64::MIN_POSITIVE);
        if err < rtol {
            strict += 1;
        }
        worst = worst.max(err);
    }
    Ok(GradCheckSummary {
        precision: T::NAME,
        eps,
        rtol,
        atol,
        loss: l0,
        sampled: n_coords,
        within_tolerance: ok,
        fraction: ok as f64 / n_coords as f64,
        strict_fraction: strict as f64 / n_coords as f64,
        worst_rel_err: worst,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskStats {
    pub iterations: usize,
    pub min: f64,
    pub max: f64,
    pub mean_audio: f64,
    pub mean_visual: f64,
}

pub fn masking_statistics(cfg: &MaskConfig, iterations: usize, seed: u64) -> Result<MaskStats> {
    let root = RngStream::new(seed);
    let (mut sa, mut sv) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for it in 0..iterations {
        let (a, v) = sample_ratios_for(&mut root.substream("mask.ratio", it as u64), cfg)?;
        sa += a;
        sv += v;
        lo = lo.min(a).min(v);
        hi = hi.max(a).max(v);
    }
    Ok(MaskStats {
        iterations,
        min: lo,
        max: hi,
        mean_audio: sa / iterations as f64,
        mean_visual: sv / iterations as f64,
    })
}

/// Quadratic-time reference: counts errors directly at every distinct score
/// and just above the maximum, then interpolates the crossing.
pub fn brute_force_rates(s: &ScoreSet) -> Vec<(f64, f64, f64)> {
    let nt = s.scores.iter().filter(|x| x.1 == 1).count() as f64;
    let nn = s.scores.len() as f64 - nt;
    let mut thr: Vec<f64> = s.scores.iter().map(|x| x.0).collect();
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    let top = *thr.last().unwrap();
    thr.push(top + 1.0);
    thr.iter()
        .map(|&t| {
            let miss = s.scores.iter().filter(|x| x.1 == 1 && x.0 < t).count() as f64 / nt;
            let fa = s.scores.iter().filter(|x| x.1 == 0 && x.0 >= t).count() as f64 / nn;
            (t, miss, fa)
        })
        .collect()
}

pub fn brute_force_eer(s: &ScoreSet) -> f64 {
    let pts = brute_force_rates(s);
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].1 - w[0].2, w[1].1 - w[1].2);
        if d0 == 0.0 {
            return w[0].1;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = -d0 / (d1 - d0);
            return w[0].1 + a * (w[1].1 - w[0].1);
        }
    }
    pts.last().unwrap().1
}

pub fn brute_force_min_dcf(s: &ScoreSet, p: &DcfParams) -> f64 {
    brute_force_rates(s)
        .iter()
        .map(|&(_, miss, fa)| p.cost(miss, fa) / p.default_cost())
        .fold(f64::INFINITY, f64::min)
}

pub fn random_score_set(rng: &mut RngStream, n: usize, separation: f64) -> ScoreSet {
    let mut scores: Vec<(f64, u8)> = (0..n)
        .map(|i| {
            let label = (i % 3 == 0) as u8;
            (rng.normal() + separation * label as f64, label)
        })
        .collect();
    // a few exact ties
    for i in (0..n).step_by(97) {
        let j = (i + 1) % n;
        scores[j].0 = scores[i].0;
    }
    ScoreSet::new(scores)
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let cfg = ModelConfig::toy();
    let loss = LossConfig {
        tau: 0.1,
        lambda: 0.5,
        ..Default::default()
    };
    let g64 = grad_check_objective::<f64>(&cfg, &loss, 2, 400, 1e-6, 1e-6, seed)?;
    out.push(CheckResult {
        name: "gradient_f64".into(),
        pass: g64.fraction >= 0.99,
        detail: serde_json::to_value(&g64)?,
    });
    let g32 = grad_check_objective::<f32>(&cfg, &loss, 2, 400, 1e-6, 1e-3, seed)?;
    out.push(CheckResult {
        name: "gradient_f32".into(),
        pass: g32.fraction >= 0.99,
        detail: serde_json::to_value(&g32)?,
    });
    let ms = masking_statistics(&MaskConfig::default(), 10_000, seed)?;
    out.push(CheckResult {
        name: "masking_statistics".into(),
        pass: ms.min >= 0.3
            && ms.max <= 0.6
            && (ms.mean_audio - 0.45).abs() < 0.01
            && (ms.mean_visual - 0.45).abs() < 0.01
            && (ms.mean_audio - ms.mean_visual).abs() < 0.01,
        detail: serde_json::to_value(&ms)?,
    });
    let mut rng = RngStream::new(seed).substream("scores", 0);
    let dcf = DcfParams::default();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let s = random_score_set(&mut rng, 500, 1.5);
        let eer = compute_eer(&s)?.0;
        let md = compute_min_dcf(&s, &dcf)?.0;
        worst = worst
            .max((eer - brute_force_eer(&s)).abs())
            .max((md - brute_force_min_dcf(&s, &dcf)).abs());
    }
    out.push(CheckResult {
        name: "metric_oracles".into(),
        pass: worst < 1e-9,
        detail: serde_json::json!({"max_abs_diff": worst}),
    });
    Ok(out)
}
