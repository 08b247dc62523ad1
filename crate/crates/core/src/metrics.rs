//! Verification trials, EER and minDCF.
//!
//! Operating points use the rule "accept when score ≥ threshold", evaluated
//! at every distinct score plus one accept-nothing point above the maximum.
//! The EER is the crossing of the false-accept and false-reject curves,
//! linearly interpolated on `(P_fa, P_miss)` between adjacent operating
//! points; its threshold is the midpoint of the two bracketing scores.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub label: u8,
    pub enroll: String,
    pub test: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&format!("{} {} {}\n", t.label, t.enroll, t.test));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parses `label id1 id2` lines (LF or CRLF). Blank lines are skipped.
pub fn parse_trials_str(text: &str) -> Result<TrialSet> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [label, enroll, test] = fields[..] else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `label id1 id2`, got {} fields", fields.len()),
            });
        };
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        trials.push(Trial {
            label,
            enroll: enroll.to_string(),
            test: test.to_string(),
        });
    }
    Ok(TrialSet { trials })
}

pub fn parse_trials(path: &Path) -> Result<TrialSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials_str(&text)
}

/// Parses `id1 id2 score` lines into a lookup keyed by the id pair.
pub fn parse_scores_str(text: &str) -> Result<HashMap<(String, String), f64>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [a, b, s] = fields[..] else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `id1 id2 score`, got {} fields", fields.len()),
            });
        };
        let score: f64 = s.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad score `{s}`"),
        })?;
        if !score.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "score is not finite".into(),
            });
        }
        out.insert((a.to_string(), b.to_string()), score);
    }
    Ok(out)
}

pub fn parse_scores(path: &Path) -> Result<HashMap<(String, String), f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores_str(&text)
}

/// Scored trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<(f64, u8)>,
}

impl ScoreSet {
    pub fn new(scores: Vec<(f64, u8)>) -> Self {
        ScoreSet { scores }
    }

    /// Looks up a score for every trial; a trial without a score is an error.
    pub fn join(trials: &TrialSet, scores: &HashMap<(String, String), f64>) -> Result<Self> {
        let mut out = Vec::with_capacity(trials.len());
        for (i, t) in trials.trials.iter().enumerate() {
            let key = (t.enroll.clone(), t.test.clone());
            let s = scores
                .get(&key)
                .or_else(|| scores.get(&(t.test.clone(), t.enroll.clone())))
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("no score for trial {} {}", t.enroll, t.test),
                })?;
            out.push((*s, t.label));
        }
        Ok(ScoreSet { scores: out })
    }

    pub fn counts(&self) -> (usize, usize) {
        let nt = self.scores.iter().filter(|(_, l)| *l == 1).count();
        (nt, self.scores.len() - nt)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (nt, nn) = self.counts();
        if nt == 0 || nn == 0 {
            return Err(Error::DegenerateSet(format!(
                "need both classes, got {nt} target and {nn} nontarget"
            )));
        }
        if self.scores.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::DegenerateSet("non-finite score".into()));
        }
        Ok((nt, nn))
    }
}

/// One operating point: accept scores `>= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points in increasing threshold order, from accept-all to
/// accept-nothing (threshold just above the maximum score).
pub fn operating_points(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (nt, nn) = s.check()?;
    let mut sorted = s.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // running counts of targets / nontargets strictly below the current score
    let (mut t_below, mut n_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let thr = sorted[i].0;
        points.push(OperatingPoint {
            threshold: thr,
            p_miss: t_below as f64 / nt as f64,
            p_fa: (nn - n_below) as f64 / nn as f64,
        });
        while i < sorted.len() && sorted[i].0 == thr {
            if sorted[i].1 == 1 {
                t_below += 1;
            } else {
                n_below += 1;
            }
            i += 1;
        }
    }
    let top = sorted.last().unwrap().0;
    points.push(OperatingPoint {
        threshold: top.next_up(),
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// `(eer, threshold)`.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let pts = operating_points(s)?;
    let diff = |p: &OperatingPoint| p.p_miss - p.p_fa;
    let k = pts
        .iter()
        .position(|p| diff(p) >= 0.0)
        .expect("the accept-nothing point has p_miss - p_fa = 1");
    let cur = pts[k];
    if diff(&cur) == 0.0 {
        return Ok((cur.p_miss, cur.threshold));
    }
    // k > 0 since the accept-all point has p_miss - p_fa = -1
    let prev = pts[k - 1];
    let (d0, d1) = (diff(&prev), diff(&cur));
    let alpha = -d0 / (d1 - d0);
    let eer = prev.p_miss + alpha * (cur.p_miss - prev.p_miss);
    let threshold = if k == pts.len() - 1 {
        prev.threshold
    } else {
        0.5 * (prev.threshold + cur.threshold)
    };
    Ok((eer, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("DCF costs must be positive".into()));
        }
        Ok(())
    }

    /// `min(c_miss·p_target, c_fa·(1 − p_target))`
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa
    }
}

/// Normalized minimum detection cost and the threshold attaining it.
pub fn compute_min_dcf(s: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let pts = operating_points(s)?;
    let norm = params.default_cost();
    let mut best = (f64::INFINITY, 0.0);
    for p in &pts {
        let c = params.cost(p.p_miss, p.p_fa) / norm;
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn evaluate(s: &ScoreSet, params: &DcfParams) -> Result<EvalReport> {
    let (eer, eer_threshold) = compute_eer(s)?;
    let (min_dcf, dcf_threshold) = compute_min_dcf(s, params)?;
    let (n_target, n_nontarget) = s.counts();
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_dcf,
        dcf_threshold,
        n_target,
        n_nontarget,
    })
}

/// Writes the operating points as `threshold,p_miss,p_fa` CSV for DET plots.
pub fn write_det_csv(s: &ScoreSet, path: &Path) -> Result<()> {
    let pts = operating_points(s)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("threshold,p_miss,p_fa\n");
    for p in pts {
        body.push_str(&format!("{},{},{}\n", p.threshold, p.p_miss, p.p_fa));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
