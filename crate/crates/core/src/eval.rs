//! Detection metrics (EER, FAR at a fixed TPR, DET points) and the
//! analysis reports: SoP entropy per class, token overlap, ablation grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::acoustic::{sop_entropy, sum_of_posteriors};
use crate::cbow::EmbeddingMatrix;
use crate::classifier::{predict_batch, train_a2i, A2IConfig, A2IModel, TrainingLog};
use crate::container::write_file;
use crate::par::{self, Execution};
use crate::posteriors::{Label, Utterance};
use crate::textual::top_n_per_frame;
use crate::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.99;

/// Scores in `[0, 1]` paired with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape {
                op: "scored set",
                left: vec![scores.len()],
                right: vec![labels.len()],
            });
        }
        if scores.is_empty() {
            return Err(Error::invalid("scored set is empty"));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_utterances(scores: Vec<f64>, utterances: &[Utterance]) -> Result<Self> {
        Self::new(scores, utterances.iter().map(|u| u.label).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut intended = Vec::new();
        let mut unintended = Vec::new();
        for (&s, l) in self.scores.iter().zip(&self.labels) {
            match l {
                Label::Intended => intended.push(s),
                Label::Unintended => unintended.push(s),
            }
        }
        if intended.is_empty() || unintended.is_empty() {
            return Err(Error::data(format!(
                "metric needs both classes, got {} intended / {} unintended",
                intended.len(),
                unintended.len()
            )));
        }
        intended.sort_by(f64::total_cmp);
        unintended.sort_by(f64::total_cmp);
        Ok((intended, unintended))
    }
}

/// One operating point: accept when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct score plus `+inf`, ascending.
pub fn det_curve(s: &ScoredSet) -> Result<Vec<DetPoint>> {
    let (intended, unintended) = s.split()?;
    let mut thresholds: Vec<f64> = s.scores.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (ni, nu) = (intended.len() as f64, unintended.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let below_i = intended.partition_point(|&x| x < t);
            let below_u = unintended.partition_point(|&x| x < t);
            DetPoint {
                threshold: t,
                far: (unintended.len() - below_u) as f64 / nu,
                frr: below_i as f64 / ni,
            }
        })
        .collect())
}

pub fn write_det_csv(points: &[DetPoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.frr);
    }
    write_file(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Eer {
    pub rate: f64,
    pub threshold: f64,
}

/// Crossing of FAR and FRR along the piecewise-linear DET path.
pub fn eer_from_curve(points: &[DetPoint]) -> Eer {
    let d = |p: &DetPoint| p.far - p.frr;
    let j = points
        .iter()
        .position(|p| d(p) <= 0.0)
        .expect("curve ends at far 0, frr 1");
    let cur = points[j];
    if j == 0 {
        return Eer {
            rate: cur.far,
            threshold: cur.threshold,
        };
    }
    let prev = points[j - 1];
    if d(&cur) == 0.0 {
        return Eer {
            rate: cur.far,
            threshold: midpoint(prev.threshold, cur.threshold),
        };
    }
    let t = d(&prev) / (d(&prev) - d(&cur));
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + t * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    Eer {
        rate: prev.far + t * (cur.far - prev.far),
        threshold,
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    if b.is_finite() {
        0.5 * (a + b)
    } else {
        a
    }
}

pub fn eer(s: &ScoredSet) -> Result<Eer> {
    Ok(eer_from_curve(&det_curve(s)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FarAtTpr {
    pub far: f64,
    /// Fraction of unintended items rejected, `1 - far`.
    pub mitigated: f64,
    pub threshold: f64,
    pub tpr: f64,
    pub target_tpr: f64,
}

/// FAR at the highest threshold whose TPR reaches `target`.
pub fn far_at_tpr(s: &ScoredSet, target: f64) -> Result<FarAtTpr> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!("tpr target {target} outside [0, 1]")));
    }
    let (intended, unintended) = s.split()?;
    let ni = intended.len();
    // intended ascending: accepting from index k upward gives count ni - k
    let mut chosen = 0;
    for k in (0..ni).rev() {
        if k > 0 && intended[k - 1] == intended[k] {
            continue;
        }
        if (ni - k) as f64 / ni as f64 >= target {
            chosen = k;
            break;
        }
    }
    let threshold = intended[chosen];
    let accepted_i = ni - intended.partition_point(|&x| x < threshold);
    let accepted_u = unintended.len() - unintended.partition_point(|&x| x < threshold);
    let far = accepted_u as f64 / unintended.len() as f64;
    Ok(FarAtTpr {
        far,
        mitigated: 1.0 - far,
        threshold,
        tpr: accepted_i as f64 / ni as f64,
        target_tpr: target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub eer: Eer,
    pub far_at_tpr: FarAtTpr,
}

pub fn metrics(s: &ScoredSet, tpr_target: f64) -> Result<Metrics> {
    Ok(Metrics {
        eer: eer(s)?,
        far_at_tpr: far_at_tpr(s, tpr_target)?,
    })
}

pub fn evaluate(model: &A2IModel, utterances: &[Utterance], exec: Execution) -> Result<(ScoredSet, Metrics)> {
    let scores = predict_batch(utterances, model, exec)?;
    let set = ScoredSet::from_utterances(scores, utterances)?;
    let m = metrics(&set, DEFAULT_TPR)?;
    Ok((set, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub intended: Option<f64>,
    pub unintended: Option<f64>,
    pub intended_count: usize,
    pub unintended_count: usize,
}

/// Mean SoP entropy per class.
pub fn entropy_report(utterances: &[Utterance]) -> Result<EntropyReport> {
    if utterances.is_empty() {
        return Err(Error::data("entropy report needs at least one utterance"));
    }
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for u in utterances {
        let c = u.label.class_index();
        sums[c] += sop_entropy(&sum_of_posteriors(&u.posteriors)?);
        counts[c] += 1;
    }
    let mean = |c: usize| (counts[c] > 0).then(|| sums[c] / counts[c] as f64);
    Ok(EntropyReport {
        intended: mean(Label::Intended.class_index()),
        unintended: mean(Label::Unintended.class_index()),
        intended_count: counts[Label::Intended.class_index()],
        unintended_count: counts[Label::Unintended.class_index()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub top_k: usize,
    pub intended_top: Vec<u32>,
    pub unintended_top: Vec<u32>,
    pub common: usize,
    pub intended_unique: Vec<u32>,
    pub unintended_unique: Vec<u32>,
}

fn ranked_tokens(utterances: &[&Utterance], top_k: usize, class: &str) -> Result<Vec<u32>> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for u in utterances {
        for occ in top_n_per_frame(&u.posteriors, 1, false)?.occurrences {
            *counts.entry(occ.token).or_default() += occ.frames.len();
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() < top_k {
        log::warn!(
            "{class} utterances have only {} distinct tokens (< {top_k})",
            ranked.len()
        );
    }
    Ok(ranked.into_iter().take(top_k).map(|(t, _)| t).collect())
}

/// Compares the `top_k` most frequent greedy Top-1 tokens of each class.
pub fn token_overlap_report(utterances: &[Utterance], top_k: usize) -> Result<OverlapReport> {
    if utterances.is_empty() {
        return Err(Error::data("overlap report needs at least one utterance"));
    }
    let (intended, unintended): (Vec<&Utterance>, Vec<&Utterance>) =
        utterances.iter().partition(|u| u.label == Label::Intended);
    let intended_top = ranked_tokens(&intended, top_k, "intended")?;
    let unintended_top = ranked_tokens(&unintended, top_k, "unintended")?;
    let a: BTreeSet<u32> = intended_top.iter().copied().collect();
    let b: BTreeSet<u32> = unintended_top.iter().copied().collect();
    Ok(OverlapReport {
        top_k,
        common: a.intersection(&b).count(),
        intended_unique: intended_top.iter().copied().filter(|t| !b.contains(t)).collect(),
        unintended_unique: unintended_top.iter().copied().filter(|t| !a.contains(t)).collect(),
        intended_top,
        unintended_top,
    })
}

/// Train/validation/eval partitions plus the shared vocabulary resources.
#[derive(Clone, Copy)]
pub struct AblationData<'a> {
    pub train: &'a [Utterance],
    pub validation: &'a [Utterance],
    pub eval: &'a [Utterance],
    pub vocab_size: usize,
    pub cbow: Option<&'a EmbeddingMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub system: String,
    pub config: A2IConfig,
    pub eer: Eer,
    pub far_at_tpr: FarAtTpr,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>12}  {:>10}\n",
            "system", "EER", "FAR@TPR", "mitigated"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>12.4}  {:>10.4}",
                r.system, r.eer.rate, r.far_at_tpr.far, r.far_at_tpr.mitigated
            );
        }
        out
    }
}

pub fn run_config(data: AblationData<'_>, config: &A2IConfig, exec: Execution) -> Result<(AblationRow, TrainingLog)> {
    let (model, log) = train_a2i(data.train, data.validation, config, data.vocab_size, data.cbow, exec)?;
    let (_, m) = evaluate(&model, data.eval, exec)?;
    Ok((
        AblationRow {
            system: config.label(),
            config: config.clone(),
            eer: m.eer,
            far_at_tpr: m.far_at_tpr,
            best_epoch: log.best_epoch,
        },
        log,
    ))
}

/// Trains and evaluates every config; rows keep grid order.
pub fn run_ablation(data: AblationData<'_>, grid: &[A2IConfig], exec: Execution) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let rows = par::map(exec, grid, |cfg| run_config(data, cfg, exec).map(|(row, _)| row))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Intended as I, Unintended as U};

    fn set(pairs: &[(f64, Label)]) -> ScoredSet {
        ScoredSet::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()).unwrap()
    }

    #[test]
    fn four_point_example() {
        let s = set(&[(0.9, I), (0.8, I), (0.7, U), (0.1, U)]);
        let e = eer(&s).unwrap();
        assert_eq!(e.rate, 0.0);
        assert!(e.threshold > 0.7 && e.threshold < 0.8);
        assert_eq!(far_at_tpr(&s, 0.99).unwrap().far, 0.0);
    }

    #[test]
    fn degenerate_sets() {
        let same = set(&[(0.5, I), (0.5, I), (0.5, U), (0.5, U), (0.5, U)]);
        assert!((eer(&same).unwrap().rate - 0.5).abs() < 1e-12);
        assert_eq!(far_at_tpr(&same, 0.99).unwrap().far, 1.0);
        let flipped = set(&[(0.1, I), (0.2, I), (0.8, U), (0.9, U)]);
        assert_eq!(eer(&flipped).unwrap().rate, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let s = set(&[(0.1, I), (0.2, I)]);
        assert!(eer(&s).is_err());
        assert!(far_at_tpr(&s, 0.99).is_err());
        assert!(ScoredSet::new(vec![1.5], vec![I]).is_err());
        assert!(ScoredSet::new(vec![], vec![]).is_err());
    }

    #[test]
    fn far_threshold_is_highest_reaching_target() {
        // 4 intended: tpr 0.75 needs 3 accepted → threshold 0.6
        let s = set(&[(0.9, I), (0.7, I), (0.6, I), (0.2, I), (0.65, U), (0.1, U)]);
        let r = far_at_tpr(&s, 0.75).unwrap();
        assert_eq!(r.threshold, 0.6);
        assert_eq!(r.far, 0.5);
        assert_eq!(r.tpr, 0.75);
        assert_eq!(r.mitigated, 0.5);
    }

    #[test]
    fn det_csv_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = set(&[(0.9, I), (0.1, U)]);
        let pts = det_curve(&s).unwrap();
        assert_eq!(pts.len(), 3);
        let path = dir.path().join("det.csv");
        write_det_csv(&pts, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("threshold,far,frr\n0.1,1,0\n"));
    }
}
