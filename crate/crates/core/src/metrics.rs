//! Calibration and OOD-detection metrics.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;
pub const NLL_FLOOR: f64 = 1e-12;

const ROW_TOL: f64 = 1e-6;

fn check_probs(probs: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if probs.ndim() != 2 {
        return Err(Error::invalid_shape("metrics", probs.shape(), "expected [n, classes]"));
    }
    if let Some(y) = labels {
        if y.len() != probs.rows() {
            return Err(Error::shape("metrics", probs.shape(), &[y.len()]));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= probs.cols()) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {} classes", probs.cols())));
        }
    }
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let valid = row.iter().all(|&p| (0.0..=1.0 + ROW_TOL).contains(&p));
        if !valid || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
            return Err(Error::InvalidInput(format!("row {i} is not a probability distribution")));
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs, Some(labels))?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = (0..probs.rows()).filter(|&i| argmax(probs.row(i)).0 == labels[i]).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error over `m_bins` equal-width confidence bins on
/// `(0, 1]`; bin `b` holds confidences in `(b/M, (b+1)/M]`.
pub fn ece(probs: &Tensor, labels: &[usize], m_bins: usize) -> Result<f64> {
    check_probs(probs, Some(labels))?;
    if m_bins == 0 {
        return Err(Error::InvalidInput("ece needs at least one bin".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidInput("ece of an empty set".into()));
    }
    let mut count = vec![0usize; m_bins];
    let mut conf = vec![0.0; m_bins];
    let mut hits = vec![0.0; m_bins];
    for i in 0..n {
        let (pred, c) = argmax(probs.row(i));
        let b = ((c * m_bins as f64).ceil() as usize).clamp(1, m_bins) - 1;
        count[b] += 1;
        conf[b] += c;
        if pred == labels[i] {
            hits[b] += 1.0;
        }
    }
    Ok((0..m_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n as f64)
        .sum())
}

pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs, Some(labels))?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("nll of an empty set".into()));
    }
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -libm::log(probs.get(i, y).max(NLL_FLOOR))).sum();
    Ok(total / labels.len() as f64)
}

/// `−Σ p log p` per row, with `0·log 0 = 0`.
pub fn predictive_entropy(probs: &Tensor) -> Result<Vec<f64>> {
    check_probs(probs, None)?;
    Ok((0..probs.rows())
        .map(|i| -probs.row(i).iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>())
        .map(|h: f64| h.max(0.0))
        .collect())
}

fn check_scores(scores: &[f64], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    Ok((pos, positive.len() - pos))
}

/// Indices sorted by descending score.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney AUROC with ties counted ½; positives are the OOD samples.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, is_ood)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("auroc is undefined unless both classes are present".into()));
    }
    let idx = ranked(scores);
    // Walk tie groups from the top; every negative in a group is beaten by
    // the positives above it and ties half with those inside it.
    let (mut wins, mut pos_above) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0.0, 0.0);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if is_ood[idx[j]] {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            j += 1;
        }
        wins += gn * (pos_above + 0.5 * gp);
        pos_above += gp;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// AUROC by trapezoidal integration of the ROC curve (thresholds at every
/// distinct score).
pub fn auroc_trapezoid(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, is_ood)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("auroc is undefined unless both classes are present".into()));
    }
    let idx = ranked(scores);
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if is_ood[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos as f64, fp / neg as f64);
        area += (fpr - prev_fpr) * 0.5 * (tpr + prev_tpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Step-wise area under the precision–recall curve: `Σ (R_k − R_{k−1})·P_k`
/// over descending-score thresholds, ties resolved as a single threshold.
pub fn aupr(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, is_ood)?;
    if pos == 0 {
        return Err(Error::InvalidInput("aupr needs at least one positive".into()));
    }
    let idx = ranked(scores);
    let (mut tp, mut seen, mut area, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if is_ood[idx[i]] {
                tp += 1.0;
            }
            seen += 1.0;
            i += 1;
        }
        let recall = tp / pos as f64;
        area += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub ece_bins: usize,
    pub nll: f64,
    pub mean_entropy_id: f64,
    /// OOD fields are absent when no OOD set was supplied.
    pub n_ood: usize,
    pub mean_entropy_ood: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl CalibrationReport {
    /// Entropy is the OOD score; positives are the rows of `ood_probs`.
    pub fn compute(probs: &Tensor, labels: &[usize], ood_probs: Option<&Tensor>, m_bins: usize) -> Result<Self> {
        let ent_id = predictive_entropy(probs)?;
        let mut report = CalibrationReport {
            n: labels.len(),
            accuracy: accuracy(probs, labels)?,
            ece: ece(probs, labels, m_bins)?,
            ece_bins: m_bins,
            nll: nll(probs, labels)?,
            mean_entropy_id: mean(&ent_id),
            n_ood: 0,
            mean_entropy_ood: None,
            auroc: None,
            aupr: None,
        };
        if let Some(ood) = ood_probs {
            let ent_ood = predictive_entropy(ood)?;
            let scores: Vec<f64> = ent_id.iter().chain(&ent_ood).copied().collect();
            let flags: Vec<bool> = (0..scores.len()).map(|i| i >= ent_id.len()).collect();
            report.n_ood = ent_ood.len();
            report.mean_entropy_ood = Some(mean(&ent_ood));
            report.auroc = Some(auroc(&scores, &flags)?);
            report.aupr = Some(aupr(&scores, &flags)?);
        }
        Ok(report)
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("n".to_string(), self.n.to_string()),
            ("accuracy".into(), format!("{:.6}", self.accuracy)),
            (format!("ece ({} bins)", self.ece_bins), format!("{:.6}", self.ece)),
            ("nll".into(), format!("{:.6}", self.nll)),
            ("mean entropy (id)".into(), format!("{:.6}", self.mean_entropy_id)),
            ("n ood".into(), self.n_ood.to_string()),
            ("mean entropy (ood)".into(), opt(self.mean_entropy_ood)),
            ("auroc".into(), opt(self.auroc)),
            ("aupr".into(), opt(self.aupr)),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v:>12}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn ece_examples() {
        let p = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(ece(&p, &[0, 1], 15).unwrap(), 0.0);
        let p = probs(&[&[0.8, 0.2], &[0.6, 0.4]]);
        assert!((ece(&p, &[0, 1], 1).unwrap() - 0.2).abs() < 1e-15);
        let swapped = probs(&[&[0.6, 0.4], &[0.8, 0.2]]);
        assert_eq!(ece(&p, &[0, 1], 10).unwrap(), ece(&swapped, &[1, 0], 10).unwrap());
    }

    #[test]
    fn nll_examples() {
        let p = probs(&[&[1.0, 0.0]]);
        assert!(nll(&p, &[0]).unwrap().abs() < 1e-15);
        let p = probs(&[&[0.5, 0.5]]);
        assert!((nll(&p, &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = probs(&[&[0.5, 0.5], &[0.75, 0.25]]);
        assert!((nll(&p, &[0, 1]).unwrap() - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        let p = probs(&[&[1.0, 0.0]]);
        assert!((nll(&p, &[1]).unwrap() - (-NLL_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.3, 0.9], &[false, false, true, true]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert_eq!(auroc_trapezoid(&[0.1, 0.4, 0.3, 0.9], &[false, false, true, true]).unwrap(), 0.75);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.9, 0.5], &[false, true, true]).unwrap(), 1.0);
        assert!(aupr(&[0.1], &[false]).is_err());
        // ranking: +, -, + → precision 1 at recall ½, ⅔ at recall 1.
        let a = aupr(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((a - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let e = predictive_entropy(&probs(&[&[1.0, 0.0], &[0.5, 0.5], &[0.75, 0.25]])).unwrap();
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 2f64.ln()).abs() < 1e-15);
        assert!((e[2] - 0.562_335_144_618_808_6).abs() < 1e-12);
        assert!(predictive_entropy(&probs(&[&[0.7, 0.7]])).is_err());
    }

    #[test]
    fn report_json_round_trip_and_table() {
        let p = probs(&[&[0.9, 0.1], &[0.3, 0.7], &[0.6, 0.4]]);
        let ood = probs(&[&[0.5, 0.5], &[0.55, 0.45]]);
        let r = CalibrationReport::compute(&p, &[0, 1, 1], Some(&ood), 15).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: CalibrationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(r, back);
        assert_eq!(r.auroc, Some(1.0));
        assert!(r.to_string().contains("auroc"));
    }
}
