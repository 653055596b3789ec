use crate::corpus::Label;
use crate::error::{Error, Result};

/// Partial-AUC scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaucScale {
    /// McClish standardization, mapping chance to 0.5 and perfect to 1.
    McClish,
    /// Raw area divided by `p`.
    Raw,
}

fn counts(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == Label::Anomaly).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {s}")));
    }
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "AUC needs both classes, got {pos} anomalies and {neg} normals"
        )));
    }
    Ok((pos, neg))
}

/// Groups of equal scores in descending order, as (anomalies, normals) per group.
fn tie_groups(scores: &[f64], labels: &[Label]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        match labels[i] {
            Label::Anomaly => g.0 += 1,
            Label::Normal => g.1 += 1,
        }
    }
    groups
}

/// Mann–Whitney estimate of P(anomaly score > normal score), ties counting ½.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    // walk from the lowest score up, counting normals strictly below
    let mut below = 0u64;
    let mut twice_u = 0u64;
    for (a, n) in tie_groups(scores, labels).into_iter().rev() {
        twice_u += a as u64 * (2 * below + n as u64);
        below += n as u64;
    }
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Trapezoidal area under the empirical ROC for FPR in `[0, p]`.
pub fn pauc_raw_area(scores: &[f64], labels: &[Label], p: f64) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("pAUC range p = {p} outside (0, 1]")));
    }
    if ((p * neg as f64).floor() as usize) < 1 {
        return Err(Error::invalid(format!(
            "pAUC at p = {p} needs at least {} normals, got {neg}",
            (1.0 / p).ceil()
        )));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut x0, mut y0) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    for (a, n) in tie_groups(scores, labels) {
        tp += a;
        fp += n;
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yp = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + yp) / 2.0;
            break;
        }
        (x0, y0) = (x1, y1);
    }
    Ok(area)
}

pub fn pauc_scaled(scores: &[f64], labels: &[Label], p: f64, scale: PaucScale) -> Result<f64> {
    let a = pauc_raw_area(scores, labels, p)?;
    Ok(match scale {
        PaucScale::Raw => a / p,
        PaucScale::McClish => {
            let min = p * p / 2.0;
            0.5 * (1.0 + (a - min) / (p - min))
        }
    })
}

/// McClish-standardized partial AUC over FPR in `[0, p]`.
pub fn pauc(scores: &[f64], labels: &[Label], p: f64) -> Result<f64> {
    pauc_scaled(scores, labels, p, PaucScale::McClish)
}

/// Worst per-ID AUC.
pub fn mauc<K>(per_id_aucs: impl IntoIterator<Item = (K, f64)>) -> Result<f64> {
    per_id_aucs
        .into_iter()
        .map(|(_, a)| a)
        .reduce(f64::min)
        .ok_or_else(|| Error::invalid("mAUC of an empty set"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Anomaly as A, Normal as N};

    #[test]
    fn perfect_separation() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = [A, A, N, N];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let l = [A, N, A, N, N];
        assert_eq!(auc(&[0.3; 5], &l).unwrap(), 0.5);
    }

    #[test]
    fn pauc_extremes() {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..10 {
            s.push(10.0 + i as f64);
            l.push(A);
            s.push(i as f64);
            l.push(N);
        }
        assert!((pauc(&s, &l, 0.1).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = s.iter().map(|x| -x).collect();
        let expected = 0.5 * (1.0 + (0.0 - 0.005) / 0.095);
        assert!((pauc(&rev, &l, 0.1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.4737).abs() < 1e-4);
        assert_eq!(pauc_scaled(&s, &l, 0.1, PaucScale::Raw).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(auc(&[0.1, 0.2], &[N, N]).is_err());
        assert!(auc(&[0.1], &[N, A]).is_err());
        // 9 normals: floor(0.9) = 0
        let s: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut l = vec![N; 9];
        l.push(A);
        assert!(pauc(&s, &l, 0.1).is_err());
        assert!(pauc(&s, &l, 0.2).is_ok());
        assert!(mauc(Vec::<(u32, f64)>::new()).is_err());
    }

    #[test]
    fn mauc_is_minimum() {
        assert_eq!(mauc([(1, 0.9), (2, 0.8), (3, 0.95)]).unwrap(), 0.8);
        assert_eq!(mauc([(7, 0.66)]).unwrap(), 0.66);
    }
}
