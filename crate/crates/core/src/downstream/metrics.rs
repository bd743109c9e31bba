use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window-level scores at a threshold: positive iff `score >= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// JSON has no infinities; they are written as the strings `"inf"` / `"-inf"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *x == f64::INFINITY {
            s.serialize_str("inf")
        } else if *x == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, or 0 when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

/// `-∞`, the midpoints between consecutive distinct scores, and `+∞`, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut c = Vec::with_capacity(u.len() + 1);
    c.push(f64::NEG_INFINITY);
    c.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(f64::INFINITY);
    c
}

/// The F1-maximizing threshold, lowest on ties; `+∞` when there are no positives.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !labels.contains(&1) {
        return Ok(f64::INFINITY);
    }
    let mut best = (f64::NEG_INFINITY, -1.0);
    for t in candidate_thresholds(scores) {
        let f = Confusion::at(scores, labels, t).f1();
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best.0)
}

/// Rank-statistic AUC with average ranks for ties (ties count ½).
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let c = Confusion::at(scores, labels, threshold);
    Ok(MetricsReport {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        auc: auc(scores, labels),
        threshold,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_half_recall() {
        // TP=1, FP=1, FN=1, TN=1.
        let m = compute_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn separating_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.2], &[0, 0]), None);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), Some(0.5));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&[0.1, 0.9], &[0, 1]).unwrap(), 0.5);
        assert_eq!(select_threshold(&[0.1, 0.9, 0.3], &[0, 0, 0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn infinite_threshold_round_trips_through_json() {
        let m = compute_metrics(&[0.2], &[0], f64::INFINITY).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"threshold\":\"inf\""));
        assert!(s.contains("\"auc\":null"));
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
