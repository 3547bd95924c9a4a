//! Evaluation metrics: exact-match accuracy, ConsistSyn, coefficient of
//! variation, and normalized improvement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Variant;

/// Which standard deviation feeds the CV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvEstimator {
    /// 1/n variance.
    #[default]
    Population,
    /// 1/(n-1) variance, for sensitivity checks.
    Sample,
}

/// Exact-match accuracy as a percentage.
pub fn accuracy<T: PartialEq>(preds: &[T], targets: &[T]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction list"));
    }
    if preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / preds.len() as f64 * 100.0)
}

/// Share of originally-correct predictions that stay correct after synonym
/// replacement, as a percentage. `None` when nothing was correct before.
pub fn consist_syn(correct_before: usize, correct_after: usize) -> Option<f64> {
    if correct_before == 0 {
        return None;
    }
    debug_assert!(correct_after <= correct_before);
    Some(correct_after as f64 / correct_before as f64 * 100.0)
}

/// Coefficient of variation sigma/mu across runs. `None` when the mean is
/// zero (undefined, reported as a missing datum).
pub fn cv(values: &[f64], estimator: CvEstimator) -> Result<Option<f64>> {
    if values.len() < 2 {
        return Err(Error::contract(format!(
            "cv needs >= 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let var = match estimator {
        CvEstimator::Population => ss / n,
        CvEstimator::Sample => ss / (n - 1.0),
    };
    Ok(Some(var.sqrt() / mean))
}

/// Normalized improvement of a variant over a baseline, in percent.
pub fn ni(variant_cs: f64, baseline_cs: f64) -> Result<f64> {
    if baseline_cs <= 0.0 {
        return Err(Error::contract(format!(
            "ni undefined for baseline {baseline_cs}"
        )));
    }
    Ok((variant_cs - baseline_cs) / baseline_cs * 100.0)
}

/// One evaluated quantity, keyed the way the result CSVs are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub task: String,
    pub intervention: String,
    pub param: String,
    pub layer: Option<usize>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str =
        "variant,task,intervention,param,layer,seed,metric,value";

    pub fn csv_row(&self) -> String {
        let layer = self
            .layer
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".into());
        let seed = self
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into());
        format!(
            "{},{},{},{},{layer},{seed},{},{:.6}",
            self.variant, self.task, self.intervention, self.param, self.metric, self.value
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_trivial_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 9]).unwrap(), 75.0);
        assert!(accuracy::<u32>(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_is_order_invariant_in_aggregate() {
        let preds = [1, 0, 2, 2];
        let tgts = [1, 1, 2, 0];
        let a = accuracy(&preds, &tgts).unwrap();
        let b = accuracy(
            &[preds[3], preds[1], preds[0], preds[2]],
            &[tgts[3], tgts[1], tgts[0], tgts[2]],
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consist_syn_formula() {
        assert_eq!(consist_syn(50, 40), Some(80.0));
        assert_eq!(consist_syn(7, 7), Some(100.0));
        assert_eq!(consist_syn(200, 0), Some(0.0));
        assert_eq!(consist_syn(0, 0), None);
    }

    #[test]
    fn cv_hand_values() {
        assert_eq!(cv(&[5.0, 5.0, 5.0], CvEstimator::Population).unwrap(), Some(0.0));
        // [1, 3]: population sigma = 1, mean = 2.
        assert_eq!(cv(&[1.0, 3.0], CvEstimator::Population).unwrap(), Some(0.5));
        assert!(cv(&[1.0], CvEstimator::Population).is_err());
        assert_eq!(cv(&[1.0, -1.0], CvEstimator::Population).unwrap(), None);
    }

    #[test]
    fn cv_is_scale_invariant() {
        let vals = [3.0, 4.5, 5.25, 4.0];
        let scaled: Vec<f64> = vals.iter().map(|v| v * 7.5).collect();
        let a = cv(&vals, CvEstimator::Population).unwrap().unwrap();
        let b = cv(&scaled, CvEstimator::Population).unwrap().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cv_sample_estimator_is_larger() {
        let vals = [1.0, 2.0, 3.0];
        let p = cv(&vals, CvEstimator::Population).unwrap().unwrap();
        let s = cv(&vals, CvEstimator::Sample).unwrap().unwrap();
        assert!(s > p);
    }

    #[test]
    fn ni_trivial_and_paper_anchored_values() {
        assert!((ni(55.0, 50.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(ni(42.0, 42.0).unwrap(), 0.0);
        // Published ConsistSyn pair 62.86 vs 52.47 gives +19.80.
        let v = ni(62.86, 52.47).unwrap();
        assert!((v - 19.80).abs() <= 0.01, "{v}");
        assert!(ni(10.0, 0.0).is_err());
    }
}
