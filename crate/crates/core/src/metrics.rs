//! Neighborhood metrics shared by input-space characterization and model evaluation.

use serde::{Deserialize, Serialize};

/// One anchor's retrieval outcome.
#[derive(Debug, Clone)]
pub struct AnchorResult {
    /// Number of other items with the anchor's identity.
    pub positives: usize,
    /// For each returned neighbor, in rank order: does it share the anchor's identity?
    pub hits: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall: f64,
    pub precision_at_1: f64,
    pub precision_all: f64,
    pub anchors_evaluated: usize,
}

/// Recall, precision@1 and "positives before the first miss" precision.
///
/// Anchors without positives are skipped. Per-anchor denominators are capped at `k`.
pub fn retrieval_metrics(results: &[AnchorResult], k: usize) -> RetrievalMetrics {
    let mut found = 0usize;
    let mut possible = 0usize;
    let mut top1 = 0usize;
    let mut precision_sum = 0.0;
    let mut anchors = 0usize;
    for r in results.iter().filter(|r| r.positives > 0) {
        let cap = r.positives.min(k);
        let hits = r.hits.iter().take(k);
        found += hits.clone().filter(|h| **h).count();
        possible += cap;
        if r.hits.first() == Some(&true) {
            top1 += 1;
        }
        let leading = hits.take_while(|h| **h).count();
        precision_sum += leading as f64 / cap as f64;
        anchors += 1;
    }
    if anchors == 0 {
        return RetrievalMetrics {
            recall: 0.0,
            precision_at_1: 0.0,
            precision_all: 0.0,
            anchors_evaluated: 0,
        };
    }
    RetrievalMetrics {
        recall: found as f64 / possible as f64,
        precision_at_1: top1 as f64 / anchors as f64,
        precision_all: precision_sum / anchors as f64,
        anchors_evaluated: anchors,
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed() {
        // a1: one positive, found at rank 1
        // b1: no positives, skipped
        // c1: two positives, ranks [miss, hit]
        let results = vec![
            AnchorResult { positives: 1, hits: vec![true, false] },
            AnchorResult { positives: 0, hits: vec![false, false] },
            AnchorResult { positives: 2, hits: vec![false, true] },
        ];
        let m = retrieval_metrics(&results, 2);
        assert_eq!(m.anchors_evaluated, 2);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision_at_1, 0.5);
        assert_eq!(m.precision_all, 0.5);
    }

    #[test]
    fn denominator_capped_at_k() {
        let results = vec![AnchorResult { positives: 5, hits: vec![true, true] }];
        let m = retrieval_metrics(&results, 2);
        assert_eq!((m.recall, m.precision_at_1, m.precision_all), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_anchors() {
        assert_eq!(retrieval_metrics(&[], 5).anchors_evaluated, 0);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
