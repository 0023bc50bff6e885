use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrieval::Evaluation;
use crate::error::{Result, SavsError};

/// Retrieval metrics. `cmc[k - 1]` is the fraction of evaluated queries
/// with a correct match within the top `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_skipped: usize,
}

impl MetricsReport {
    /// CMC at rank `k` (1-based); ranks past the longest list saturate.
    pub fn cmc_at(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reduces per-query relevance lists (ranked order, `true` = same person)
/// to CMC and mAP. Average precision is the mean, over relevant positions
/// `r`, of the precision at `r`. Queries without any relevant entry are
/// counted as skipped.
pub fn compute_metrics(relevance: &[Vec<bool>], already_skipped: usize) -> Result<MetricsReport> {
    let mut skipped = already_skipped;
    let mut first_hits = Vec::new();
    let mut ap_sum = 0.0;
    let mut longest = 0;
    for rel in relevance {
        let Some(first) = rel.iter().position(|&r| r) else {
            skipped += 1;
            continue;
        };
        longest = longest.max(rel.len());
        first_hits.push(first);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, _) in rel.iter().enumerate().filter(|(_, &r)| r) {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
        }
        ap_sum += precision_sum / hits as f64;
    }
    let n = first_hits.len();
    if n == 0 {
        return Err(SavsError::InvalidArgument("no query could be evaluated".into()));
    }
    let mut counts = vec![0usize; longest];
    for &f in &first_hits {
        counts[f] += 1;
    }
    let mut cmc = Vec::with_capacity(longest);
    let mut acc = 0usize;
    for c in counts {
        acc += c;
        cmc.push(acc as f64 / n as f64);
    }
    let at = |k: usize| cmc[(k - 1).min(cmc.len() - 1)];
    Ok(MetricsReport {
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map: ap_sum / n as f64,
        num_queries: n,
        num_skipped: skipped,
        cmc,
    })
}

/// `k,cmc` rows for the full curve.
pub fn write_cmc_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut text = String::from("k,cmc\n");
    for (i, v) in report.cmc.iter().enumerate() {
        text.push_str(&format!("{},{v}\n", i + 1));
    }
    fs::write(path, text).map_err(|e| SavsError::io(path, e))
}

/// `query_path,rank,gallery_path,similarity,correct` rows for the first
/// `top` entries of every evaluated query.
pub fn write_ranked_lists(path: &Path, eval: &Evaluation, top: usize) -> Result<()> {
    let to_err = |e: csv::Error| SavsError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["query_path", "rank", "gallery_path", "similarity", "correct"])
        .map_err(to_err)?;
    for r in eval.rankings.iter().filter(|r| !r.skipped) {
        let qpid = eval.query_person_ids[r.query];
        for (rank, &(g, sim)) in r.ranked.iter().take(top).enumerate() {
            let correct = eval.index.person_ids[g] == qpid;
            w.write_record([
                eval.query_paths[r.query].display().to_string(),
                (rank + 1).to_string(),
                eval.index.paths[g].display().to_string(),
                format!("{sim:.6}"),
                (correct as u8).to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| SavsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_retrieval() {
        let m = compute_metrics(&[vec![true, false], vec![true, true, false]], 0).unwrap();
        assert_eq!((m.rank1, m.map), (1.0, 1.0));
        assert_eq!(m.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_relevant_at_one_and_three() {
        let m = compute_metrics(&[vec![true, false, true, false]], 0).unwrap();
        assert!((m.map - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn match_ranked_last() {
        let mut rel = vec![false; 6];
        rel[5] = true;
        let m = compute_metrics(&[rel], 0).unwrap();
        assert_eq!(m.cmc, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.rank5, 0.0);
        assert_eq!(m.rank10, 1.0);
        assert!((m.map - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn no_match_queries_are_skipped() {
        let m = compute_metrics(&[vec![false, false], vec![false, true]], 2).unwrap();
        assert_eq!((m.num_queries, m.num_skipped), (1, 3));
        assert!(compute_metrics(&[vec![false]], 0).is_err());
        assert!(compute_metrics(&[], 0).is_err());
    }

    #[test]
    fn json_keys() {
        let m = compute_metrics(&[vec![false, true]], 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        for key in ["rank1", "rank5", "rank10", "mAP", "cmc", "num_queries", "num_skipped"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: MetricsReport = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn cmc_is_monotone_and_reaches_one(
            rels in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 1..12), 1..10)
        ) {
            prop_assume!(rels.iter().any(|r| r.contains(&true)));
            let m = compute_metrics(&rels, 0).unwrap();
            prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*m.cmc.last().unwrap(), 1.0);
            prop_assert_eq!(m.rank1, m.cmc[0]);
            prop_assert!((0.0..=1.0).contains(&m.map));
        }
    }
}
