use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use crate::error::{Error, Result};
use crate::imaging::GroundTruth;
use crate::retrieval::RetrievalResult;

/// Average precision truncated at `k`, normalized by `min(m, k)` where `m` is the
/// number of relevant items. Returns 0 when `m = 0`.
pub fn ap_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be ≥ 1".into()));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for id in ranked {
        if !seen.insert(id.as_ref()) {
            return Err(Error::Input(format!("duplicate ranked id {:?}", id.as_ref())));
        }
    }
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
    pub relevant_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map_at_100: f64,
    /// One entry per query in result order, skipped queries included with `relevant_count = 0`.
    pub per_query: Vec<QueryAp>,
    pub skipped_queries: usize,
    pub k: usize,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!("mAP@{}={}", self.k, self.map_at_100)
    }

    /// `query_id,ap,relevant_count` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let csv_err = |e: csv::Error| Error::Format(format!("eval csv: {e}"));
        wr.write_record(["query_id", "ap", "relevant_count"]).map_err(csv_err)?;
        for q in &self.per_query {
            wr.write_record([q.query_id.as_str(), &q.ap.to_string(), &q.relevant_count.to_string()])
                .map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::Format(format!("eval csv: {e}")))
    }
}

/// Mean AP@k over queries with at least one relevant item.
pub fn map_at_k(results: &[RetrievalResult], truth: &GroundTruth, k: usize) -> Result<EvalReport> {
    let mut per_query = Vec::with_capacity(results.len());
    let (mut sum, mut scored, mut skipped) = (0.0, 0usize, 0usize);
    for r in results {
        let rel = truth
            .get(&r.query_id)
            .ok_or_else(|| Error::Input(format!("no ground truth for query {:?}", r.query_id)))?;
        let ids: Vec<&str> = r.ids().collect();
        let ap = ap_at_k(&ids, rel, k)?;
        if rel.is_empty() {
            skipped += 1;
        } else {
            sum += ap;
            scored += 1;
        }
        per_query.push(QueryAp {
            query_id: r.query_id.clone(),
            ap,
            relevant_count: rel.len(),
        });
    }
    if scored == 0 {
        return Err(Error::Input("no scorable queries".into()));
    }
    Ok(EvalReport {
        map_at_100: sum / scored as f64,
        per_query,
        skipped_queries: skipped,
        k,
    })
}

pub fn map_at_100(results: &[RetrievalResult], truth: &GroundTruth) -> Result<EvalReport> {
    map_at_k(results, truth, super::DEFAULT_K)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn result(q: &str, ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            query_id: q.into(),
            ranked: ids.iter().map(|s| (s.to_string(), 0.0)).collect(),
        }
    }

    #[test]
    fn hand_examples() {
        assert_eq!(ap_at_k(&["a", "b"], &rel(&["a"]), 100).unwrap(), 1.0);
        assert!((ap_at_k(&["a", "x", "b"], &rel(&["a", "b"]), 100).unwrap() - 5.0 / 6.0).abs() <= f64::EPSILON);
        assert_eq!(ap_at_k(&["x", "y"], &rel(&["a"]), 100).unwrap(), 0.0);
        assert_eq!(ap_at_k(&["x"], &rel(&[]), 100).unwrap(), 0.0);
    }

    #[test]
    fn truncation_and_denominator() {
        // two relevants, k = 1: normalizer min(2, 1) = 1
        assert_eq!(ap_at_k(&["a", "b"], &rel(&["a", "b"]), 1).unwrap(), 1.0);
        assert_eq!(ap_at_k(&["x", "a"], &rel(&["a"]), 1).unwrap(), 0.0);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(ap_at_k(&["a", "a"], &rel(&["a"]), 10), Err(Error::Input(_))));
    }

    #[test]
    fn mean_and_skips() {
        let truth = GroundTruth {
            entries: [
                ("q1".to_string(), rel(&["a"])),
                ("q2".to_string(), rel(&["b"])),
                ("q3".to_string(), rel(&[])),
            ]
            .into_iter()
            .collect(),
        };
        let rs = vec![result("q1", &["a", "b"]), result("q2", &["a", "b"]), result("q3", &["a"])];
        let rep = map_at_100(&rs, &truth).unwrap();
        assert_eq!(rep.map_at_100, 0.75);
        assert_eq!(rep.skipped_queries, 1);
        assert_eq!(rep.per_query.len(), 3);
        assert_eq!(rep.summary_line(), "mAP@100=0.75");
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "query_id,ap,relevant_count\nq1,1,1\nq2,0.5,1\nq3,0,0\n"
        );
    }

    #[test]
    fn degenerate_inputs() {
        let truth = GroundTruth {
            entries: [("q".to_string(), rel(&[]))].into_iter().collect(),
        };
        let err = map_at_100(&[result("q", &["a"])], &truth).unwrap_err();
        assert!(err.to_string().contains("no scorable queries"));
        let err = map_at_100(&[result("zz", &["a"])], &truth).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    fn ranked_and_rel(seed: u64, n: usize) -> (Vec<String>, BTreeSet<String>) {
        let mut rng = SeededRng::new(seed, "ap");
        let mut ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        rng.shuffle(&mut ids);
        let relevant = (0..n).filter(|_| rng.bernoulli(0.3)).map(|i| format!("i{i}")).collect();
        (ids, relevant)
    }

    proptest! {
        #[test]
        fn ap_bounded(seed in 0u64..5000, n in 1usize..150, k in 1usize..120) {
            let (ids, relevant) = ranked_and_rel(seed, n);
            let ap = ap_at_k(&ids, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn promoting_a_relevant_never_hurts(seed in 0u64..5000, n in 2usize..80, k in 1usize..100, pos in 1usize..80) {
            let (mut ids, relevant) = ranked_and_rel(seed, n);
            let pos = pos % n;
            prop_assume!(pos > 0 && relevant.contains(&ids[pos]));
            let before = ap_at_k(&ids, &relevant, k).unwrap();
            ids.swap(pos - 1, pos);
            let after = ap_at_k(&ids, &relevant, k).unwrap();
            prop_assert!(after >= before - 1e-15);
        }
    }
}
