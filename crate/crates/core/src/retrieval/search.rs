use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{dot, Scalar};
use crate::retrieval::DescriptorSet;

pub const DEFAULT_K: usize = 100;

/// Ranked neighbours of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(index_id, score)`, best first.
    pub ranked: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k by raw dot product. Output order follows the query set.
pub fn search_topk<T: Scalar>(
    queries: &DescriptorSet<T>,
    index: &DescriptorSet<T>,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    if queries.dim() != index.dim() {
        return Err(Error::Dimension(format!(
            "query descriptors are {}-d, index descriptors {}-d",
            queries.dim(),
            index.dim()
        )));
    }
    if k == 0 {
        return Err(Error::Usage("k must be ≥ 1".into()));
    }
    let k = k.min(index.len());
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(index.len());
    let mut out = Vec::with_capacity(queries.len());
    for (qi, qid) in queries.ids().iter().enumerate() {
        let q = queries.row(qi);
        scored.clear();
        scored.extend(
            index
                .ids()
                .iter()
                .enumerate()
                .map(|(i, id)| (dot(q, index.row(i)).as_f64(), id.as_str())),
        );
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        out.push(RetrievalResult {
            query_id: qid.clone(),
            ranked: scored.iter().map(|&(s, id)| (id.to_string(), s)).collect(),
        });
    }
    Ok(out)
}

/// Writes `query_id,rank,index_id,score` rows.
pub fn write_results_csv<W: std::io::Write>(results: &[RetrievalResult], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(format!("results csv: {e}"));
    wr.write_record(["query_id", "rank", "index_id", "score"]).map_err(csv_err)?;
    for r in results {
        for (rank, (id, score)) in r.ranked.iter().enumerate() {
            wr.write_record([r.query_id.as_str(), &(rank + 1).to_string(), id, &score.to_string()])
                .map_err(csv_err)?;
        }
    }
    wr.flush().map_err(|e| Error::Format(format!("results csv: {e}")))
}

/// Inverse of [`write_results_csv`]; ranks must be contiguous per query.
pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<RetrievalResult>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<RetrievalResult> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("results csv: {e}")))?;
        let bad = |what: &str| Error::Format(format!("results csv row {}: bad {what}", line + 2));
        if rec.len() != 4 {
            return Err(bad("field count"));
        }
        let rank: usize = rec[1].parse().map_err(|_| bad("rank"))?;
        let score: f64 = rec[3].parse().map_err(|_| bad("score"))?;
        let q = &rec[0];
        if out.last().map(|r| r.query_id.as_str()) != Some(q) {
            out.push(RetrievalResult {
                query_id: q.to_string(),
                ranked: Vec::new(),
            });
        }
        let cur = out.last_mut().unwrap();
        if rank != cur.ranked.len() + 1 {
            return Err(bad("rank sequence"));
        }
        cur.ranked.push((rec[2].to_string(), score));
    }
    Ok(out)
}
