//! AP@K, mAP@K and rank-movement reports.
//!
//! For a ranking and a set of relevant ids,
//!
//! ```text
//! AP@K = sum_{i=1}^{min(K, len)} p(i) * (r(i) - r(i-1)),   r(0) = 0
//! ```
//!
//! where `p(i)` is the fraction of the top `i` that is relevant and `r(i)`
//! is the number of relevant items in the top `i` divided by the recall
//! denominator. The default denominator is `min(|relevant|, K)`, so a
//! ranking that fills its top K with relevant items scores 1 even when more
//! than K items are relevant. [`RecallDenominator::Relevant`] uses
//! `|relevant|` instead.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{serialize_sig, RankedList};
use crate::store::{parse_json_lines, Manifest};

/// Denominator of the recall term in AP@K.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallDenominator {
    /// `min(|relevant|, K)`
    #[default]
    MinRelevantK,
    /// `|relevant|`
    Relevant,
}

/// Relevant gallery ids per query id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Deserialize)]
struct QrelsLine {
    query_id: String,
    relevant: Vec<String>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `query_id`; a second insert of the same id is an error.
    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        relevant: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<()> {
        let query_id = query_id.into();
        if self.map.contains_key(&query_id) {
            return Err(Error::Validation(format!(
                "query {query_id:?} judged twice"
            )));
        }
        self.map
            .insert(query_id, relevant.into_iter().map(Into::into).collect());
        Ok(())
    }

    /// Reads `{"query_id": ..., "relevant": [...]}` JSON lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut q = Qrels::new();
        for line in parse_json_lines::<QrelsLine>(&text, path)? {
            q.insert(line.query_id, line.relevant)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        }
        Ok(q)
    }

    /// Relevance by label equality: a gallery item is relevant to a query
    /// when both carry the same label. Unlabeled queries get empty sets.
    pub fn from_labels(queries: &Manifest, gallery: &Manifest) -> Result<Self> {
        let mut by_label: HashMap<&str, Vec<&str>> = HashMap::new();
        for r in gallery.records() {
            if let Some(l) = r.label.as_deref() {
                by_label.entry(l).or_default().push(&r.id);
            }
        }
        let mut q = Qrels::new();
        for r in queries.records() {
            let relevant = r
                .label
                .as_deref()
                .and_then(|l| by_label.get(l))
                .map(|v| v.iter().map(|s| s.to_string()).collect::<Vec<_>>())
                .unwrap_or_default();
            q.insert(r.id.clone(), relevant)?;
        }
        Ok(q)
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.map.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> + '_ {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Average precision of `ranking` over its top `k`.
pub fn ap_at_k(
    ranking: &RankedList,
    relevant: &BTreeSet<String>,
    k: usize,
    denominator: RecallDenominator,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::Validation(format!(
            "AP is undefined for query {:?}: no relevant items",
            ranking.query_id
        )));
    }
    let denom = match denominator {
        RecallDenominator::MinRelevantK => relevant.len().min(k),
        RecallDenominator::Relevant => relevant.len(),
    } as f64;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, id) in ranking.ids().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            // r(i) - r(i-1) is 1/denom exactly at hits, zero elsewhere
            ap += (hits as f64 / (i + 1) as f64) * (1.0 / denom);
        }
    }
    Ok(ap)
}

/// Per-query average precision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub query_id: String,
    #[serde(serialize_with = "serialize_sig")]
    pub ap: f64,
}

/// Corpus-level evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub k: usize,
    #[serde(serialize_with = "serialize_sig")]
    pub map_at_k: f64,
    /// Number of scored queries, `m`.
    pub queries: usize,
    /// Queries left out of the mean because nothing is relevant to them.
    pub skipped: usize,
    pub recall_denominator: RecallDenominator,
    pub per_query: Vec<QueryAp>,
}

/// mAP@K over `runs`: the mean of AP@K over queries with at least one
/// relevant item.
pub fn mean_ap_at_k(
    runs: &[RankedList],
    qrels: &Qrels,
    k: usize,
    denominator: RecallDenominator,
) -> Result<EvalReport> {
    let mut per_query = Vec::with_capacity(runs.len());
    let mut skipped = 0;
    for run in runs {
        let relevant = qrels.get(&run.query_id).ok_or_else(|| {
            Error::Validation(format!("run has unjudged query {:?}", run.query_id))
        })?;
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        per_query.push(QueryAp {
            query_id: run.query_id.clone(),
            ap: ap_at_k(run, relevant, k, denominator)?,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevant items and were skipped");
    }
    if per_query.is_empty() {
        return Err(Error::Validation(
            "no query with relevant items to evaluate (m = 0)".into(),
        ));
    }
    let map_at_k = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        k,
        map_at_k,
        queries: per_query.len(),
        skipped,
        recall_denominator: denominator,
        per_query,
    })
}

/// Where one relevant item sat before and after re-ranking. Ranks are
/// 1-based; a positive `delta` means the item moved up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Movement {
    pub id: String,
    pub before: usize,
    pub after: usize,
    pub delta: i64,
}

/// Movement of the relevant items of one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MovementReport {
    pub promoted: usize,
    pub demoted: usize,
    pub unchanged: usize,
    pub items: Vec<Movement>,
}

/// Compares the positions of relevant items in two rankings of the same
/// candidates. Relevant ids absent from both lists are ignored.
pub fn rank_movement(
    before: &RankedList,
    after: &RankedList,
    relevant: &BTreeSet<String>,
) -> Result<MovementReport> {
    let positions = |l: &RankedList| -> HashMap<String, usize> {
        l.ids()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i + 1))
            .collect()
    };
    let pb = positions(before);
    let pa = positions(after);
    if let Some(id) = pb.keys().find(|id| !pa.contains_key(*id)) {
        return Err(Error::Validation(format!(
            "query {:?}: id {id:?} only in the first ranking",
            before.query_id
        )));
    }
    if let Some(id) = pa.keys().find(|id| !pb.contains_key(*id)) {
        return Err(Error::Validation(format!(
            "query {:?}: id {id:?} only in the second ranking",
            after.query_id
        )));
    }
    let mut report = MovementReport::default();
    for id in relevant {
        let (Some(&b), Some(&a)) = (pb.get(id), pa.get(id)) else {
            continue;
        };
        let delta = b as i64 - a as i64;
        match delta.cmp(&0) {
            std::cmp::Ordering::Greater => report.promoted += 1,
            std::cmp::Ordering::Less => report.demoted += 1,
            std::cmp::Ordering::Equal => report.unchanged += 1,
        }
        report.items.push(Movement {
            id: id.clone(),
            before: b,
            after: a,
            delta,
        });
    }
    report.items.sort_by_key(|x| x.before);
    Ok(report)
}

/// Movement for one query inside a [`RunMovement`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryMovement {
    pub query_id: String,
    #[serde(flatten)]
    pub report: MovementReport,
}

/// Movement summed over every query of two runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunMovement {
    pub promoted: usize,
    pub demoted: usize,
    pub unchanged: usize,
    pub queries: Vec<QueryMovement>,
}

/// Pairs two runs by query id and reports per-query movement. The runs must
/// cover the same queries.
pub fn run_movement(
    before: &[RankedList],
    after: &[RankedList],
    qrels: &Qrels,
) -> Result<RunMovement> {
    let after_by_id: HashMap<&str, &RankedList> =
        after.iter().map(|r| (r.query_id.as_str(), r)).collect();
    if before.len() != after.len() {
        return Err(Error::Validation(format!(
            "runs cover {} and {} queries",
            before.len(),
            after.len()
        )));
    }
    let empty = BTreeSet::new();
    let mut out = RunMovement::default();
    for b in before {
        let a = after_by_id.get(b.query_id.as_str()).ok_or_else(|| {
            Error::Validation(format!(
                "query {:?} missing from the second run",
                b.query_id
            ))
        })?;
        let relevant = qrels.get(&b.query_id).unwrap_or(&empty);
        let report = rank_movement(b, a, relevant)?;
        out.promoted += report.promoted;
        out.demoted += report.demoted;
        out.unchanged += report.unchanged;
        out.queries.push(QueryMovement {
            query_id: b.query_id.clone(),
            report,
        });
    }
    Ok(out)
}

/// Aligned plain-text table of a [`RunMovement`].
pub fn movement_table(m: &RunMovement) -> String {
    let width = m
        .queries
        .iter()
        .map(|q| q.query_id.len())
        .chain(std::iter::once("query".len()))
        .max()
        .unwrap_or(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>9}\n",
        "query", "promoted", "demoted", "unchanged", "net_delta"
    );
    for q in &m.queries {
        let net: i64 = q.report.items.iter().map(|i| i.delta).sum();
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>8}  {:>9}  {:>9}\n",
            q.query_id, q.report.promoted, q.report.demoted, q.report.unchanged, net
        ));
    }
    let net: i64 = m
        .queries
        .iter()
        .flat_map(|q| q.report.items.iter())
        .map(|i| i.delta)
        .sum();
    out.push_str(&format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>9}\n",
        "TOTAL", m.promoted, m.demoted, m.unchanged, net
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::RankedEntry;

    fn list(q: &str, ids: &[&str]) -> RankedList {
        RankedList::new(
            q,
            ids.iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
        )
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    const D: RecallDenominator = RecallDenominator::MinRelevantK;

    #[test]
    fn perfect_single_relevant() {
        assert_eq!(
            ap_at_k(&list("q", &["a", "b", "c"]), &set(&["a"]), 10, D).unwrap(),
            1.0
        );
    }

    #[test]
    fn worked_examples() {
        let ap = ap_at_k(&list("q", &["a", "b", "c"]), &set(&["a", "c"]), 3, D).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        let ap = ap_at_k(&list("q", &["b", "a", "c"]), &set(&["a", "c"]), 3, D).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn more_relevant_than_k() {
        let r = list("q", &["a", "b"]);
        let rel = set(&["a", "b", "c", "d"]);
        assert_eq!(ap_at_k(&r, &rel, 2, D).unwrap(), 1.0);
        assert_eq!(
            ap_at_k(&r, &rel, 2, RecallDenominator::Relevant).unwrap(),
            0.5
        );
    }

    #[test]
    fn empty_relevant_is_error() {
        assert!(ap_at_k(&list("q", &["a"]), &set(&[]), 1, D).is_err());
    }

    #[test]
    fn mean_of_two_queries() {
        let mut q = Qrels::new();
        q.insert("q1", ["a"]).unwrap();
        q.insert("q2", ["a", "b"]).unwrap();
        q.insert("q3", Vec::<String>::new()).unwrap();
        let runs = [
            list("q1", &["a", "x"]),
            list("q2", &["x", "a", "y", "z", "b"]),
            list("q3", &["a"]),
        ];
        // q2: 1/2 * 1/2 + 2/5 * 1/2 = 0.45 at K = 5
        let r = mean_ap_at_k(&runs[..1], &q, 5, D).unwrap();
        assert_eq!(r.map_at_k, 1.0);
        let r = mean_ap_at_k(&runs, &q, 5, D).unwrap();
        assert_eq!(r.queries, 2);
        assert_eq!(r.skipped, 1);
        assert!((r.map_at_k - (1.0 + 0.45) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn halves_average_to_three_quarters() {
        let mut q = Qrels::new();
        q.insert("q1", ["a"]).unwrap();
        q.insert("q2", ["a"]).unwrap();
        let runs = [list("q1", &["a", "b"]), list("q2", &["b", "a"])];
        assert_eq!(mean_ap_at_k(&runs, &q, 10, D).unwrap().map_at_k, 0.75);
    }

    #[test]
    fn unknown_query_and_empty_mean_are_errors() {
        let mut q = Qrels::new();
        q.insert("q1", Vec::<String>::new()).unwrap();
        assert!(mean_ap_at_k(&[list("zz", &["a"])], &q, 1, D).is_err());
        assert!(mean_ap_at_k(&[list("q1", &["a"])], &q, 1, D).is_err());
        assert!(mean_ap_at_k(&[], &q, 1, D).is_err());
    }

    #[test]
    fn qrels_from_labels() {
        let mk = |id: &str, label: Option<&str>| {
            let mut r = crate::store::SampleRecord::new(id);
            r.label = label.map(str::to_string);
            r
        };
        let queries = Manifest::new(vec![mk("q1", Some("x")), mk("q2", None)]).unwrap();
        let gallery = Manifest::new(vec![
            mk("g1", Some("x")),
            mk("g2", Some("y")),
            mk("g3", Some("x")),
        ])
        .unwrap();
        let q = Qrels::from_labels(&queries, &gallery).unwrap();
        assert_eq!(q.get("q1").unwrap(), &set(&["g1", "g3"]));
        assert!(q.get("q2").unwrap().is_empty());
    }

    #[test]
    fn identical_lists_do_not_move() {
        let l = list("q", &["a", "b", "c"]);
        let m = rank_movement(&l, &l, &set(&["a", "c"])).unwrap();
        assert_eq!((m.promoted, m.demoted, m.unchanged), (0, 0, 2));
        assert!(m.items.iter().all(|i| i.delta == 0));
    }

    #[test]
    fn seven_to_two_is_promotion_by_five() {
        let before = list("q", &["a", "b", "c", "d", "e", "f", "t", "h"]);
        let after = list("q", &["a", "t", "b", "c", "d", "e", "f", "h"]);
        let m = rank_movement(&before, &after, &set(&["t"])).unwrap();
        assert_eq!(
            m.items[0],
            Movement {
                id: "t".into(),
                before: 7,
                after: 2,
                delta: 5
            }
        );
        assert_eq!(m.promoted, 1);
    }

    #[test]
    fn mismatched_candidates_are_error() {
        assert!(rank_movement(
            &list("q", &["a", "b"]),
            &list("q", &["a", "c"]),
            &set(&["a"])
        )
        .is_err());
    }

    #[test]
    fn run_movement_requires_same_queries() {
        let q = Qrels::new();
        assert!(run_movement(&[list("q1", &["a"])], &[list("q2", &["a"])], &q).is_err());
        assert!(run_movement(&[list("q1", &["a"])], &[], &q).is_err());
    }
}
