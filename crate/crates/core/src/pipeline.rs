//! Per-query orchestration and the batch driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaption::{adapted_query, AdaptionConfig};
use crate::error::{Error, Result};
use crate::kreciprocal::{k_reciprocal_order, KrConfig};
use crate::ranking::{RankedEntry, RankedList};
use crate::similarity::{score_rows, to_entries};
use crate::store::{EmbeddingMatrix, Manifest};

/// Which ranking a query gets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain cosine order over the whole gallery.
    None,
    /// k-reciprocal re-ranking of the pool with the raw text query as probe.
    Krnn,
    /// k-reciprocal re-ranking of the pool with the adapted query as probe.
    #[default]
    A3r,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "krnn" => Ok(Method::Krnn),
            "a3r" => Ok(Method::A3r),
            other => Err(Error::Config(format!(
                "unknown method {other:?}, expected none, krnn or a3r"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::None => "none",
            Method::Krnn => "krnn",
            Method::A3r => "a3r",
        })
    }
}

/// Everything that shapes a ranking.
///
/// Serialized flat:
/// `{"method": "a3r", "pool": 100, "tol": 1e-7, "max_iter": 1000,
///   "clamp_nonnegative": false, "k1": 20, "k2": 6, "lambda": 0.3, "keep": 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub method: Method,
    /// Candidates re-ranked per query; 0 means the whole gallery.
    pub pool: usize,
    #[serde(flatten)]
    pub adaption: AdaptionConfig,
    #[serde(flatten)]
    pub kr: KrConfig,
    /// Entries kept per output list; 0 keeps the full ranking.
    pub keep: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            method: Method::A3r,
            pool: 100,
            adaption: AdaptionConfig::default(),
            kr: KrConfig::default(),
            keep: 0,
        }
    }
}

impl RerankConfig {
    pub fn with_method(method: Method) -> Self {
        RerankConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != Method::None {
            self.kr.validate()?;
        }
        if self.method == Method::A3r {
            self.adaption.validate()?;
        }
        Ok(())
    }

    /// Pool size for a gallery of `n` items.
    pub fn pool_size(&self, n: usize) -> usize {
        if self.pool == 0 {
            n
        } else {
            self.pool.min(n)
        }
    }
}

/// Ranks the gallery for one query.
///
/// For the re-ranking methods the pool is the top `pool` rows by cosine
/// score. Rows outside the pool follow the re-ranked pool in their cosine
/// order; their reported score is their cosine score capped at the score of
/// the entry before them, which keeps scores non-increasing.
pub fn run_query(
    query_id: &str,
    q: &[f32],
    gallery: &EmbeddingMatrix,
    ids: &Manifest,
    cfg: &RerankConfig,
) -> Result<RankedList> {
    cfg.validate()?;
    ids.check_aligned(gallery, "gallery")?;
    let scored = score_rows(q, gallery)?;
    if scored.is_empty() {
        return Ok(RankedList::new(query_id, Vec::new()));
    }
    let mut entries = match cfg.method {
        Method::None => to_entries(&scored, ids),
        Method::Krnn | Method::A3r => rerank_pool(query_id, q, gallery, ids, &scored, cfg)?,
    };
    if cfg.keep > 0 {
        entries.truncate(cfg.keep);
    }
    Ok(RankedList::new(query_id, entries))
}

fn rerank_pool(
    query_id: &str,
    q: &[f32],
    gallery: &EmbeddingMatrix,
    ids: &Manifest,
    scored: &[(usize, f64)],
    cfg: &RerankConfig,
) -> Result<Vec<RankedEntry>> {
    let m = cfg.pool_size(scored.len());
    let pool_rows: Vec<usize> = scored[..m].iter().map(|&(i, _)| i).collect();
    let pool = gallery.select_rows(&pool_rows);
    let probe: Vec<f64> = match cfg.method {
        Method::A3r => {
            let adapted = adapted_query(&pool, q, &cfg.adaption)?;
            if adapted.fallback {
                log::debug!("{query_id}: degenerate weighting, using the raw query");
            } else if !adapted.converged {
                log::warn!(
                    "{query_id}: power iteration stopped after {} steps without converging",
                    adapted.iterations_used
                );
            }
            adapted.vector
        }
        _ => q.iter().map(|&v| f64::from(v)).collect(),
    };
    let order = k_reciprocal_order(&probe, &pool, &cfg.kr.clamped_to(m))?;

    let mut entries: Vec<RankedEntry> = order
        .into_iter()
        .map(|(pi, score)| RankedEntry {
            id: ids.id(pool_rows[pi]).to_string(),
            score,
        })
        .collect();
    let mut floor = entries.last().map_or(f64::INFINITY, |e| e.score);
    for &(row, cosine) in &scored[m..] {
        floor = floor.min(cosine);
        entries.push(RankedEntry {
            id: ids.id(row).to_string(),
            score: floor,
        });
    }
    Ok(entries)
}

/// Runs every query of `queries` against `gallery` on a pool of `workers`
/// threads. Output order follows the query manifest and does not depend on
/// the number of workers.
pub fn run_batch(
    queries: &EmbeddingMatrix,
    query_ids: &Manifest,
    gallery: &EmbeddingMatrix,
    gallery_ids: &Manifest,
    cfg: &RerankConfig,
    workers: usize,
) -> Result<Vec<RankedList>> {
    cfg.validate()?;
    query_ids.check_aligned(queries, "queries")?;
    gallery_ids.check_aligned(gallery, "gallery")?;
    if !queries.is_empty() && !gallery.is_empty() && queries.dim() != gallery.dim() {
        return Err(Error::shape(
            gallery.dim(),
            queries.dim(),
            "query embeddings",
        ));
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    threads.install(|| {
        (0..queries.rows())
            .into_par_iter()
            .map(|i| run_query(query_ids.id(i), queries.row(i), gallery, gallery_ids, cfg))
            .collect()
    })
}
