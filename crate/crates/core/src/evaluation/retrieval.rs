use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::metrics::{compute_metrics, MetricsReport};
use crate::data::LoadedSample;
use crate::decoder::{FeatureExtractor, SavsModel};
use crate::error::{Result, SavsError};
use crate::exec::Exec;
use crate::tensor::{dot, l2_normalize};

/// Which gallery entries a query may be matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalProtocol {
    /// Every gallery entry is a candidate.
    Standard,
    /// Entries with the query's person id and clothing id are removed.
    #[default]
    ClothChanging,
}

impl fmt::Display for EvalProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalProtocol::Standard => "standard",
            EvalProtocol::ClothChanging => "cloth-changing",
        })
    }
}

impl FromStr for EvalProtocol {
    type Err = SavsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(EvalProtocol::Standard),
            "cloth-changing" | "cloth_changing" => Ok(EvalProtocol::ClothChanging),
            other => Err(SavsError::Config(format!(
                "unknown protocol `{other}` (standard | cloth-changing)"
            ))),
        }
    }
}

impl EvalProtocol {
    pub fn admits(self, query: (u32, u32), gallery: (u32, u32)) -> bool {
        match self {
            EvalProtocol::Standard => true,
            EvalProtocol::ClothChanging => query != gallery,
        }
    }
}

/// L2-normalized gallery embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub embeddings: Vec<Vec<f64>>,
    pub person_ids: Vec<u32>,
    pub clothing_ids: Vec<u32>,
    pub paths: Vec<PathBuf>,
}

impl RetrievalIndex {
    /// Normalizes `embeddings` row by row.
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        person_ids: Vec<u32>,
        clothing_ids: Vec<u32>,
        paths: Vec<PathBuf>,
    ) -> Result<Self> {
        let n = embeddings.len();
        if person_ids.len() != n || clothing_ids.len() != n || paths.len() != n {
            return Err(SavsError::ShapeMismatch(format!(
                "{n} embeddings, {} person ids, {} clothing ids, {} paths",
                person_ids.len(),
                clothing_ids.len(),
                paths.len()
            )));
        }
        Ok(RetrievalIndex {
            embeddings: embeddings.iter().map(|e| l2_normalize(e)).collect(),
            person_ids,
            clothing_ids,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Test-path embeddings (`forward_test`) of every sample, in order.
pub fn embed_samples<E: FeatureExtractor>(
    model: &SavsModel<E>,
    samples: &[LoadedSample],
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    exec.try_map(samples.len(), |i| {
        model.forward_test(&samples[i].image, &samples[i].foreground)
    })
}

pub fn build_index<E: FeatureExtractor>(
    model: &SavsModel<E>,
    gallery: &[LoadedSample],
    exec: Exec,
) -> Result<RetrievalIndex> {
    if gallery.is_empty() {
        return Err(SavsError::Dataset("gallery is empty".into()));
    }
    RetrievalIndex::new(
        embed_samples(model, gallery, exec)?,
        gallery.iter().map(|s| s.record.person_id).collect(),
        gallery.iter().map(|s| s.record.clothing_id).collect(),
        gallery.iter().map(|s| s.record.image_path.clone()).collect(),
    )
}

/// Admitted gallery entries by descending cosine similarity, ties broken by
/// ascending gallery index. `None` when the protocol leaves nothing.
pub fn rank(
    query: &[f64],
    index: &RetrievalIndex,
    query_labels: (u32, u32),
    protocol: EvalProtocol,
) -> Option<Vec<(usize, f64)>> {
    let q = l2_normalize(query);
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .filter(|&i| protocol.admits(query_labels, (index.person_ids[i], index.clothing_ids[i])))
        .map(|i| (i, dot(&q, &index.embeddings[i])))
        .collect();
    if scored.is_empty() {
        return None;
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Some(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query: usize,
    /// `(gallery index, similarity)`; empty when skipped.
    pub ranked: Vec<(usize, f64)>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rankings: Vec<QueryRanking>,
    pub index: RetrievalIndex,
    pub query_paths: Vec<PathBuf>,
    pub query_person_ids: Vec<u32>,
}

/// Ranks every query against the gallery and reduces to metrics. Queries
/// whose admitted gallery holds no entry of their person id are skipped.
pub fn evaluate<E: FeatureExtractor>(
    model: &SavsModel<E>,
    queries: &[LoadedSample],
    gallery: &[LoadedSample],
    protocol: EvalProtocol,
    exec: Exec,
) -> Result<Evaluation> {
    let index = build_index(model, gallery, exec)?;
    let q_emb = embed_samples(model, queries, exec)?;
    let rankings: Vec<QueryRanking> = exec.map(queries.len(), |qi| {
        let rec = &queries[qi].record;
        let ranked = rank(&q_emb[qi], &index, (rec.person_id, rec.clothing_id), protocol);
        let has_match = ranked
            .as_ref()
            .is_some_and(|r| r.iter().any(|&(g, _)| index.person_ids[g] == rec.person_id));
        QueryRanking {
            query: qi,
            ranked: ranked.unwrap_or_default(),
            skipped: !has_match,
        }
    });
    let relevance: Vec<Vec<bool>> = rankings
        .iter()
        .filter(|r| !r.skipped)
        .map(|r| {
            let pid = queries[r.query].record.person_id;
            r.ranked.iter().map(|&(g, _)| index.person_ids[g] == pid).collect()
        })
        .collect();
    let skipped = rankings.iter().filter(|r| r.skipped).count();
    let report = compute_metrics(&relevance, skipped)?;
    Ok(Evaluation {
        report,
        rankings,
        index,
        query_paths: queries.iter().map(|s| s.record.image_path.clone()).collect(),
        query_person_ids: queries.iter().map(|s| s.record.person_id).collect(),
    })
}
