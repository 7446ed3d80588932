use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::model::HealthGen;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub record_id: String,
    /// Index into the reference cohort.
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub query_id: String,
    /// Closest first.
    pub neighbors: Vec<Neighbor>,
}

/// `1 − cos(a, b)`, exactly zero for identical vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(Error::ZeroNorm { which: "query".into() });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { which: "reference".into() });
    }
    if a == b {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).max(0.0))
}

/// Posterior-mean embeddings `[v; z_1..z_T]`, one per record.
pub fn embed(model: &HealthGen, records: &[&PatientRecord], cohort_labels: &[String]) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Vec<Vec<f64>>> = records
        .par_chunks(256)
        .map(|chunk| {
            let batch = model.batch(chunk, cohort_labels)?;
            let e = model.encode_mean(&batch)?;
            Ok(e.rows().into_iter().map(|r| r.to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// The `k` training records closest to each query in latent space.
///
/// `queries` and `reference` must carry the model's conditioning labels.
pub fn memorization_audit(
    model: &HealthGen,
    queries: &Cohort,
    reference: &Cohort,
    k: usize,
) -> Result<Vec<AuditResult>> {
    let train = reference.select(&reference.splits.train);
    let ref_emb = embed(model, &train, &reference.label_names)?;
    let all: Vec<&PatientRecord> = queries.records.iter().collect();
    let q_emb = embed(model, &all, &queries.label_names)?;
    q_emb
        .par_iter()
        .zip(all.par_iter())
        .map(|(q, rec)| {
            let mut d: Vec<(f64, usize)> = ref_emb
                .iter()
                .enumerate()
                .map(|(i, r)| cosine_distance(q, r).map(|v| (v, i)))
                .collect::<Result<_>>()?;
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(AuditResult {
                query_id: rec.id.clone(),
                neighbors: d
                    .into_iter()
                    .take(k)
                    .map(|(distance, i)| Neighbor {
                        record_id: train[i].id.clone(),
                        index: reference.splits.train[i],
                        distance,
                    })
                    .collect(),
            })
        })
        .collect()
}
