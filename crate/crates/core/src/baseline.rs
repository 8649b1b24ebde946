//! Brute-force ε-ball support over every training embedding.
//!
//! No spatial index on purpose: this is the reference whose cost the sparse
//! variant is timed against.

use nalgebra::DMatrix;

use crate::data::EmbeddingDataset;
use crate::epistemic::{
    neighbor_label_fractions, neighbors_below, verdict_from_neighbors, EpistemicVerdict,
    SupportConfig, SupportMetric,
};
use crate::error::{Error, Result};
use crate::kernels::{row_major, sq_dist};

fn check_queries(xr: &DMatrix<f64>, ds: &EmbeddingDataset) -> Result<()> {
    if xr.ncols() != ds.dim() {
        return Err(Error::input(format!(
            "query dimension {} does not match training dimension {}",
            xr.ncols(),
            ds.dim()
        )));
    }
    Ok(())
}

/// One verdict per query row. Coherence follows `config.coherence_mode`; the
/// metric must be plain and `lambda` is ignored.
pub fn epsilon_ball_support(
    xr: &DMatrix<f64>,
    ds: &EmbeddingDataset,
    predicted: &[usize],
    config: &SupportConfig,
) -> Result<Vec<EpistemicVerdict>> {
    config.validate()?;
    check_queries(xr, ds)?;
    if config.metric != SupportMetric::Plain {
        return Err(Error::Config(
            "the baseline only supports the plain metric".into(),
        ));
    }
    if predicted.len() != xr.nrows() {
        return Err(Error::input(format!(
            "{} predictions for {} queries",
            predicted.len(),
            xr.nrows()
        )));
    }
    let c = ds.class_count();
    if let Some(&p) = predicted.iter().find(|&&p| p >= c) {
        return Err(Error::input(format!(
            "predicted class {p} out of range for {c} classes"
        )));
    }
    let d = ds.dim();
    let train = row_major(ds.embeddings());
    let queries = row_major(xr);
    let labels = ds.labels();
    Ok(queries
        .chunks_exact(d)
        .zip(predicted)
        .map(|(q, &p)| {
            let dists = train.chunks_exact(d).map(|t| sq_dist(q, t).sqrt());
            let neighbors = neighbors_below(dists, config.epsilon);
            let uncertainty = neighbor_label_fractions(&neighbors, labels, c);
            verdict_from_neighbors(&neighbors, labels, p, config, c, uncertainty)
        })
        .collect())
}

/// Label of the nearest reference row for each query, ties to the lowest index.
pub fn nearest_reference_labels(
    xr: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    labels: &[usize],
) -> Result<Vec<usize>> {
    if xr.ncols() != reference.ncols() {
        return Err(Error::input("query and reference dimensions differ"));
    }
    if reference.nrows() == 0 || labels.len() != reference.nrows() {
        return Err(Error::input(
            "reference set is empty or its labels do not match",
        ));
    }
    let d = xr.ncols();
    let refs = row_major(reference);
    Ok(row_major(xr)
        .chunks_exact(d)
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, r) in refs.chunks_exact(d).enumerate() {
                let s = sq_dist(q, r);
                if s < best.1 {
                    best = (j, s);
                }
            }
            labels[best.0]
        })
        .collect())
}
