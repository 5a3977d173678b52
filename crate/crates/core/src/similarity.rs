//! Probe-to-gallery similarity rows.
//!
//! A per-subject row has one column per gallery subject; a per-media row has
//! one column per gallery medium in canonical order. Galleries store unit
//! vectors, so every per-media entry is a cosine.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Gallery};
use crate::error::{Error, Result};
use crate::vector::{self, dot};

/// How the per-subject score is formed from a subject's media.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectScoring {
    /// Inner product with the plain mean of the unit media.
    #[default]
    Center,
    /// Inner product with the mean re-normalized to unit length.
    RenormalizedCenter,
    /// Mean of the per-media cosines.
    MeanSample,
}

fn check_dim(probe: &[f64], gallery: &Gallery) -> Result<()> {
    if probe.len() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            found: probe.len(),
        });
    }
    Ok(())
}

/// `⟨q, mean_j g_ij⟩` for every subject, the mean left unnormalized.
pub fn per_subject_scores(probe: &Embedding, gallery: &Gallery) -> Result<Vec<f64>> {
    subject_scores(probe.vector(), gallery, SubjectScoring::Center)
}

/// One cosine per gallery medium, canonical order.
pub fn per_media_scores(probe: &Embedding, gallery: &Gallery) -> Result<Vec<f64>> {
    media_scores(probe.vector(), gallery)
}

/// Mean of per-media cosines for every subject.
pub fn mean_sample_scores(probe: &Embedding, gallery: &Gallery) -> Result<Vec<f64>> {
    subject_scores(probe.vector(), gallery, SubjectScoring::MeanSample)
}

pub fn media_scores(probe: &[f64], gallery: &Gallery) -> Result<Vec<f64>> {
    check_dim(probe, gallery)?;
    Ok((0..gallery.total_media())
        .map(|i| dot(probe, gallery.medium(i)).clamp(-1.0, 1.0))
        .collect())
}

pub fn subject_scores(probe: &[f64], gallery: &Gallery, scoring: SubjectScoring) -> Result<Vec<f64>> {
    check_dim(probe, gallery)?;
    let row = match scoring {
        SubjectScoring::Center => (0..gallery.num_subjects())
            .map(|s| dot(probe, gallery.center(s)).clamp(-1.0, 1.0))
            .collect(),
        SubjectScoring::RenormalizedCenter => {
            let mut row = Vec::with_capacity(gallery.num_subjects());
            for (s, subject) in gallery.subjects().iter().enumerate() {
                let unit = vector::normalize(gallery.center(s)).map_err(|e| e.in_subject(&subject.id))?;
                row.push(dot(probe, &unit).clamp(-1.0, 1.0));
            }
            row
        }
        SubjectScoring::MeanSample => {
            let media = media_scores(probe, gallery)?;
            pool_mean(&media, gallery)
        }
    };
    Ok(row)
}

/// Per-subject mean of a per-media row.
pub(crate) fn pool_mean(media_row: &[f64], gallery: &Gallery) -> Vec<f64> {
    (0..gallery.num_subjects())
        .map(|s| {
            let r = gallery.media_range(s);
            let n = r.len() as f64;
            media_row[r].iter().sum::<f64>() / n
        })
        .collect()
}
