//! Gallery ingestion and per-subject compression into k-means prototypes.

pub mod io;
pub mod kmeans;

use rayon::prelude::*;
use serde::Serialize;

pub use io::{load_gallery, load_probes, read_gallery, read_probes, write_gallery, write_probes};
pub use kmeans::{kmeans, ClusterConfig, ClusterCount, KMeans};

use crate::embedding::{Embedding, Gallery, Subject};
use crate::error::Result;
use crate::rng;
use crate::vector;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectProvenance {
    pub subject_id: String,
    pub original_media: usize,
    pub cluster_sizes: Vec<usize>,
    /// Cluster means before re-normalization.
    pub raw_centroids: Vec<Vec<f64>>,
}

/// A gallery whose subjects hold cluster prototypes instead of raw media.
#[derive(Clone, Debug)]
pub struct CompactGallery {
    gallery: Gallery,
    provenance: Vec<SubjectProvenance>,
}

impl CompactGallery {
    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn into_gallery(self) -> Gallery {
        self.gallery
    }

    pub fn provenance(&self) -> &[SubjectProvenance] {
        &self.provenance
    }

    pub fn original_media(&self) -> usize {
        self.provenance.iter().map(|p| p.original_media).sum()
    }

    /// Compact media count over original media count.
    pub fn compression_ratio(&self) -> f64 {
        self.gallery.total_media() as f64 / self.original_media() as f64
    }
}

fn compact_subject(subject: &Subject, clusters: usize, config: &ClusterConfig) -> Result<(Subject, SubjectProvenance)> {
    let m = subject.media.len();
    if clusters >= m {
        // Singleton clusters: the prototype is the medium itself, bit for bit.
        let media = subject.media.clone();
        let provenance = SubjectProvenance {
            subject_id: subject.id.clone(),
            original_media: m,
            cluster_sizes: vec![1; m],
            raw_centroids: subject.media.iter().map(|e| e.vector().to_vec()).collect(),
        };
        return Ok((
            Subject {
                id: subject.id.clone(),
                media,
            },
            provenance,
        ));
    }
    let points: Vec<Vec<f64>> = subject.media.iter().map(|e| e.vector().to_vec()).collect();
    // Seeded by subject id so other subjects never influence this one.
    let local = ClusterConfig {
        seed: rng::derive_seed(config.seed, &[rng::stable_hash(&subject.id)]),
        ..*config
    };
    let km = kmeans(&points, clusters, &local)?;
    let media = km
        .centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let unit = vector::normalize(c).map_err(|e| e.in_subject(&subject.id))?;
            Ok(Embedding::from_unit(subject.id.clone(), format!("cluster{k}"), unit))
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = SubjectProvenance {
        subject_id: subject.id.clone(),
        original_media: m,
        cluster_sizes: km.cluster_sizes(),
        raw_centroids: km.centroids,
    };
    Ok((
        Subject {
            id: subject.id.clone(),
            media,
        },
        provenance,
    ))
}

/// Run k-means independently within each subject.
pub fn cluster_gallery(gallery: &Gallery, config: &ClusterConfig) -> Result<CompactGallery> {
    let clusters = match config.clusters_per_subject {
        ClusterCount::Unlimited => {
            let provenance = gallery
                .subjects()
                .iter()
                .map(|s| SubjectProvenance {
                    subject_id: s.id.clone(),
                    original_media: s.media.len(),
                    cluster_sizes: vec![1; s.media.len()],
                    raw_centroids: s.media.iter().map(|e| e.vector().to_vec()).collect(),
                })
                .collect();
            return Ok(CompactGallery {
                gallery: gallery.clone(),
                provenance,
            });
        }
        ClusterCount::Finite(c) => c,
    };
    let parts = gallery
        .subjects()
        .par_iter()
        .map(|s| compact_subject(s, clusters, config))
        .collect::<Result<Vec<_>>>()?;
    let (subjects, provenance): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(CompactGallery {
        gallery: Gallery::from_subjects(subjects)?,
        provenance,
    })
}
