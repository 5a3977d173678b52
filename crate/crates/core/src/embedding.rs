//! Embeddings, galleries and probe sets.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

/// One unit-normalized feature vector tagged with its subject and media ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub subject_id: String,
    pub media_id: String,
    vector: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw` to unit length.
    pub fn new(subject_id: impl Into<String>, media_id: impl Into<String>, raw: &[f64]) -> Result<Self> {
        Ok(Self {
            subject_id: subject_id.into(),
            media_id: media_id.into(),
            vector: vector::normalize(raw)?,
        })
    }

    /// Wraps a vector that is already unit length, keeping its bits.
    pub(crate) fn from_unit(subject_id: String, media_id: String, vector: Vec<f64>) -> Self {
        Self {
            subject_id,
            media_id,
            vector,
        }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub media: Vec<Embedding>,
}

/// Per-subject collections of embeddings in canonical order: subjects by
/// first appearance, media by appearance within the subject.
#[derive(Clone, Debug)]
pub struct Gallery {
    subjects: Vec<Subject>,
    dim: usize,
    // Row-major copy of every medium in canonical order.
    flat: Vec<f64>,
    offsets: Vec<usize>,
    // Mean of each subject's unit media; not re-normalized.
    centers: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn from_embeddings(embeddings: Vec<Embedding>) -> Result<Self> {
        let mut order: Vec<Subject> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for e in embeddings {
            if !seen.insert((e.subject_id.clone(), e.media_id.clone())) {
                return Err(Error::DuplicateMediaId {
                    subject_id: e.subject_id,
                    media_id: e.media_id,
                });
            }
            match index.get(&e.subject_id) {
                Some(&i) => order[i].media.push(e),
                None => {
                    index.insert(e.subject_id.clone(), order.len());
                    order.push(Subject {
                        id: e.subject_id.clone(),
                        media: vec![e],
                    });
                }
            }
        }
        Self::from_subjects(order)
    }

    pub fn from_subjects(subjects: Vec<Subject>) -> Result<Self> {
        let dim = subjects
            .first()
            .and_then(|s| s.media.first())
            .map(Embedding::dim)
            .ok_or(Error::Empty("gallery"))?;
        let mut ids = HashSet::new();
        let mut flat = Vec::new();
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        let mut centers = Vec::with_capacity(subjects.len());
        for s in &subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate subject id {:?}", s.id)));
            }
            if s.media.is_empty() {
                return Err(Error::Empty("subject media").in_subject(&s.id));
            }
            offsets.push(flat.len() / dim);
            let mut center = vec![0.0; dim];
            for m in &s.media {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: m.dim(),
                    });
                }
                if m.subject_id != s.id {
                    return Err(Error::InvalidConfig(format!(
                        "medium {:?} tagged {:?} stored under subject {:?}",
                        m.media_id, m.subject_id, s.id
                    )));
                }
                flat.extend_from_slice(m.vector());
                for (c, x) in center.iter_mut().zip(m.vector()) {
                    *c += x;
                }
            }
            let count = s.media.len() as f64;
            center.iter_mut().for_each(|c| *c /= count);
            centers.push(center);
        }
        offsets.push(flat.len() / dim);
        Ok(Self {
            subjects,
            dim,
            flat,
            offsets,
            centers,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = &str> {
        self.subjects.iter().map(|s| s.id.as_str())
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_media(&self) -> usize {
        self.offsets[self.subjects.len()]
    }

    pub fn max_media_per_subject(&self) -> usize {
        self.subjects.iter().map(|s| s.media.len()).max().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit vector of the `i`-th medium in canonical order.
    pub fn medium(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    /// Canonical media index range of subject `s`.
    pub fn media_range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// Unnormalized mean of subject `s`'s unit media.
    pub fn center(&self, s: usize) -> &[f64] {
        &self.centers[s]
    }

    /// Copy of the gallery without the named subjects.
    pub fn without_subjects(&self, drop: &HashSet<&str>) -> Result<Self> {
        let kept = self
            .subjects
            .iter()
            .filter(|s| !drop.contains(s.id.as_str()))
            .cloned()
            .collect();
        Self::from_subjects(kept)
    }

    /// Single-subject gallery, for 1:1 comparisons.
    pub fn restricted_to(&self, subject_id: &str) -> Result<Self> {
        let s = self
            .subjects
            .iter()
            .find(|s| s.id == subject_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown subject {subject_id:?}")))?;
        Self::from_subjects(vec![s.clone()])
    }
}

/// Ground truth attached to a probe.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Truth {
    Mated(String),
    NonMated,
}

impl Truth {
    pub const NONMATED: &'static str = "NONMATED";

    pub fn parse(s: &str) -> Self {
        if s == Self::NONMATED {
            Truth::NonMated
        } else {
            Truth::Mated(s.to_owned())
        }
    }

    pub fn subject(&self) -> Option<&str> {
        match self {
            Truth::Mated(s) => Some(s),
            Truth::NonMated => None,
        }
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truth::Mated(s) => f.write_str(s),
            Truth::NonMated => f.write_str(Self::NONMATED),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub id: String,
    pub embedding: Embedding,
    pub truth: Truth,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeSet {
    probes: Vec<Probe>,
}

impl ProbeSet {
    pub fn new(probes: Vec<Probe>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut dim = None;
        for p in &probes {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::DuplicateProbeId(p.id.clone()));
            }
            match dim {
                None => dim = Some(p.embedding.dim()),
                Some(d) if d != p.embedding.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: p.embedding.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self { probes })
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Probe> {
        self.probes.iter()
    }

    /// Check that every mated truth names a subject of `gallery`.
    pub fn validate_against(&self, gallery: &Gallery) -> Result<()> {
        let known: HashSet<&str> = gallery.subject_ids().collect();
        for p in &self.probes {
            if let Truth::Mated(s) = &p.truth {
                if !known.contains(s.as_str()) {
                    return Err(Error::UnknownTruthSubject {
                        probe_id: p.id.clone(),
                        subject_id: s.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Relabel probes of the given subjects as non-mated.
    pub fn with_nonmated(&self, subjects: &HashSet<&str>) -> Self {
        let probes = self
            .probes
            .iter()
            .map(|p| {
                let mut p = p.clone();
                if p.truth.subject().is_some_and(|s| subjects.contains(s)) {
                    p.truth = Truth::NonMated;
                }
                p
            })
            .collect();
        Self { probes }
    }
}

impl<'a> IntoIterator for &'a ProbeSet {
    type Item = &'a Probe;
    type IntoIter = std::slice::Iter<'a, Probe>;

    fn into_iter(self) -> Self::IntoIter {
        self.probes.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(s: &str, m: &str, v: &[f64]) -> Embedding {
        Embedding::new(s, m, v).unwrap()
    }

    #[test]
    fn canonical_order_groups_by_first_appearance() {
        let g = Gallery::from_embeddings(vec![
            e("s1", "m1", &[1.0, 0.0]),
            e("s2", "m1", &[0.0, 1.0]),
            e("s1", "m2", &[1.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(g.subject_ids().collect::<Vec<_>>(), ["s1", "s2"]);
        assert_eq!(g.total_media(), 3);
        assert_eq!(g.media_range(0), 0..2);
        assert_eq!(g.media_range(1), 2..3);
        assert_eq!(g.medium(2), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_duplicates_and_mixed_dimensions() {
        let dup = Gallery::from_embeddings(vec![e("s", "m", &[1.0]), e("s", "m", &[2.0])]);
        assert!(matches!(dup, Err(Error::DuplicateMediaId { .. })));
        let mixed = Gallery::from_embeddings(vec![e("a", "m", &[1.0]), e("b", "m", &[1.0, 0.0])]);
        assert!(matches!(mixed, Err(Error::DimensionMismatch { .. })));
        assert!(matches!(Gallery::from_embeddings(vec![]), Err(Error::Empty(_))));
    }

    #[test]
    fn truth_parsing_and_validation() {
        assert_eq!(Truth::parse("NONMATED"), Truth::NonMated);
        assert_eq!(Truth::parse("s1"), Truth::Mated("s1".into()));
        let g = Gallery::from_embeddings(vec![e("s1", "m", &[1.0])]).unwrap();
        let probes = ProbeSet::new(vec![Probe {
            id: "p".into(),
            embedding: e("s9", "p", &[1.0]),
            truth: Truth::Mated("s9".into()),
        }])
        .unwrap();
        assert!(matches!(
            probes.validate_against(&g),
            Err(Error::UnknownTruthSubject { .. })
        ));
    }
}
