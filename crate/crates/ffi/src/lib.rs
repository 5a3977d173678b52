//! C interface to `openset-score`.
//!
//! Every fallible function returns an [`OsStatus`]. On failure the message is
//! kept per thread and can be read with [`os_last_error`]. Galleries are
//! opaque [`OsGallery`] handles released with [`os_gallery_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use openset_score::embedding::{Embedding, Gallery};
use openset_score::error::Error;
use openset_score::gallery::{cluster_gallery, load_gallery, ClusterConfig, ClusterCount};
use openset_score::metrics::{self, FnirRule, OperatingPoint};
use openset_score::scoring::{self, FusionMode, ScoreOptions};
use openset_score::theory::{self, Condition, ScoreStats, TheoremVerdict};
use openset_score::{normal, vector};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ZeroNorm = 3,
    NonFinite = 4,
    DimensionMismatch = 5,
    KTooLarge = 6,
    ZeroK = 7,
    Parse = 8,
    Io = 9,
    Domain = 10,
    DegenerateSample = 11,
    ZeroSigma = 12,
    InvalidConfig = 13,
    Empty = 14,
    BufferTooSmall = 15,
    Panic = 16,
    Other = 17,
}

impl From<&Error> for OsStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::ZeroNorm { .. } => OsStatus::ZeroNorm,
            Error::NonFinite { .. } => OsStatus::NonFinite,
            Error::DimensionMismatch { .. } => OsStatus::DimensionMismatch,
            Error::KTooLarge { .. } => OsStatus::KTooLarge,
            Error::ZeroK => OsStatus::ZeroK,
            Error::Parse { .. } | Error::Json(_) => OsStatus::Parse,
            Error::Io(_) => OsStatus::Io,
            Error::Domain(_) => OsStatus::Domain,
            Error::DegenerateSample(_) | Error::DegenerateVariance(_) => OsStatus::DegenerateSample,
            Error::ZeroSigma(_) => OsStatus::ZeroSigma,
            Error::InvalidConfig(_) | Error::InvalidGrid(_) | Error::InsufficientSubjects { .. } => {
                OsStatus::InvalidConfig
            }
            Error::Empty(_) => OsStatus::Empty,
            _ => OsStatus::Other,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(OsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OsStatus::from(&e), e.to_string())
    }
}

fn fail(status: OsStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            OsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            OsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(OsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(OsStatus::NullPointer, format!("{what} is null")))
}

/// The message of the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn os_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opaque gallery handle.
pub struct OsGallery {
    inner: Gallery,
}

fn boxed(gallery: Gallery) -> *mut OsGallery {
    Box::into_raw(Box::new(OsGallery { inner: gallery }))
}

unsafe fn gallery_ref<'a>(g: *const OsGallery) -> Result<&'a Gallery, Failure> {
    g.as_ref()
        .map(|g| &g.inner)
        .ok_or_else(|| fail(OsStatus::NullPointer, "gallery handle is null"))
}

/// Load a gallery CSV (`subject_id,media_id,f0,...`).
#[no_mangle]
pub unsafe extern "C" fn os_gallery_load(path: *const c_char, out_gallery: *mut *mut OsGallery) -> OsStatus {
    guard(|| {
        let dst = out(out_gallery, "out_gallery")?;
        if path.is_null() {
            return Err(fail(OsStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(OsStatus::InvalidArgument, "path is not UTF-8"))?;
        *dst = boxed(load_gallery(Path::new(path))?);
        Ok(())
    })
}

/// Build a gallery from `num_media` row-major vectors of length `dim`.
/// `subject_of[i]` names the subject of row `i`; subjects are called by their
/// number and ordered by first appearance.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_from_arrays(
    features: *const f64,
    num_media: usize,
    dim: usize,
    subject_of: *const u32,
    out_gallery: *mut *mut OsGallery,
) -> OsStatus {
    guard(|| {
        let dst = out(out_gallery, "out_gallery")?;
        if dim == 0 {
            return Err(fail(OsStatus::InvalidArgument, "dim must be positive"));
        }
        let total = num_media
            .checked_mul(dim)
            .ok_or_else(|| fail(OsStatus::InvalidArgument, "num_media * dim overflows"))?;
        let features = slice(features, total, "features")?;
        let labels = slice(subject_of, num_media, "subject_of")?;
        let mut counts = std::collections::HashMap::new();
        let embeddings = labels
            .iter()
            .zip(features.chunks_exact(dim))
            .map(|(&s, row)| {
                let n = counts.entry(s).or_insert(0usize);
                *n += 1;
                Embedding::new(s.to_string(), format!("m{}", *n - 1), row)
            })
            .collect::<Result<Vec<_>, _>>()?;
        *dst = boxed(Gallery::from_embeddings(embeddings)?);
        Ok(())
    })
}

/// Release a gallery. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_free(gallery: *mut OsGallery) {
    if !gallery.is_null() {
        drop(Box::from_raw(gallery));
    }
}

/// Subject count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_num_subjects(gallery: *const OsGallery) -> usize {
    gallery.as_ref().map_or(0, |g| g.inner.num_subjects())
}

/// Total media count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_total_media(gallery: *const OsGallery) -> usize {
    gallery.as_ref().map_or(0, |g| g.inner.total_media())
}

/// Feature dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_dim(gallery: *const OsGallery) -> usize {
    gallery.as_ref().map_or(0, |g| g.inner.dim())
}

/// k-means compress every subject to at most `clusters` prototypes
/// (0 keeps every medium). The input handle is left untouched.
#[no_mangle]
pub unsafe extern "C" fn os_gallery_cluster(
    gallery: *const OsGallery,
    clusters: usize,
    max_iterations: usize,
    convergence_tol: f64,
    seed: u64,
    out_gallery: *mut *mut OsGallery,
) -> OsStatus {
    guard(|| {
        let g = gallery_ref(gallery)?;
        let dst = out(out_gallery, "out_gallery")?;
        if max_iterations == 0 || !(convergence_tol >= 0.0) {
            return Err(fail(
                OsStatus::InvalidConfig,
                "max_iterations must be positive and convergence_tol non-negative",
            ));
        }
        let config = ClusterConfig {
            clusters_per_subject: if clusters == 0 {
                ClusterCount::Unlimited
            } else {
                ClusterCount::Finite(clusters)
            },
            max_iterations,
            convergence_tol,
            seed,
        };
        *dst = boxed(cluster_gallery(g, &config)?.into_gallery());
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OsFusionKind {
    Local = 0,
    NaiveMean = 1,
    None = 2,
    MaxPool = 3,
    MinPool = 4,
    MeanPool = 5,
    AddConst = 6,
    DoubleMax = 7,
    AvgTopK = 8,
}

/// Fusion rule. `k` is read by the k-NN kinds and `constant` by `AddConst`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OsFusion {
    pub kind: OsFusionKind,
    pub k: usize,
    pub constant: f64,
    pub clamp_k: bool,
}

impl OsFusion {
    fn mode(&self) -> FusionMode {
        match self.kind {
            OsFusionKind::Local => FusionMode::LocalScore { k: self.k },
            OsFusionKind::NaiveMean => FusionMode::NaiveMean { k: self.k },
            OsFusionKind::None => FusionMode::None,
            OsFusionKind::MaxPool => FusionMode::MaxPool,
            OsFusionKind::MinPool => FusionMode::MinPool,
            OsFusionKind::MeanPool => FusionMode::MeanPool,
            OsFusionKind::AddConst => FusionMode::AddConst { c: self.constant },
            OsFusionKind::DoubleMax => FusionMode::DoubleMax,
            OsFusionKind::AvgTopK => FusionMode::AvgTopK { k: self.k },
        }
    }
}

/// Fused per-subject scores of one probe. `out_scores` must hold
/// `os_gallery_num_subjects` values. `out_increment` (may be null) receives
/// the amount added to the top subject, or NaN when nothing was added.
#[no_mangle]
pub unsafe extern "C" fn os_score_probe(
    gallery: *const OsGallery,
    probe: *const f64,
    dim: usize,
    fusion: OsFusion,
    out_scores: *mut f64,
    out_len: usize,
    out_increment: *mut f64,
) -> OsStatus {
    guard(|| {
        let g = gallery_ref(gallery)?;
        let probe = vector::normalize(slice(probe, dim, "probe")?)?;
        if out_len < g.num_subjects() {
            return Err(fail(
                OsStatus::BufferTooSmall,
                format!("out_len {out_len} < {} subjects", g.num_subjects()),
            ));
        }
        let options = ScoreOptions {
            clamp_k: fusion.clamp_k,
            ..ScoreOptions::default()
        };
        let (_, row) = scoring::score_row(&probe, g, fusion.mode(), &options)?;
        if out_scores.is_null() {
            return Err(fail(OsStatus::NullPointer, "out_scores is null"));
        }
        std::slice::from_raw_parts_mut(out_scores, row.values.len()).copy_from_slice(&row.values);
        if let Some(inc) = out_increment.as_mut() {
            *inc = row.increment.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// The k-th largest of `row` (k = 1 is the maximum).
#[no_mangle]
pub unsafe extern "C" fn os_knn_score(row: *const f64, len: usize, k: usize, clamp_k: bool, out_value: *mut f64) -> OsStatus {
    guard(|| {
        let row = slice(row, len, "row")?;
        let dst = out(out_value, "out_value")?;
        *dst = scoring::knn_score(row, k, clamp_k)?;
        Ok(())
    })
}

/// Add `knn` to every entry equal to the row maximum, writing `len` values.
#[no_mangle]
pub unsafe extern "C" fn os_local_score(row: *const f64, len: usize, knn: f64, out_row: *mut f64) -> OsStatus {
    guard(|| {
        let row = slice(row, len, "row")?;
        if out_row.is_null() {
            return Err(fail(OsStatus::NullPointer, "out_row is null"));
        }
        let fused = scoring::local_score(row, knn)?;
        std::slice::from_raw_parts_mut(out_row, len).copy_from_slice(&fused.values);
        Ok(())
    })
}

/// Verification score of a probe against one subject (by index): mean
/// cosine plus the k-th largest cosine within that subject.
#[no_mangle]
pub unsafe extern "C" fn os_one_to_one(
    gallery: *const OsGallery,
    subject: usize,
    probe: *const f64,
    dim: usize,
    k: usize,
    clamp_k: bool,
    out_value: *mut f64,
) -> OsStatus {
    guard(|| {
        let g = gallery_ref(gallery)?;
        let dst = out(out_value, "out_value")?;
        let s = g.subjects().get(subject).ok_or_else(|| {
            fail(
                OsStatus::InvalidArgument,
                format!("subject {subject} out of range ({} subjects)", g.num_subjects()),
            )
        })?;
        let probe = Embedding::new("probe", "probe", slice(probe, dim, "probe")?)?;
        if probe.dim() != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: g.dim(),
                found: probe.dim(),
            }
            .into());
        }
        *dst = scoring::one_to_one_score(&probe, &s.media, k, clamp_k)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OsScoreStats {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub mu3: f64,
    pub sigma3: f64,
    pub mu4: f64,
    pub sigma4: f64,
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub m: u64,
    pub r1: u64,
    pub r2: u64,
}

impl From<OsScoreStats> for ScoreStats {
    fn from(s: OsScoreStats) -> Self {
        ScoreStats {
            mu1: s.mu1,
            sigma1: s.sigma1,
            mu2: s.mu2,
            sigma2: s.sigma2,
            mu3: s.mu3,
            sigma3: s.sigma3,
            mu4: s.mu4,
            sigma4: s.sigma4,
            n1: s.n1,
            n2: s.n2,
            n3: s.n3,
            m: s.m,
            r1: s.r1,
            r2: s.r2,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OsCondition {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub improves: bool,
    pub at_boundary: bool,
}

impl From<Condition> for OsCondition {
    fn from(c: Condition) -> Self {
        OsCondition {
            lhs: c.lhs,
            rhs: c.rhs,
            gap: c.gap,
            improves: c.improves,
            at_boundary: c.at_boundary,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OsVerdict {
    pub open_set: OsCondition,
    pub verification: OsCondition,
    pub delta: f64,
    pub verification_quantile: f64,
    pub expected_fnir_without: f64,
    pub expected_fnir_with: f64,
    pub open_set_threshold_without: f64,
    pub open_set_threshold_with: f64,
    pub verification_threshold_without: f64,
    pub verification_threshold_with: f64,
    pub mu3_star: f64,
}

impl From<TheoremVerdict> for OsVerdict {
    fn from(v: TheoremVerdict) -> Self {
        OsVerdict {
            open_set: v.open_set.into(),
            verification: v.verification.into(),
            delta: v.delta,
            verification_quantile: v.verification_quantile,
            expected_fnir_without: v.expected_fnir_without,
            expected_fnir_with: v.expected_fnir_with,
            open_set_threshold_without: v.open_set_threshold_without,
            open_set_threshold_with: v.open_set_threshold_with,
            verification_threshold_without: v.verification_threshold_without,
            verification_threshold_with: v.verification_threshold_with,
            mu3_star: v.mu3_star,
        }
    }
}

/// Evaluate both improvement conditions for `stats`.
#[no_mangle]
pub unsafe extern "C" fn os_predict(stats: *const OsScoreStats, out_verdict: *mut OsVerdict) -> OsStatus {
    guard(|| {
        let stats = *stats
            .as_ref()
            .ok_or_else(|| fail(OsStatus::NullPointer, "stats is null"))?;
        let dst = out(out_verdict, "out_verdict")?;
        *dst = theory::predict(&stats.into())?.into();
        Ok(())
    })
}

/// Φ⁻¹(p).
#[no_mangle]
pub unsafe extern "C" fn os_normal_quantile(p: f64, out_value: *mut f64) -> OsStatus {
    guard(|| {
        *out(out_value, "out_value")? = normal::quantile(p)?;
        Ok(())
    })
}

/// Φ(x).
#[no_mangle]
pub extern "C" fn os_normal_cdf(x: f64) -> f64 {
    normal::cdf(x)
}

/// `−ln(−ln(1 − r1/n2))`.
#[no_mangle]
pub unsafe extern "C" fn os_gumbel_delta(r1: u64, n2: u64, out_value: *mut f64) -> OsStatus {
    guard(|| {
        *out(out_value, "out_value")? = theory::gumbel_delta(r1, n2)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OsOperatingPoint {
    pub value: f64,
    pub threshold: f64,
    pub achieved_rate: f64,
    pub target_unachievable: bool,
}

impl From<OperatingPoint> for OsOperatingPoint {
    fn from(p: OperatingPoint) -> Self {
        OsOperatingPoint {
            value: p.value,
            threshold: p.threshold,
            achieved_rate: p.achieved_rate,
            target_unachievable: p.target_unachievable,
        }
    }
}

/// FNIR at the threshold giving FPIR ≤ `target`. `rank1_correct` may be null
/// when `threshold_only` is set.
#[no_mangle]
pub unsafe extern "C" fn os_fnir_at_fpir(
    genuine: *const f64,
    num_genuine: usize,
    nonmated_maxima: *const f64,
    num_nonmated: usize,
    rank1_correct: *const bool,
    target: f64,
    threshold_only: bool,
    out_point: *mut OsOperatingPoint,
) -> OsStatus {
    guard(|| {
        let genuine = slice(genuine, num_genuine, "genuine")?;
        let maxima = slice(nonmated_maxima, num_nonmated, "nonmated_maxima")?;
        let rank1 = if threshold_only {
            &[][..]
        } else {
            slice(rank1_correct, num_genuine, "rank1_correct")?
        };
        let rule = if threshold_only {
            FnirRule::ThresholdOnly
        } else {
            FnirRule::Standard
        };
        let dst = out(out_point, "out_point")?;
        *dst = metrics::fnir_at_fpir(genuine, maxima, rank1, target, rule)?.into();
        Ok(())
    })
}

/// TAR at the threshold giving FAR ≤ `target`.
#[no_mangle]
pub unsafe extern "C" fn os_tar_at_far(
    genuine: *const f64,
    num_genuine: usize,
    imposter: *const f64,
    num_imposter: usize,
    target: f64,
    out_point: *mut OsOperatingPoint,
) -> OsStatus {
    guard(|| {
        let genuine = slice(genuine, num_genuine, "genuine")?;
        let imposter = slice(imposter, num_imposter, "imposter")?;
        let dst = out(out_point, "out_point")?;
        *dst = metrics::tar_at_far(genuine, imposter, target)?.into();
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn os_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
