//! Guidance losses computed from attention maps: the cross-attention
//! response score, pairwise self-cross overlaps, their mean over subject
//! pairs and the combined objective.

use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_self_attention, normalize_map, subject_mask, AggregatedSelfMap, AttentionRecord, CrossAttentionMap,
    SubjectMask, OTSU_BINS,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default weight of the cross-attention response score.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Ordered prompt-token positions of the guided subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectSet {
    indices: Vec<usize>,
}

impl SubjectSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("subject set is empty"));
        }
        for (n, i) in indices.iter().enumerate() {
            if indices[..n].contains(i) {
                return Err(Error::config(format!("duplicate subject index {i}")));
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks every index against a prompt's token count.
    pub fn validate(&self, token_count: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= token_count) {
            Some(i) => Err(Error::config(format!(
                "subject index {i} out of range for {token_count} tokens"
            ))),
            None => Ok(()),
        }
    }

    /// Unordered pairs `(a, b)` of positions into the set, `a < b`, in input
    /// order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.indices.len();
        (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)))
    }
}

/// Overlap between one pair of subjects, keyed by prompt-token positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap<T> {
    pub i: usize,
    pub j: usize,
    pub value: T,
}

/// All guidance losses of one denoiser evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLosses<T> {
    pub s_cross_attn: T,
    pub s_self_cross: T,
    pub pairwise: Vec<PairOverlap<T>>,
    pub total: T,
    pub lambda: T,
}

impl<T: Scalar> GuidanceLosses<T> {
    /// Overlap of the pair `(i, j)` in either order.
    pub fn pair(&self, i: usize, j: usize) -> Option<T> {
        self.pairwise
            .iter()
            .find(|p| (p.i == i && p.j == j) || (p.i == j && p.j == i))
            .map(|p| p.value)
    }

    pub fn exceeds(&self, tau_cross: T, tau_self_cross: T) -> bool {
        self.s_cross_attn > tau_cross || self.s_self_cross > tau_self_cross
    }
}

/// Worst subject's `1 - max(map)`.
pub fn cross_attn_response_score<T: Scalar>(cross_maps: &[CrossAttentionMap<T>], subjects: &SubjectSet) -> Result<T> {
    if subjects.is_empty() || cross_maps.is_empty() {
        return Err(Error::config("cross-attention response needs a subject"));
    }
    if cross_maps.len() != subjects.len() {
        return Err(Error::config(format!(
            "{} cross maps for {} subjects",
            cross_maps.len(),
            subjects.len()
        )));
    }
    let grid = cross_maps[0].grid();
    let mut worst = T::neg_infinity();
    for map in cross_maps {
        if map.grid() != grid {
            return Err(Error::Shape("subject maps disagree on grid".into()));
        }
        worst = worst.max(T::one() - map.max());
    }
    Ok(worst)
}

fn min_sum<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x.min(y)).sum()
}

/// `g(i, j)`: overlap of each subject's aggregated self map with the other
/// subject's cross map, summed over both directions.
pub fn pairwise_overlap<T: Scalar>(
    agg_i: &AggregatedSelfMap<T>,
    cross_i: &CrossAttentionMap<T>,
    agg_j: &AggregatedSelfMap<T>,
    cross_j: &CrossAttentionMap<T>,
) -> Result<T> {
    let grid = agg_i.grid();
    if [agg_j.grid(), cross_i.grid(), cross_j.grid()]
        .iter()
        .any(|g| *g != grid)
    {
        return Err(Error::Shape("pairwise overlap: grid mismatch".into()));
    }
    let forward = min_sum(agg_i.values(), cross_j.values());
    let backward = min_sum(cross_i.values(), agg_j.values());
    Ok(forward + backward)
}

/// Mean pairwise overlap over all unordered subject pairs.
pub fn self_cross_score<T: Scalar>(
    per_subject: &[(AggregatedSelfMap<T>, CrossAttentionMap<T>)],
    subjects: &SubjectSet,
) -> Result<(T, Vec<PairOverlap<T>>)> {
    let n = subjects.len();
    if n < 2 {
        return Err(Error::config(format!(
            "self-cross score needs at least 2 subjects, got {n}"
        )));
    }
    if per_subject.len() != n {
        return Err(Error::config(format!(
            "{} subject maps for {n} subjects",
            per_subject.len()
        )));
    }
    let mut pairwise = Vec::with_capacity(n * (n - 1) / 2);
    let mut sum = T::zero();
    for (a, b) in subjects.pairs() {
        let (agg_a, cross_a) = &per_subject[a];
        let (agg_b, cross_b) = &per_subject[b];
        let value = pairwise_overlap(agg_a, cross_a, agg_b, cross_b)?;
        sum = sum + value;
        pairwise.push(PairOverlap {
            i: subjects.indices()[a],
            j: subjects.indices()[b],
            value,
        });
    }
    Ok((sum / T::of(pairwise.len() as f64), pairwise))
}

/// `s_self_cross + lambda * s_cross_attn`.
pub fn total_loss<T: Scalar>(s_self_cross: T, s_cross_attn: T, lambda: T) -> GuidanceLosses<T> {
    GuidanceLosses {
        s_cross_attn,
        s_self_cross,
        pairwise: Vec::new(),
        total: s_self_cross + lambda * s_cross_attn,
        lambda,
    }
}

/// Overlap between two aggregated self maps. Ablation only; the guided
/// pipeline never uses it.
pub fn self_self_overlap<T: Scalar>(agg_i: &AggregatedSelfMap<T>, agg_j: &AggregatedSelfMap<T>) -> Result<T> {
    if agg_i.grid() != agg_j.grid() {
        return Err(Error::Shape("self-self overlap: grid mismatch".into()));
    }
    Ok(min_sum(agg_i.values(), agg_j.values()))
}

/// Intermediate maps of one subject for a single loss evaluation.
#[derive(Clone, Debug)]
pub struct SubjectMaps<T> {
    pub cross: CrossAttentionMap<T>,
    pub mask: SubjectMask<T>,
    pub aggregated: AggregatedSelfMap<T>,
}

/// Losses plus the per-subject maps they were computed from.
#[derive(Clone, Debug)]
pub struct LossEvaluation<T> {
    pub losses: GuidanceLosses<T>,
    pub subjects: Vec<SubjectMaps<T>>,
}

/// Runs the full loss pipeline on a single-head record: normalize each
/// subject map, mask it with Otsu, aggregate self-attention, then score.
///
/// Mask membership is decided on the map rounded to trace storage precision,
/// so a trace written from this record reproduces the same masks offline.
/// With a single subject the self-cross term is zero.
pub fn evaluate_record<T: Scalar>(
    record: &AttentionRecord<T>,
    subjects: &SubjectSet,
    lambda: T,
) -> Result<LossEvaluation<T>> {
    subjects.validate(record.token_count())?;
    if record.head_count() != 1 {
        return Err(Error::config("loss evaluation expects a head-averaged record"));
    }
    let mut maps = Vec::with_capacity(subjects.len());
    for &k in subjects.indices() {
        let raw = record
            .cross(k)
            .ok_or_else(|| Error::config(format!("no cross map for token {k}")))?;
        let cross = normalize_map(raw)?;
        let mask = subject_mask(&normalize_map(&raw.storage_rounded())?, OTSU_BINS)?;
        let aggregated = aggregate_self_attention(&cross, record.self_field(), &mask)?;
        maps.push(SubjectMaps {
            cross,
            mask,
            aggregated,
        });
    }
    let crosses: Vec<_> = maps.iter().map(|m| m.cross.clone()).collect();
    let s_cross_attn = cross_attn_response_score(&crosses, subjects)?;
    let (s_self_cross, pairwise) = if subjects.len() >= 2 {
        let pairs: Vec<_> = maps.iter().map(|m| (m.aggregated.clone(), m.cross.clone())).collect();
        self_cross_score(&pairs, subjects)?
    } else {
        (T::zero(), Vec::new())
    };
    let mut losses = total_loss(s_self_cross, s_cross_attn, lambda);
    losses.pairwise = pairwise;
    Ok(LossEvaluation { losses, subjects: maps })
}
