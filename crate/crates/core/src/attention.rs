//! Attention maps: computation, head/layer averaging, normalization, Otsu
//! masking, self-attention aggregation and dual-encoder merging.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, max_value, min_value, Scalar};

/// Default histogram resolution for Otsu thresholding.
pub const OTSU_BINS: usize = 256;

/// Maps whose value range is below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-8;

/// Spatial resolution of an attention map, in patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "patch grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Total number of patches.
    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    fn ensure_same(&self, other: &PatchGrid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::shape(format!(
                "{what}: grid {}x{} does not match {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn check_values<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{what}: non-finite value at {i}")));
        }
        if *v < T::zero() {
            return Err(Error::Numeric(format!("{what}: negative value {v} at {i}")));
        }
    }
    Ok(())
}

/// Spatial attention of one prompt token over the patch grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap<T> {
    token_index: usize,
    grid: PatchGrid,
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> CrossAttentionMap<T> {
    pub fn new(token_index: usize, grid: PatchGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.patches() {
            return Err(Error::shape(format!(
                "cross map for token {token_index}: {} values for {} patches",
                values.len(),
                grid.patches()
            )));
        }
        check_values(&values, "cross map")?;
        Ok(Self {
            token_index,
            grid,
            values,
            normalized: false,
        })
    }

    pub fn token_index(&self) -> usize {
        self.token_index
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn max(&self) -> T {
        max_value(&self.values).unwrap_or_else(T::zero)
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Copy with every value rounded through `f32`, as stored in a trace.
    pub fn storage_rounded(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| v.storage_rounded()).collect(),
            ..self.clone()
        }
    }
}

/// Self-attention of every patch: row `p` is the map of patch `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionField<T> {
    grid: PatchGrid,
    values: Array2<T>,
}

impl<T: Scalar> SelfAttentionField<T> {
    pub fn new(grid: PatchGrid, values: Array2<T>) -> Result<Self> {
        let p = grid.patches();
        if values.dim() != (p, p) {
            return Err(Error::shape(format!(
                "self-attention field must be {p}x{p}, got {:?}",
                values.dim()
            )));
        }
        for v in values.iter() {
            if !v.is_finite() || *v < T::zero() {
                return Err(Error::Numeric(format!("self-attention field has invalid entry {v}")));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn row(&self, patch: usize) -> ndarray::ArrayView1<'_, T> {
        self.values.row(patch)
    }

    /// Largest |row sum - 1| over all rows.
    pub fn row_sum_deviation(&self) -> T {
        self.values
            .rows()
            .into_iter()
            .map(|r| (r.sum() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

/// Patches selected for one subject by thresholding its cross-attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMask<T> {
    grid: PatchGrid,
    selected: Vec<bool>,
    threshold: T,
}

impl<T: Scalar> SubjectMask<T> {
    pub fn new(grid: PatchGrid, selected: Vec<bool>, threshold: T) -> Result<Self> {
        if selected.len() != grid.patches() {
            return Err(Error::shape("mask length does not match grid"));
        }
        if !selected.iter().any(|&s| s) {
            return Err(Error::DegenerateMap("mask selects no patch".into()));
        }
        Ok(Self {
            grid,
            selected,
            threshold,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().enumerate().filter_map(|(i, &s)| s.then_some(i))
    }
}

/// Cross-attention weighted mean of the self-attention rows of a subject's
/// masked patches.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedSelfMap<T> {
    subject_index: usize,
    grid: PatchGrid,
    values: Vec<T>,
}

impl<T: Scalar> AggregatedSelfMap<T> {
    pub fn new(subject_index: usize, grid: PatchGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.patches() {
            return Err(Error::shape("aggregated map length does not match grid"));
        }
        check_values(&values, "aggregated self map")?;
        Ok(Self {
            subject_index,
            grid,
            values,
        })
    }

    pub fn subject_index(&self) -> usize {
        self.subject_index
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Attention maps of a single head: one cross map per prompt token plus the
/// self-attention field.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T> {
    pub cross: Vec<CrossAttentionMap<T>>,
    pub self_attn: SelfAttentionField<T>,
}

/// Attention captured at one (timestep, layer).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub timestep: i32,
    pub layer_id: u32,
    pub heads: Vec<HeadMaps<T>>,
    pub token_strings: Vec<String>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Validates that all heads share one grid and token count.
    pub fn new(timestep: i32, layer_id: u32, heads: Vec<HeadMaps<T>>, token_strings: Vec<String>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::shape("attention record needs at least one head"))?;
        let grid = first.self_attn.grid();
        for (h, head) in heads.iter().enumerate() {
            head.self_attn.grid().ensure_same(&grid, "self field")?;
            if head.cross.len() != token_strings.len() {
                return Err(Error::shape(format!(
                    "head {h}: {} cross maps for {} tokens",
                    head.cross.len(),
                    token_strings.len()
                )));
            }
            for (k, map) in head.cross.iter().enumerate() {
                map.grid().ensure_same(&grid, "cross map")?;
                if map.token_index() != k {
                    return Err(Error::shape(format!(
                        "head {h}: cross map {k} carries token index {}",
                        map.token_index()
                    )));
                }
            }
        }
        Ok(Self {
            timestep,
            layer_id,
            heads,
            token_strings,
        })
    }

    /// Single-head record from a token-by-patch cross matrix and a patch-by-patch
    /// self matrix.
    pub fn from_matrices(
        timestep: i32,
        layer_id: u32,
        grid: PatchGrid,
        cross: ArrayView2<'_, T>,
        self_attn: Array2<T>,
        token_strings: Vec<String>,
    ) -> Result<Self> {
        let maps = cross
            .rows()
            .into_iter()
            .enumerate()
            .map(|(k, row)| CrossAttentionMap::new(k, grid, row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let head = HeadMaps {
            cross: maps,
            self_attn: SelfAttentionField::new(grid, self_attn)?,
        };
        Self::new(timestep, layer_id, vec![head], token_strings)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_strings.len()
    }

    pub fn grid(&self) -> PatchGrid {
        self.heads[0].self_attn.grid()
    }

    /// Cross map of `token` in the first head.
    pub fn cross(&self, token: usize) -> Option<&CrossAttentionMap<T>> {
        self.heads[0].cross.get(token)
    }

    pub fn self_field(&self) -> &SelfAttentionField<T> {
        &self.heads[0].self_attn
    }
}

/// Which axis of the `queries x keys` logit matrix the softmax normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxAxis {
    /// Each query row sums to one.
    PerQuery,
    /// Each key column sums to one. With text queries and patch keys this is
    /// the usual per-patch softmax over tokens.
    #[default]
    PerKey,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &mut Array2<T>) {
    for mut row in logits.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns<T: Scalar>(logits: &mut Array2<T>) {
    for mut col in logits.columns_mut() {
        let m = col.iter().copied().fold(T::neg_infinity(), T::max);
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
}

/// `Softmax(Q K^T / sqrt(d))` along `axis`, shape `[queries, keys]`.
pub fn compute_attention<T: Scalar>(
    queries: ArrayView2<'_, T>,
    keys: ArrayView2<'_, T>,
    axis: SoftmaxAxis,
) -> Result<Array2<T>> {
    let d = queries.ncols();
    if d == 0 {
        return Err(Error::shape("attention width must be at least 1"));
    }
    if keys.ncols() != d {
        return Err(Error::shape(format!(
            "query width {d} does not match key width {}",
            keys.ncols()
        )));
    }
    if queries.iter().chain(keys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    let scale = T::of(d as f64).sqrt().recip();
    let mut logits = queries.dot(&keys.t()) * scale;
    match axis {
        SoftmaxAxis::PerQuery => softmax_rows(&mut logits),
        SoftmaxAxis::PerKey => softmax_columns(&mut logits),
    }
    Ok(logits)
}

/// Mean over heads, then over the records whose layer is in `layers`.
pub fn average_heads_layers<T: Scalar>(
    records: &[AttentionRecord<T>],
    layers: &BTreeSet<u32>,
) -> Result<AttentionRecord<T>> {
    let selected: Vec<&AttentionRecord<T>> = records.iter().filter(|r| layers.contains(&r.layer_id)).collect();
    let first = *selected
        .first()
        .ok_or_else(|| Error::config("layer filter selects no record"))?;
    let grid = first.grid();
    let tokens = first.token_count();
    let p = grid.patches();
    for r in &selected {
        r.grid().ensure_same(&grid, "averaged record")?;
        if r.token_count() != tokens {
            return Err(Error::shape("records disagree on token count"));
        }
    }

    let mut cross_acc = Array2::<T>::zeros((tokens, p));
    let mut self_acc = Array2::<T>::zeros((p, p));
    for r in &selected {
        let heads = T::of(r.head_count() as f64);
        let mut cross_mean = Array2::<T>::zeros((tokens, p));
        let mut self_mean = Array2::<T>::zeros((p, p));
        for head in &r.heads {
            for (k, map) in head.cross.iter().enumerate() {
                for (dst, &v) in cross_mean.row_mut(k).iter_mut().zip(map.values()) {
                    *dst = *dst + v;
                }
            }
            self_mean = self_mean + head.self_attn.values();
        }
        cross_acc = cross_acc + cross_mean / heads;
        self_acc = self_acc + self_mean / heads;
    }
    let n = T::of(selected.len() as f64);
    AttentionRecord::from_matrices(
        first.timestep,
        first.layer_id,
        grid,
        (cross_acc / n).view(),
        self_acc / n,
        first.token_strings.clone(),
    )
}

/// Rescale a map so it sums to one.
pub fn normalize_map<T: Scalar>(map: &CrossAttentionMap<T>) -> Result<CrossAttentionMap<T>> {
    let sum = map.sum();
    if !(sum > T::zero()) || !sum.is_finite() {
        return Err(Error::DegenerateMap(format!(
            "cannot normalize map of token {} with sum {sum}",
            map.token_index
        )));
    }
    Ok(CrossAttentionMap {
        token_index: map.token_index,
        grid: map.grid,
        values: map.values.iter().map(|&v| v / sum).collect(),
        normalized: true,
    })
}

/// Otsu threshold over a uniform histogram of `bins` bins spanning
/// `[min, max]` of the map.
///
/// Bin `t` covers `(e_{t-1}, e_t]` where `e_t = min + (t + 1) * range / bins`.
/// The chosen `t` maximizes between-class variance of bin levels, compared
/// exactly in integer arithmetic, lowest `t` on ties. Patches with values
/// strictly above `e_t` are selected and `e_t` is reported as the threshold.
pub fn otsu_threshold<T: Scalar>(map: &CrossAttentionMap<T>, bins: usize) -> Result<SubjectMask<T>> {
    if bins < 2 {
        return Err(Error::config(format!("otsu needs at least 2 bins, got {bins}")));
    }
    let values = map.values();
    let lo = min_value(values).ok_or_else(|| Error::DegenerateMap("empty map".into()))?;
    let hi = max_value(values).unwrap_or(lo);
    let range = hi - lo;
    if range.as_f64() < DEGENERATE_RANGE {
        return Err(Error::DegenerateMap(format!(
            "map of token {} is constant (range {range})",
            map.token_index
        )));
    }

    let edges = bin_edges(lo, range, bins);
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[edges.partition_point(|&e| e < v)] += 1;
    }

    let total_n: u64 = counts.iter().sum();
    let total_s: u64 = counts.iter().enumerate().map(|(l, &c)| l as u64 * c).sum();
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    // (numerator, denominator) of the best between-class variance, up to a
    // common positive factor.
    let mut best: Option<(usize, u128, u128)> = None;
    for (t, &c) in counts.iter().enumerate().take(bins - 1) {
        n0 += c;
        s0 += t as u64 * c;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let num = diff
            .checked_mul(diff)
            .ok_or_else(|| Error::Numeric("otsu histogram too large".into()))?;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bnum, bden)) => {
                let lhs = num.checked_mul(bden);
                let rhs = bnum.checked_mul(den);
                match (lhs, rhs) {
                    (Some(l), Some(r)) => l > r,
                    _ => return Err(Error::Numeric("otsu histogram too large".into())),
                }
            }
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (t, _, _) = best.ok_or_else(|| Error::DegenerateMap("no admissible split".into()))?;
    let threshold = edges[t];
    let selected = values.iter().map(|&v| v > threshold).collect();
    SubjectMask::new(map.grid, selected, threshold)
}

/// Upper edges of the first `bins - 1` histogram bins.
pub fn bin_edges<T: Scalar>(lo: T, range: T, bins: usize) -> Vec<T> {
    let b = T::of(bins as f64);
    (1..bins).map(|t| lo + range * T::of(t as f64) / b).collect()
}

/// Otsu mask with the constant-map fallback: a degenerate map selects its
/// argmax patch alone, with the threshold set to the map's maximum.
pub fn subject_mask<T: Scalar>(map: &CrossAttentionMap<T>, bins: usize) -> Result<SubjectMask<T>> {
    match otsu_threshold(map, bins) {
        Ok(mask) => Ok(mask),
        Err(Error::DegenerateMap(_)) => {
            let best = argmax(map.values()).ok_or_else(|| Error::DegenerateMap("empty map".into()))?;
            let mut selected = vec![false; map.values.len()];
            selected[best] = true;
            SubjectMask::new(map.grid, selected, map.values[best])
        }
        Err(e) => Err(e),
    }
}

/// Weighted mean of self-attention rows over the masked patches, weights
/// taken from the subject's cross map.
pub fn aggregate_self_attention<T: Scalar>(
    cross: &CrossAttentionMap<T>,
    selfatt: &SelfAttentionField<T>,
    mask: &SubjectMask<T>,
) -> Result<AggregatedSelfMap<T>> {
    cross.grid.ensure_same(&selfatt.grid, "aggregation")?;
    cross.grid.ensure_same(&mask.grid, "aggregation mask")?;
    let degenerate = |reason: &str| Error::DegenerateMask {
        subject: cross.token_index,
        reason: reason.to_string(),
    };
    if mask.count() == 0 {
        return Err(degenerate("empty mask"));
    }
    let weight: T = mask.indices().map(|m| cross.values[m]).sum();
    if !(weight > T::zero()) {
        return Err(degenerate("masked cross-attention weight is zero"));
    }
    let mut acc = vec![T::zero(); cross.grid.patches()];
    for m in mask.indices() {
        let w = cross.values[m] / weight;
        for (a, &s) in acc.iter_mut().zip(selfatt.row(m).iter()) {
            *a = *a + w * s;
        }
    }
    AggregatedSelfMap::new(cross.token_index, cross.grid, acc)
}

/// Elementwise maximum of the maps from two text encoders.
pub fn merge_dual_encoder<T: Scalar>(
    map_a: &CrossAttentionMap<T>,
    map_b: &CrossAttentionMap<T>,
) -> Result<CrossAttentionMap<T>> {
    map_a.grid.ensure_same(&map_b.grid, "dual-encoder merge")?;
    if map_a.token_index != map_b.token_index {
        return Err(Error::shape(format!(
            "dual-encoder merge of tokens {} and {}",
            map_a.token_index, map_b.token_index
        )));
    }
    let values = map_a
        .values
        .iter()
        .zip(&map_b.values)
        .map(|(&a, &b)| a.max(b))
        .collect();
    CrossAttentionMap::new(map_a.token_index, map_a.grid, values)
}
