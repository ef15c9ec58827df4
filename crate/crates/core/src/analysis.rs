//! Offline loss analysis of attention traces.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{average_heads_layers, AttentionRecord};
use crate::error::Result;
use crate::guidance::{evaluate_record, GuidanceLosses, SubjectSet, DEFAULT_LAMBDA};
use crate::trace::TraceMetadata;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub lambda: f64,
    /// Layers to average; all layers when `None`.
    pub layers: Option<BTreeSet<u32>>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            layers: None,
        }
    }
}

/// Per-subject map statistics of one analyzed row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub token: usize,
    /// Maximum of the normalized map.
    pub max: f64,
    pub otsu_threshold: f64,
    pub mask_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub index: usize,
    pub timestep: i32,
    pub layers: Vec<u32>,
    pub losses: Option<GuidanceLosses<f64>>,
    pub maps: Vec<MapSummary>,
    pub error: Option<String>,
}

/// Consecutive records sharing a timestep with distinct layers form one
/// evaluation; a changed timestep or a repeated layer starts the next.
pub fn group_records(records: &[AttentionRecord<f64>]) -> Vec<&[AttentionRecord<f64>]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..records.len() {
        let group = &records[start..i];
        let new_timestep = records[i].timestep != group[0].timestep;
        let repeated = group.iter().any(|r| r.layer_id == records[i].layer_id);
        if new_timestep || repeated {
            groups.push(group);
            start = i;
        }
    }
    if start < records.len() {
        groups.push(&records[start..]);
    }
    groups
}

/// Head/layer-averages every evaluation in a trace and recomputes all
/// guidance losses. Failures on one row are reported in that row.
pub fn analyze_trace(
    metadata: &TraceMetadata,
    records: &[AttentionRecord<f64>],
    subjects: &SubjectSet,
    options: &AnalysisOptions,
) -> Result<Vec<AnalysisRow>> {
    subjects.validate(metadata.token_strings.len())?;
    let mut rows = Vec::new();
    for group in group_records(records) {
        let layers: BTreeSet<u32> = group
            .iter()
            .map(|r| r.layer_id)
            .filter(|l| options.layers.as_ref().is_none_or(|f| f.contains(l)))
            .collect();
        if layers.is_empty() {
            continue;
        }
        let mut row = AnalysisRow {
            index: rows.len(),
            timestep: group[0].timestep,
            layers: layers.iter().copied().collect(),
            losses: None,
            maps: Vec::new(),
            error: None,
        };
        let outcome =
            average_heads_layers(group, &layers).and_then(|avg| evaluate_record(&avg, subjects, options.lambda));
        match outcome {
            Ok(eval) => {
                row.maps = eval
                    .subjects
                    .iter()
                    .map(|m| MapSummary {
                        token: m.cross.token_index(),
                        max: m.cross.max(),
                        otsu_threshold: m.mask.threshold(),
                        mask_size: m.mask.count(),
                    })
                    .collect();
                row.losses = Some(eval.losses);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PatchGrid;
    use ndarray::{array, Array2};

    fn rec(t: i32, layer: u32) -> AttentionRecord<f64> {
        AttentionRecord::from_matrices(
            t,
            layer,
            PatchGrid::new(1, 4).unwrap(),
            array![[0.25, 0.25, 0.25, 0.25], [0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]].view(),
            Array2::eye(4),
            vec!["<s>".into(), "cat".into(), "dog".into()],
        )
        .unwrap()
    }

    fn meta() -> TraceMetadata {
        TraceMetadata {
            prompt: "cat dog".into(),
            token_strings: vec!["<s>".into(), "cat".into(), "dog".into()],
            subject_indices: vec![1, 2],
            model_id: "test".into(),
            grid: PatchGrid::new(1, 4).unwrap(),
            layers: vec![0, 1],
            heads: 1,
        }
    }

    #[test]
    fn grouping_by_timestep_and_layer() {
        let records = vec![rec(10, 0), rec(10, 1), rec(10, 0), rec(9, 0), rec(9, 1)];
        let groups = group_records(&records);
        assert_eq!(groups.iter().map(|g| g.len()).collect::<Vec<_>>(), vec![2, 1, 2]);
    }

    #[test]
    fn disjoint_subjects_have_zero_self_cross() {
        let subjects = SubjectSet::new(vec![1, 2]).unwrap();
        let rows = analyze_trace(&meta(), &[rec(1, 0)], &subjects, &AnalysisOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        let losses = rows[0].losses.as_ref().unwrap();
        assert_eq!(losses.s_self_cross, 0.0);
        assert_eq!(rows[0].maps[0].mask_size, 2);
    }

    #[test]
    fn zero_lambda_total_equals_self_cross() {
        let subjects = SubjectSet::new(vec![0, 1]).unwrap();
        let opts = AnalysisOptions {
            lambda: 0.0,
            layers: None,
        };
        let rows = analyze_trace(&meta(), &[rec(1, 0), rec(0, 0)], &subjects, &opts).unwrap();
        for row in rows {
            let l = row.losses.unwrap();
            assert_eq!(l.total, l.s_self_cross);
        }
    }

    #[test]
    fn layer_filter_and_bad_subjects() {
        let subjects = SubjectSet::new(vec![1, 2]).unwrap();
        let opts = AnalysisOptions {
            lambda: 1.0,
            layers: Some(BTreeSet::from([1])),
        };
        let rows = analyze_trace(&meta(), &[rec(1, 0), rec(1, 1), rec(0, 0)], &subjects, &opts).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].layers, vec![1]);
        let bad = SubjectSet::new(vec![1, 3]).unwrap();
        assert!(analyze_trace(&meta(), &[rec(1, 0)], &bad, &opts).is_err());
    }
}
