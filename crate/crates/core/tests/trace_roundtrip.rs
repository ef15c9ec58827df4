use ndarray::Array2;
use proptest::prelude::*;
use selfcross::attention::{HeadMaps, SelfAttentionField};
use selfcross::error::FormatError;
use selfcross::{read_trace, write_trace, AttentionRecord, CrossAttentionMap, Error, PatchGrid, TraceMetadata};

fn value() -> impl Strategy<Value = f32> {
    use prop::num::f32;
    f32::POSITIVE | f32::ZERO | f32::SUBNORMAL | f32::NORMAL
}

#[derive(Debug, Clone)]
struct Shape {
    h: usize,
    w: usize,
    tokens: usize,
    heads: Vec<usize>,
}

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..5, 1usize..5, 1usize..5, prop::collection::vec(1usize..4, 1..4)).prop_map(|(h, w, tokens, heads)| Shape {
        h,
        w,
        tokens,
        heads,
    })
}

fn trace() -> impl Strategy<Value = (TraceMetadata, Vec<AttentionRecord<f32>>)> {
    (shape(), "[a-z <|>]{0,24}", any::<u64>()).prop_flat_map(|(s, prompt, _)| {
        let p = s.h * s.w;
        let total: usize = s.heads.iter().map(|h| h * (s.tokens * p + p * p)).sum();
        (
            Just(s),
            Just(prompt),
            prop::collection::vec(value(), total),
            prop::collection::vec(any::<i32>(), 3),
            prop::collection::vec(any::<u32>(), 3),
        )
            .prop_map(|(s, prompt, values, timesteps, layers)| {
                let grid = PatchGrid::new(s.h, s.w).unwrap();
                let p = grid.patches();
                let tokens: Vec<String> = (0..s.tokens).map(|k| format!("tok{k}")).collect();
                let mut it = values.into_iter();
                let records: Vec<AttentionRecord<f32>> = s
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(r, &nh)| {
                        let heads = (0..nh)
                            .map(|_| HeadMaps {
                                cross: (0..s.tokens)
                                    .map(|k| CrossAttentionMap::new(k, grid, it.by_ref().take(p).collect()).unwrap())
                                    .collect(),
                                self_attn: SelfAttentionField::new(
                                    grid,
                                    Array2::from_shape_vec((p, p), it.by_ref().take(p * p).collect()).unwrap(),
                                )
                                .unwrap(),
                            })
                            .collect();
                        AttentionRecord::new(timesteps[r], layers[r], heads, tokens.clone()).unwrap()
                    })
                    .collect();
                let meta = TraceMetadata {
                    prompt,
                    token_strings: tokens,
                    subject_indices: vec![0],
                    model_id: "prop".into(),
                    grid,
                    layers: layers.clone(),
                    heads: s.heads[0] as u32,
                };
                (meta, records)
            })
    })
}

fn bits(records: &[AttentionRecord<f32>]) -> Vec<u32> {
    let mut out = Vec::new();
    for r in records {
        for h in &r.heads {
            for m in &h.cross {
                out.extend(m.values().iter().map(|v| v.to_bits()));
            }
            out.extend(h.self_attn.values().iter().map(|v| v.to_bits()));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn read_inverts_write((meta, records) in trace()) {
        let bytes = write_trace(&records, &meta).unwrap();
        let (meta2, back) = read_trace::<f32>(&bytes).unwrap();
        prop_assert_eq!(&meta2, &meta);
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.timestep, b.timestep);
            prop_assert_eq!(a.layer_id, b.layer_id);
            prop_assert_eq!(a.head_count(), b.head_count());
        }
        prop_assert_eq!(bits(&back), bits(&records));
        prop_assert_eq!(write_trace(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected((meta, records) in trace(), cut in any::<prop::sample::Index>()) {
        let bytes = write_trace(&records, &meta).unwrap();
        let n = cut.index(bytes.len());
        let err = read_trace::<f32>(&bytes[..n]).unwrap_err();
        let is_format = matches!(err, Error::Format(_));
        prop_assert!(is_format);
    }
}

#[test]
fn f64_records_round_trip_through_f32_storage() {
    let grid = PatchGrid::new(1, 2).unwrap();
    let record = AttentionRecord::<f64>::from_matrices(
        5,
        1,
        grid,
        ndarray::array![[0.1, 0.9]].view(),
        ndarray::array![[0.3, 0.7], [0.6, 0.4]],
        vec!["x".into()],
    )
    .unwrap();
    let meta = TraceMetadata {
        prompt: "x".into(),
        token_strings: vec!["x".into()],
        subject_indices: vec![0],
        model_id: "t".into(),
        grid,
        layers: vec![1],
        heads: 1,
    };
    let (_, back) = read_trace::<f64>(&write_trace(std::slice::from_ref(&record), &meta).unwrap()).unwrap();
    let expected = record.cross(0).unwrap().storage_rounded();
    assert_eq!(back[0].cross(0).unwrap().values(), expected.values());
    let mut trailing = write_trace(&[record], &meta).unwrap();
    trailing.push(0);
    assert!(matches!(
        read_trace::<f64>(&trailing),
        Err(Error::Format(FormatError::CountMismatch { .. }))
    ));
}
