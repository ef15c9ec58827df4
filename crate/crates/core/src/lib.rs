//! Self-cross attention guidance for text-to-image diffusion sampling.
//!
//! The crate computes Otsu-masked aggregated self-attention maps, penalizes
//! their overlap with other subjects' cross-attention maps, and drives a
//! threshold-gated latent refinement sampler. A toy differentiable denoiser
//! makes the whole loop runnable and gradient-checkable on a laptop, and the
//! SCAT trace format carries attention maps to the offline analyzer.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod trace;

pub use analysis::{analyze_trace, AnalysisOptions, AnalysisRow, MapSummary};
pub use attention::{
    aggregate_self_attention, average_heads_layers, compute_attention, merge_dual_encoder, normalize_map,
    otsu_threshold, subject_mask, AggregatedSelfMap, AttentionRecord, CrossAttentionMap, HeadMaps, PatchGrid,
    SelfAttentionField, SoftmaxAxis, SubjectMask,
};
pub use denoiser::{evaluate, forward, loss_grad_wrt_latent, losses_at, DenoiserConfig, DenoiserParams, LatentState};
pub use error::{Error, FormatError, Result};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
pub use guidance::{
    cross_attn_response_score, evaluate_record, pairwise_overlap, self_cross_score, self_self_overlap, total_loss,
    GuidanceLosses, PairOverlap, SubjectSet, DEFAULT_LAMBDA,
};
pub use sampler::{
    init_noise, refine_latent, run_pipeline, scheduler_step, DdimSchedule, NoisePool, RunOutput, RunTrace, Sampler,
    SamplerConfig, ScheduleConfig,
};
pub use scalar::Scalar;
pub use trace::{read_trace, read_trace_file, write_trace, write_trace_file, TraceMetadata};

pub type CrossAttentionMap64 = CrossAttentionMap<f64>;
pub type CrossAttentionMap32 = CrossAttentionMap<f32>;
pub type SelfAttentionField64 = SelfAttentionField<f64>;
pub type SelfAttentionField32 = SelfAttentionField<f32>;
pub type AggregatedSelfMap64 = AggregatedSelfMap<f64>;
pub type AttentionRecord64 = AttentionRecord<f64>;
pub type AttentionRecord32 = AttentionRecord<f32>;
pub type GuidanceLosses64 = GuidanceLosses<f64>;
pub type LatentState64 = LatentState<f64>;
pub type DenoiserParams64 = DenoiserParams<f64>;
pub type RunTrace64 = RunTrace<f64>;
