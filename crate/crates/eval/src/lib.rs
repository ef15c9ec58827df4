//! Faithfulness scoring of generated multi-subject images by visual question
//! answering.
//!
//! Each image is sent with a fixed True/False question prompt to a
//! chat-style vision-language endpoint. Answers are parsed per question and
//! aggregated into existence (Ext), recognizability (Rec), absence of
//! mixing (w/o M) and, when a relation question is configured, relation
//! (Rel) percentages.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod case;
pub mod client;
pub mod error;
pub mod questions;
pub mod scores;
pub mod transcript;

pub use batch::{collect_images, load_fixtures, score_batch, score_offline, BatchConfig, BatchOutcome, RawTranscript};
pub use case::{load_prompt_set, parse_prompt_set, PromptCase};
pub use client::{EndpointConfig, HttpVlmClient, ImageInput, RequestError, VlmClient};
pub use error::{EvalError, Result};
pub use questions::{build_question_prompt, QuestionLayout};
pub use scores::{compute_scores, CaseScore, ScoreReport, Tally};
pub use transcript::{parse_answers, parse_verdicts, Answers, TranscriptStatus, VqaTranscript};
