use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::questions::QuestionLayout;

/// Answers of one parsed transcript, grouped by question role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answers {
    pub existence: Vec<bool>,
    pub recognizable: Vec<bool>,
    pub mixture: bool,
    pub relation: Option<bool>,
}

impl Answers {
    /// Answers of a two-subject transcript in question order Q1..Q5.
    pub fn two_subject(q: [bool; 5]) -> Self {
        Self {
            existence: vec![q[0], q[2]],
            recognizable: vec![q[1], q[3]],
            mixture: q[4],
            relation: None,
        }
    }

    fn from_flat(flat: &[bool], layout: QuestionLayout) -> Self {
        let n = layout.subjects;
        Self {
            existence: (0..n).map(|k| flat[layout.existence(k)]).collect(),
            recognizable: (0..n).map(|k| flat[layout.recognizability(k)]).collect(),
            mixture: flat[layout.mixture()],
            relation: layout.relation().map(|i| flat[i]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptStatus {
    Parsed,
    Unparseable,
    /// No answer was obtained from the endpoint.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaTranscript {
    pub case_id: String,
    pub image_id: String,
    pub status: TranscriptStatus,
    pub answers: Option<Answers>,
    pub raw: String,
    pub error: Option<String>,
}

impl VqaTranscript {
    pub fn parsed(case_id: impl Into<String>, image_id: impl Into<String>, answers: Answers) -> Self {
        Self {
            case_id: case_id.into(),
            image_id: image_id.into(),
            status: TranscriptStatus::Parsed,
            answers: Some(answers),
            raw: String::new(),
            error: None,
        }
    }

    pub fn failed(case_id: impl Into<String>, image_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            image_id: image_id.into(),
            status: TranscriptStatus::Failed,
            answers: None,
            raw: String::new(),
            error: Some(error.into()),
        }
    }
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:^|[^0-9A-Za-z.])(?:\*\*|#+\s*)?(?:Question\s+)?(\d{1,2})\s*(?:\*\*)?[.):](?:\s|\*\*|$)").unwrap()
});
static VERDICT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(true|false)\b").unwrap());

/// Extracts one True/False per numbered answer.
///
/// Answers are located by their numbers `1.`, `2.`, ... in increasing order;
/// within each answer the last `True`/`False` (any case) is taken. Returns
/// `None` when any answer is missing, has no verdict, or when an answer
/// numbered beyond the expected count follows.
pub fn parse_verdicts(raw: &str, expected: usize) -> Option<Vec<bool>> {
    let mut starts = Vec::with_capacity(expected + 1);
    let mut from = 0;
    for k in 1..=expected + 1 {
        let found = MARKER
            .captures_iter(&raw[from..])
            .find(|c| c[1].parse::<usize>() == Ok(k))
            .map(|c| {
                let m = c.get(0).unwrap();
                (from + m.start(), from + m.end())
            });
        match found {
            Some((start, end)) => {
                starts.push((start, end));
                from = end;
            }
            None if k == expected + 1 => break,
            None => return None,
        }
    }
    if starts.len() > expected {
        return None;
    }
    (0..expected)
        .map(|i| {
            let body_end = starts.get(i + 1).map_or(raw.len(), |s| s.0);
            let body = &raw[starts[i].1..body_end];
            VERDICT
                .find_iter(body)
                .last()
                .map(|m| m.as_str().eq_ignore_ascii_case("true"))
        })
        .collect()
}

/// Parses raw model text into a transcript. Unparseable text is marked, not
/// rejected.
pub fn parse_answers(case_id: &str, image_id: &str, raw: &str, layout: QuestionLayout) -> VqaTranscript {
    let answers = parse_verdicts(raw, layout.question_count()).map(|flat| Answers::from_flat(&flat, layout));
    VqaTranscript {
        case_id: case_id.to_string(),
        image_id: image_id.to_string(),
        status: if answers.is_some() {
            TranscriptStatus::Parsed
        } else {
            TranscriptStatus::Unparseable
        },
        answers,
        raw: raw.to_string(),
        error: None,
    }
}
