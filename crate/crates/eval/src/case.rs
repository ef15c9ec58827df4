use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

/// One prompt of a benchmark set together with the classes its questions ask
/// about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCase {
    /// Stable identifier used for image directories and transcript files.
    pub id: String,
    pub prompt: String,
    /// Two or three subject classes, in prompt order.
    pub classes: Vec<String>,
    pub subject_indices: Vec<usize>,
    /// Optional spatial-relation question, asked last.
    pub relation: Option<String>,
}

impl PromptCase {
    pub fn new(prompt: impl Into<String>, classes: Vec<String>, subject_indices: Vec<usize>) -> Result<Self> {
        let prompt = prompt.into();
        let case = Self {
            id: slug(&prompt),
            prompt,
            classes,
            subject_indices,
            relation: None,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn with_relation(mut self, question: impl Into<String>) -> Self {
        self.relation = Some(question.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.classes.len()) {
            return Err(EvalError::Case(format!(
                "{:?}: expected 2 or 3 classes, got {}",
                self.prompt,
                self.classes.len()
            )));
        }
        if self.classes.iter().any(|c| c.trim().is_empty()) {
            return Err(EvalError::Case(format!("{:?}: empty class name", self.prompt)));
        }
        Ok(())
    }
}

/// Lowercase ASCII slug of a prompt: `"a cat and a dog"` becomes
/// `"a-cat-and-a-dog"`.
pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("case");
    }
    out
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Classes read off a prompt of the form `a X and a Y [and a Z]`: the prompt
/// is split on `and`/`with` and leading articles are dropped.
pub fn classes_from_prompt(prompt: &str) -> Vec<String> {
    let mut classes = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in prompt.split_whitespace() {
        let lower = word.to_ascii_lowercase();
        if lower == "and" || lower == "with" {
            classes.push(std::mem::take(&mut current));
        } else {
            current.push(word);
        }
    }
    classes.push(current);
    classes
        .into_iter()
        .map(|words| {
            let skip = words
                .first()
                .is_some_and(|w| ARTICLES.contains(&w.to_ascii_lowercase().as_str())) as usize;
            words[skip..].join(" ")
        })
        .collect()
}

/// Parses a prompt-set file.
///
/// One case per line: `prompt | indices [| class,class[,class]] [| relation question]`.
/// Indices are comma separated. Blank lines and lines starting with `#` are
/// skipped. Without an explicit class field the classes come from
/// [`classes_from_prompt`].
pub fn parse_prompt_set(text: &str) -> Result<Vec<PromptCase>> {
    let mut cases: Vec<PromptCase> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: String| EvalError::PromptLine { line: line_no, reason };
        let fields: Vec<&str> = trimmed.split('|').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(bad(format!(
                "expected 2 to 4 '|'-separated fields, got {}",
                fields.len()
            )));
        }
        let prompt = fields[0];
        if prompt.is_empty() {
            return Err(bad("empty prompt".into()));
        }
        let subject_indices = fields[1]
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| bad(format!("bad subject index {:?}", s.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = match fields.get(2) {
            Some(f) if !f.is_empty() => f.split(',').map(|c| c.trim().to_string()).collect(),
            _ => classes_from_prompt(prompt),
        };
        if classes.len() != subject_indices.len() {
            return Err(bad(format!(
                "{} subject indices but {} classes",
                subject_indices.len(),
                classes.len()
            )));
        }
        let mut case = PromptCase::new(prompt, classes, subject_indices).map_err(|e| bad(e.to_string()))?;
        if let Some(q) = fields.get(3).filter(|q| !q.is_empty()) {
            case.relation = Some(q.to_string());
        }
        let base = case.id.clone();
        let mut k = 2;
        while cases.iter().any(|c| c.id == case.id) {
            case.id = format!("{base}-{k}");
            k += 1;
        }
        cases.push(case);
    }
    if cases.is_empty() {
        return Err(EvalError::EmptyPromptSet);
    }
    Ok(cases)
}

pub fn load_prompt_set(path: impl AsRef<Path>) -> Result<Vec<PromptCase>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    parse_prompt_set(&text)
}

/// Seed prompts of the similar-subjects set.
pub const SSD_SEED: &str = include_str!("../data/ssd.txt");

/// Animal pairs used in the examples.
pub const ANIMAL_SEED: &str = include_str!("../data/animal_animal.txt");
