use serde::{Deserialize, Serialize};

use crate::case::PromptCase;

/// Question order of a prompt: existence and recognizability for each class
/// in turn, then the mixture question, then the optional relation question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionLayout {
    pub subjects: usize,
    pub relation: bool,
}

impl QuestionLayout {
    pub fn for_case(case: &PromptCase) -> Self {
        Self {
            subjects: case.classes.len(),
            relation: case.relation.is_some(),
        }
    }

    pub fn question_count(&self) -> usize {
        2 * self.subjects + 1 + self.relation as usize
    }

    /// Zero-based position of the existence question of subject `k`.
    pub fn existence(&self, k: usize) -> usize {
        2 * k
    }

    pub fn recognizability(&self, k: usize) -> usize {
        2 * k + 1
    }

    pub fn mixture(&self) -> usize {
        2 * self.subjects
    }

    pub fn relation(&self) -> Option<usize> {
        self.relation.then(|| 2 * self.subjects + 1)
    }

    /// More than two subjects use the extended question set.
    pub fn is_extension(&self) -> bool {
        self.subjects != 2
    }
}

const ANSWER: &str = "Give a True/False answer after reasoning.";

const RECOGNIZABLE: &str =
    "recognizable and regular (without artifacts) in terms of its shape and semantic structure only? \
For example, answer False if a two-leg animal has three or more legs, or a two-eye animal has four eyes, \
or a two-ear animal has one or three ears. Ignore style, object size in comparison to its surroundings.";

/// The faithfulness question prompt sent with each image.
///
/// Two-class cases reproduce the five-question prompt exactly. A third class
/// adds its own existence and recognizability pair before a single mixture
/// question naming every class.
pub fn build_question_prompt(case: &PromptCase) -> String {
    let classes = &case.classes;
    let quoted = if classes.len() == 2 {
        format!("a {} and a {}", classes[0], classes[1])
    } else {
        case.prompt.clone()
    };
    let mut questions = Vec::new();
    for class in classes {
        questions.push(format!("Is there {class} appearing in this image? {ANSWER}"));
        questions.push(format!("Is the generated {class} {RECOGNIZABLE} {ANSWER}"));
    }
    let listed = match classes.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(", ")),
        _ => classes.join(""),
    };
    questions.push(format!(
        "Is the generated content a mixture of {listed}? \
         An example of mixture is that Sphinx resembles a mixture of a person and a lion. {ANSWER}"
    ));
    if let Some(relation) = &case.relation {
        questions.push(format!("{relation} {ANSWER}"));
    }
    let mut text = format!(
        "You are now an expert to check the faithfulness of the synthesized images. The prompt is \"{quoted}\".\n\
         Based on the image description below, reason and answer the following questions:\n"
    );
    for (i, q) in questions.iter().enumerate() {
        text.push_str(&format!("{}. {q}\n", i + 1));
    }
    text
}
