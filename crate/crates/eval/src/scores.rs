use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::transcript::{Answers, TranscriptStatus, VqaTranscript};

/// Counts of satisfied criteria over a set of parsed transcripts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub parsed: usize,
    /// Every subject exists.
    pub ext: usize,
    /// Every subject is recognizable.
    pub rec: usize,
    /// Mixture question answered False.
    pub wom: usize,
    /// Transcripts that carry a relation answer.
    pub rel_asked: usize,
    pub rel: usize,
}

impl Tally {
    fn add(&mut self, a: &Answers) {
        self.parsed += 1;
        self.ext += a.existence.iter().all(|&x| x) as usize;
        self.rec += a.recognizable.iter().all(|&x| x) as usize;
        self.wom += !a.mixture as usize;
        if let Some(r) = a.relation {
            self.rel_asked += 1;
            self.rel += r as usize;
        }
    }

    pub fn ext_pct(&self) -> f64 {
        pct(self.ext, self.parsed)
    }

    pub fn rec_pct(&self) -> f64 {
        pct(self.rec, self.parsed)
    }

    pub fn wom_pct(&self) -> f64 {
        pct(self.wom, self.parsed)
    }

    pub fn rel_pct(&self) -> Option<f64> {
        (self.rel_asked > 0).then(|| pct(self.rel, self.rel_asked))
    }
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 * 100.0 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub transcripts: usize,
    pub unparseable: usize,
    pub failed: usize,
    pub tally: Tally,
    pub ext_pct: f64,
    pub rec_pct: f64,
    pub wom_pct: f64,
    pub rel_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub ext_pct: f64,
    pub rec_pct: f64,
    pub wom_pct: f64,
    pub rel_pct: Option<f64>,
    pub transcripts: usize,
    pub parsed: usize,
    pub unparseable: usize,
    /// Images for which the endpoint never answered.
    pub failed: usize,
    /// Fraction of transcripts that were scored.
    pub coverage: f64,
    pub tally: Tally,
    pub per_case: Vec<CaseScore>,
    /// Set when any case used the extended (three-subject) question set.
    pub protocol_extension: bool,
}

/// Aggregates parsed transcripts into Ext/Rec/w-o-M (and Rel when asked)
/// percentages over the parsed transcripts.
pub fn compute_scores(transcripts: &[VqaTranscript]) -> Result<ScoreReport> {
    let mut overall = Tally::default();
    let mut cases: BTreeMap<&str, (Tally, usize, usize, usize)> = BTreeMap::new();
    let (mut unparseable, mut failed) = (0, 0);
    let mut extension = false;
    for t in transcripts {
        let entry = cases.entry(&t.case_id).or_default();
        entry.1 += 1;
        match (&t.status, &t.answers) {
            (TranscriptStatus::Parsed, Some(a)) => {
                overall.add(a);
                entry.0.add(a);
                extension |= a.existence.len() != 2;
            }
            (TranscriptStatus::Failed, _) => {
                failed += 1;
                entry.3 += 1;
            }
            _ => {
                unparseable += 1;
                entry.2 += 1;
            }
        }
    }
    if overall.parsed == 0 {
        return Err(EvalError::NoParseable);
    }
    let per_case = cases
        .into_iter()
        .map(|(id, (tally, n, unparseable, failed))| CaseScore {
            case_id: id.to_string(),
            transcripts: n,
            unparseable,
            failed,
            ext_pct: tally.ext_pct(),
            rec_pct: tally.rec_pct(),
            wom_pct: tally.wom_pct(),
            rel_pct: tally.rel_pct(),
            tally,
        })
        .collect();
    Ok(ScoreReport {
        ext_pct: overall.ext_pct(),
        rec_pct: overall.rec_pct(),
        wom_pct: overall.wom_pct(),
        rel_pct: overall.rel_pct(),
        transcripts: transcripts.len(),
        parsed: overall.parsed,
        unparseable,
        failed,
        coverage: overall.parsed as f64 / transcripts.len() as f64,
        tally: overall,
        per_case,
        protocol_extension: extension,
    })
}

impl ScoreReport {
    /// Fixed-width table: one row per case and a final total row.
    pub fn to_table(&self) -> String {
        let rel = |p: Option<f64>| p.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let width = self.per_case.iter().map(|c| c.case_id.len()).max().unwrap_or(4).max(5);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "case", "n", "Ext", "Rec", "w/o M", "Rel"
        );
        for c in &self.per_case {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7}\n",
                c.case_id,
                c.tally.parsed,
                c.ext_pct,
                c.rec_pct,
                c.wom_pct,
                rel(c.rel_pct)
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7}\n",
            "total",
            self.parsed,
            self.ext_pct,
            self.rec_pct,
            self.wom_pct,
            rel(self.rel_pct)
        ));
        if self.unparseable + self.failed > 0 {
            out.push_str(&format!(
                "coverage {:.1}% ({} unparseable, {} failed of {})\n",
                self.coverage * 100.0,
                self.unparseable,
                self.failed,
                self.transcripts
            ));
        }
        if self.protocol_extension {
            out.push_str("note: three-subject cases use the extended question set\n");
        }
        out
    }
}
