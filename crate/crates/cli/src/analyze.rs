use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::ValueEnum;
use selfcross::{analyze_trace, read_trace_file, AnalysisOptions, AnalysisRow, SubjectSet, DEFAULT_LAMBDA};
use serde::{Deserialize, Serialize};

use crate::usage;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(clap::Args)]
pub struct Args {
    /// SCAT trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Subject token indices; defaults to those stored in the trace.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Layers to average, comma separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u32>>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Also write the JSON report to this file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print max value, Otsu threshold and mask size of every subject map.
    #[arg(long)]
    maps: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub prompt: String,
    pub model_id: String,
    pub tokens: Vec<String>,
    pub subjects: Vec<usize>,
    pub lambda: f64,
    pub rows: Vec<AnalysisRow>,
}

fn table(report: &AnalysisReport, maps: bool) -> String {
    let mut out = format!(
        "{:>5}  {:>8}  {:>10}  {:>10}  {:>10}  {:>10}\n",
        "row", "timestep", "S_sc", "S_ca", "total", "layers"
    );
    for row in &report.rows {
        let layers = row.layers.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        match (&row.losses, &row.error) {
            (Some(l), _) => {
                let _ = writeln!(
                    out,
                    "{:>5}  {:>8}  {:>10.6}  {:>10.6}  {:>10.6}  {:>10}",
                    row.index, row.timestep, l.s_self_cross, l.s_cross_attn, l.total, layers
                );
            }
            (None, e) => {
                let _ = writeln!(
                    out,
                    "{:>5}  {:>8}  error: {}",
                    row.index,
                    row.timestep,
                    e.as_deref().unwrap_or("unknown")
                );
            }
        }
        if maps {
            for m in &row.maps {
                let token = report.tokens.get(m.token).map_or("?", String::as_str);
                let _ = writeln!(
                    out,
                    "       token {} ({token}): max {:.6}, otsu {:.6}, mask {}",
                    m.token, m.max, m.otsu_threshold, m.mask_size
                );
            }
        }
    }
    out
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if !args.lambda.is_finite() || args.lambda < 0.0 {
        return Err(usage("--lambda must be a nonnegative number"));
    }
    let (metadata, records) =
        read_trace_file::<f64>(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let indices = args
        .subjects
        .clone()
        .unwrap_or_else(|| metadata.subject_indices.clone());
    let subjects = SubjectSet::new(indices.clone()).map_err(|e| usage(e.to_string()))?;
    subjects
        .validate(metadata.token_strings.len())
        .map_err(|e| usage(e.to_string()))?;
    let options = AnalysisOptions {
        lambda: args.lambda,
        layers: args
            .layers
            .as_ref()
            .map(|l| l.iter().copied().collect::<BTreeSet<u32>>()),
    };
    let rows = analyze_trace(&metadata, &records, &subjects, &options)?;
    let report = AnalysisReport {
        prompt: metadata.prompt,
        model_id: metadata.model_id,
        tokens: metadata.token_strings,
        subjects: indices,
        lambda: args.lambda,
        rows,
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.output {
        std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    match args.format {
        Format::Json => println!("{json}"),
        Format::Table => print!("{}", table(&report, args.maps)),
    }
    Ok(())
}
