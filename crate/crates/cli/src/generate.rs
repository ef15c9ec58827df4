use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use selfcross::sampler::EvalKind;
use selfcross::{run_pipeline, write_trace_file, DenoiserParams, SamplerConfig, SubjectSet, TraceMetadata};
use serde::{Deserialize, Serialize};

use crate::config::{tokenize, EffectiveConfig, FileConfig};
use crate::usage;

pub const MODEL_ID: &str = "toy-denoiser";

#[derive(clap::Args)]
pub struct Args {
    /// Prompt text; tokens are its whitespace-separated words after a start token.
    #[arg(long)]
    prompt: Option<String>,
    /// Subject token indices, comma separated (0 is the start token).
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<usize>>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; runs in parallel.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Total denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Guided steps at the start of sampling; 0 disables guidance.
    #[arg(long)]
    guidance_steps: Option<usize>,
    /// Refinement step indices, comma separated, or `none`.
    #[arg(long, value_parser = parse_steps)]
    refine_at: Option<StepSet>,
    #[arg(long)]
    tau_cross: Option<f64>,
    #[arg(long)]
    tau_self_cross: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// TOML file with `prompt`, `subjects`, `seeds`, `[sampler]` and `[denoiser]`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct StepSet(BTreeSet<usize>);

fn parse_steps(s: &str) -> Result<StepSet, String> {
    if s.trim() == "none" || s.trim().is_empty() {
        return Ok(StepSet(BTreeSet::new()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(StepSet)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub config: EffectiveConfig,
    pub runs: Vec<RunFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunFiles {
    pub seed: u64,
    /// SCAT attention trace, relative to the output directory.
    pub attention: String,
    /// JSON run trace, relative to the output directory.
    pub run: String,
}

pub fn resolve(args: &Args) -> anyhow::Result<EffectiveConfig> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut sampler = file.sampler;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(args.steps, sampler.total_steps);
    set!(args.guidance_steps, sampler.guidance_steps);
    set!(args.refine_at.as_ref().map(|s| s.0.clone()), sampler.refinement_steps);
    set!(args.tau_cross, sampler.tau_cross);
    set!(args.tau_self_cross, sampler.tau_self_cross);
    set!(args.lambda, sampler.lambda);
    set!(args.pool_size, sampler.noise_pool_size);
    set!(args.step_size, sampler.step_size);

    let prompt = args
        .prompt
        .clone()
        .or(file.prompt)
        .ok_or_else(|| usage("a prompt is required (--prompt or `prompt` in --config)"))?;
    let subjects = args
        .subjects
        .clone()
        .or(file.subjects)
        .ok_or_else(|| usage("subject indices are required (--subjects or `subjects` in --config)"))?;
    let seeds = match (args.seed, &args.seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => list.clone(),
        (None, None) => file.seeds.unwrap_or_else(|| vec![sampler.seed]),
    };
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(usage("seeds must be distinct"));
    }
    sampler.seed = seeds[0];

    let tokens = tokenize(&prompt);
    let set = SubjectSet::new(subjects.clone()).map_err(|e| usage(e.to_string()))?;
    set.validate(tokens.len()).map_err(|e| usage(e.to_string()))?;
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    Ok(EffectiveConfig {
        prompt,
        tokens,
        subjects,
        seeds,
        sampler,
        denoiser: file.denoiser,
    })
}

struct Outcome {
    files: RunFiles,
    summary: String,
}

fn run_seed(cfg: &EffectiveConfig, params: &DenoiserParams<f64>, seed: u64, out: &Path) -> anyhow::Result<Outcome> {
    let sampler = SamplerConfig {
        seed,
        ..cfg.sampler.clone()
    };
    let subjects = SubjectSet::new(cfg.subjects.clone())?;
    let run = run_pipeline(&cfg.tokens, &subjects, &sampler, params).with_context(|| format!("seed {seed}"))?;

    let metadata = TraceMetadata {
        prompt: cfg.prompt.clone(),
        token_strings: cfg.tokens.clone(),
        subject_indices: cfg.subjects.clone(),
        model_id: MODEL_ID.into(),
        grid: cfg.denoiser.grid,
        layers: vec![0],
        heads: 1,
    };
    let files = RunFiles {
        seed,
        attention: format!("seed-{seed}.scat"),
        run: format!("seed-{seed}.json"),
    };
    write_trace_file(out.join(&files.attention), &run.records, &metadata)
        .with_context(|| format!("writing {}", files.attention))?;
    let json = serde_json::to_vec_pretty(&run.trace)?;
    std::fs::write(out.join(&files.run), json).with_context(|| format!("writing {}", files.run))?;

    let guided = |step| run.trace.at(step, EvalKind::Guidance).map(|e| e.losses.s_self_cross);
    let window = sampler.guidance_steps;
    let summary = match (guided(0), window.checked_sub(1).and_then(guided)) {
        (Some(first), Some(last)) => format!(
            "seed {seed}: candidate {}, S_sc {first:.4} -> {last:.4} over {window} guided steps, {} refinement(s)",
            run.trace.selected_candidate,
            run.trace.refinements.len()
        ),
        _ => format!("seed {seed}: unguided, {} evaluations", run.trace.evaluations.len()),
    };
    Ok(Outcome { files, summary })
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = resolve(&args)?;
    let started = chrono::Utc::now().to_rfc3339();
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let params = DenoiserParams::<f64>::new(cfg.denoiser.clone(), cfg.tokens.clone())
        .map_err(|e| usage(format!("denoiser: {e}")))?;

    let outcomes: Vec<Outcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&cfg, &params, seed, &args.out))
        .collect::<anyhow::Result<_>>()?;
    for o in &outcomes {
        println!("{}", o.summary);
    }

    let manifest = RunManifest {
        tool: "selfcross".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        config: cfg,
        runs: outcomes.into_iter().map(|o| o.files).collect(),
    };
    let path = args.out.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
