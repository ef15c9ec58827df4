use std::path::PathBuf;

use anyhow::Context;
use clap::ValueEnum;
use selfcross_eval::case::{ANIMAL_SEED, SSD_SEED};
use selfcross_eval::{
    load_prompt_set, parse_prompt_set, score_batch, score_offline, BatchConfig, BatchOutcome, EndpointConfig,
    HttpVlmClient, PromptCase,
};

use crate::usage;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BuiltinPrompts {
    /// Similar-subject prompts.
    Ssd,
    /// Animal-animal pairs.
    AnimalAnimal,
}

#[derive(clap::Args)]
#[command(group = clap::ArgGroup::new("prompt-source").required(true).args(["prompts", "prompt_set"]))]
#[command(group = clap::ArgGroup::new("source").required(true).args(["endpoint", "offline_fixtures"]))]
pub struct Args {
    /// Prompt file: `prompt | indices [| classes] [| relation]` per line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Built-in prompt set instead of a file.
    #[arg(long, value_enum)]
    prompt_set: Option<BuiltinPrompts>,
    /// Image root holding one directory per case id.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Chat-completions URL of the vision-language model.
    #[arg(long)]
    endpoint: Option<String>,
    /// Score stored transcripts instead of calling an endpoint.
    #[arg(long)]
    offline_fixtures: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    requests_per_second: Option<f64>,
    #[arg(long)]
    images_per_case: Option<usize>,
    /// Output directory for `report.json`, `report.txt` and transcripts.
    #[arg(long)]
    out: PathBuf,
}

fn cases(args: &Args) -> anyhow::Result<Vec<PromptCase>> {
    let parsed = match (&args.prompts, args.prompt_set) {
        (Some(path), _) => load_prompt_set(path),
        (None, Some(BuiltinPrompts::Ssd)) => parse_prompt_set(SSD_SEED),
        (None, Some(BuiltinPrompts::AnimalAnimal)) => parse_prompt_set(ANIMAL_SEED),
        (None, None) => unreachable!("clap enforces a prompt source"),
    };
    parsed.map_err(|e| usage(e.to_string()))
}

fn online(args: &Args, url: &str, cases: &[PromptCase]) -> anyhow::Result<BatchOutcome> {
    let images = args
        .images
        .as_ref()
        .ok_or_else(|| usage("--images is required with --endpoint"))?;
    let mut endpoint = EndpointConfig {
        url: url.to_string(),
        ..Default::default()
    };
    if let Some(m) = &args.model {
        endpoint.model = m.clone();
    }
    if let Some(k) = &args.api_key_env {
        endpoint.api_key_env = k.clone();
    }
    if let Some(n) = args.max_in_flight {
        endpoint.max_in_flight = n;
    }
    endpoint.requests_per_second = args.requests_per_second;
    endpoint.validate().map_err(|e| usage(e.to_string()))?;
    let config = BatchConfig {
        endpoint: endpoint.clone(),
        transcripts_dir: args.out.join("transcripts"),
        images_per_case: args.images_per_case,
    };
    let client = HttpVlmClient::new(endpoint)?;
    Ok(score_batch(images, cases, &client, &config)?)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cases = cases(&args)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let outcome = match (&args.endpoint, &args.offline_fixtures) {
        (Some(url), _) => online(&args, url, &cases)?,
        (None, Some(dir)) => score_offline(dir, &cases)?,
        (None, None) => unreachable!("clap enforces a transcript source"),
    };
    let report = &outcome.report;
    let table = report.to_table();
    print!("{table}");
    std::fs::write(args.out.join("report.txt"), &table).context("writing report.txt")?;
    std::fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(report)?).context("writing report.json")?;
    if report.failed > 0 || report.unparseable > 0 {
        eprintln!(
            "warning: scored {} of {} images ({:.1}% coverage); {} failed, {} unparseable",
            report.parsed,
            report.transcripts,
            100.0 * report.coverage,
            report.failed,
            report.unparseable
        );
    }
    Ok(())
}
