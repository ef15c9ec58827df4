use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::case::PromptCase;
use crate::client::{image_mime, EndpointConfig, ImageInput, RequestError, VlmClient};
use crate::error::{EvalError, Result};
use crate::questions::{build_question_prompt, QuestionLayout};
use crate::scores::{compute_scores, ScoreReport};
use crate::transcript::{parse_answers, VqaTranscript};

/// What the endpoint returned for one image, stored before any parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTranscript {
    pub case_id: String,
    pub image_id: String,
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    #[serde(default)]
    pub question: String,
    /// Model text, absent when every attempt failed.
    pub raw: Option<String>,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub error: Option<String>,
}

impl RawTranscript {
    pub fn to_transcript(&self, layout: QuestionLayout) -> VqaTranscript {
        match &self.raw {
            Some(raw) => parse_answers(&self.case_id, &self.image_id, raw, layout),
            None => VqaTranscript::failed(
                &self.case_id,
                &self.image_id,
                self.error.clone().unwrap_or_else(|| "no response".into()),
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageItem {
    pub case: usize,
    pub image_id: String,
    pub path: PathBuf,
}

/// Images of every case, read from `images/<case id>/`, sorted by file name.
/// Cases without a directory contribute no images.
pub fn collect_images(images: &Path, cases: &[PromptCase], per_case: Option<usize>) -> Result<Vec<ImageItem>> {
    let mut items = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let dir = images.join(&case.id);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| EvalError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && image_mime(p).is_some())
            .collect();
        files.sort();
        files.truncate(per_case.unwrap_or(usize::MAX));
        items.extend(files.into_iter().map(|path| ImageItem {
            case: ci,
            image_id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            path,
        }));
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct BatchConfig {
    pub endpoint: EndpointConfig,
    pub transcripts_dir: PathBuf,
    /// Images used per case; all when `None`.
    pub images_per_case: Option<usize>,
}

pub struct BatchOutcome {
    pub report: ScoreReport,
    pub transcripts: Vec<VqaTranscript>,
}

struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: Option<f64>) -> Self {
        Self {
            interval: per_second.map(|r| Duration::from_secs_f64(1.0 / r)),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        std::thread::sleep(wait);
    }
}

fn persist(dir: &Path, raw: &RawTranscript) -> Result<()> {
    let case_dir = dir.join(&raw.case_id);
    std::fs::create_dir_all(&case_dir).map_err(|e| EvalError::io(&case_dir, e))?;
    let path = case_dir.join(format!("{}.json", raw.image_id));
    let text = serde_json::to_string_pretty(raw).map_err(|e| EvalError::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| EvalError::io(&path, e))
}

/// Asks one image's questions, retrying transient failures with exponential
/// backoff up to the attempt cap.
fn ask_with_retry(
    client: &dyn VlmClient,
    question: &str,
    image: &ImageInput,
    config: &EndpointConfig,
    limiter: &RateLimiter,
) -> (std::result::Result<String, RequestError>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        limiter.acquire();
        match client.ask(question, image) {
            Err(RequestError::Transient(_)) if attempt < config.max_attempts => {
                std::thread::sleep(config.backoff(attempt));
            }
            other => return (other, attempt),
        }
    }
}

/// Scores every image under `images` against its case's questions.
///
/// Requests run on up to `max_in_flight` threads. Each response is written
/// to `transcripts_dir/<case id>/<image id>.json` before it is parsed. An
/// image whose retries are exhausted is counted as failed; rejected
/// credentials abort the batch.
pub fn score_batch(
    images: &Path,
    cases: &[PromptCase],
    client: &dyn VlmClient,
    config: &BatchConfig,
) -> Result<BatchOutcome> {
    config.endpoint.validate()?;
    let items = collect_images(images, cases, config.images_per_case)?;
    let questions: Vec<String> = cases.iter().map(build_question_prompt).collect();
    let limiter = RateLimiter::new(config.endpoint.requests_per_second);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth_error = Mutex::new(None);
    let io_error = Mutex::new(None);
    let results: Mutex<Vec<Option<VqaTranscript>>> = Mutex::new(vec![None; items.len()]);

    let work = || loop {
        if abort.load(Ordering::SeqCst) {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(item) = items.get(i) else { return };
        let case = &cases[item.case];
        let mut raw = RawTranscript {
            case_id: case.id.clone(),
            image_id: item.image_id.clone(),
            image_path: Some(item.path.clone()),
            question: questions[item.case].clone(),
            raw: None,
            attempts: 0,
            error: None,
        };
        match std::fs::read(&item.path) {
            Ok(bytes) => {
                let image = ImageInput {
                    bytes,
                    mime: image_mime(&item.path).unwrap_or("application/octet-stream"),
                };
                let (outcome, attempts) = ask_with_retry(client, &raw.question, &image, &config.endpoint, &limiter);
                raw.attempts = attempts;
                match outcome {
                    Ok(text) => raw.raw = Some(text),
                    Err(RequestError::Auth(m)) => {
                        abort.store(true, Ordering::SeqCst);
                        auth_error.lock().unwrap().get_or_insert(m);
                        return;
                    }
                    Err(e) => raw.error = Some(e.to_string()),
                }
            }
            Err(e) => raw.error = Some(format!("reading image: {e}")),
        }
        if let Err(e) = persist(&config.transcripts_dir, &raw) {
            abort.store(true, Ordering::SeqCst);
            io_error.lock().unwrap().get_or_insert(e);
            return;
        }
        results.lock().unwrap()[i] = Some(raw.to_transcript(QuestionLayout::for_case(case)));
    };
    let workers = config.endpoint.max_in_flight.min(items.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(work);
        }
    });

    if let Some(m) = auth_error.into_inner().unwrap() {
        return Err(EvalError::Auth(m));
    }
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }
    let transcripts: Vec<VqaTranscript> = results.into_inner().unwrap().into_iter().flatten().collect();
    let report = compute_scores(&transcripts)?;
    Ok(BatchOutcome { report, transcripts })
}

/// Reads persisted transcripts (`*.json`, directly in `dir` or one level
/// below) in path order and re-parses them against their cases.
pub fn load_fixtures(dir: &Path, cases: &[PromptCase]) -> Result<Vec<VqaTranscript>> {
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| EvalError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| EvalError::io(dir, e))?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path).map_err(|e| EvalError::io(&path, e))? {
                paths.push(inner.map_err(|e| EvalError::io(&path, e))?.path());
            }
        } else {
            paths.push(path);
        }
    }
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
            let raw: RawTranscript = serde_json::from_str(&text).map_err(|e| EvalError::json(path, e))?;
            let case = cases
                .iter()
                .find(|c| c.id == raw.case_id)
                .ok_or_else(|| EvalError::Case(format!("{}: unknown case id {:?}", path.display(), raw.case_id)))?;
            Ok(raw.to_transcript(QuestionLayout::for_case(case)))
        })
        .collect()
}

/// Scores persisted transcripts without contacting any endpoint.
pub fn score_offline(dir: &Path, cases: &[PromptCase]) -> Result<BatchOutcome> {
    let transcripts = load_fixtures(dir, cases)?;
    let report = compute_scores(&transcripts)?;
    Ok(BatchOutcome { report, transcripts })
}
