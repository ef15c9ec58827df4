//! Central finite-difference check of [`crate::denoiser::evaluate`].
//!
//! Each trial draws a denoiser, latent, subject set and `lambda` from its
//! seed, then compares chosen gradient coordinates against
//! `(L(z + h e) - L(z - h e)) / 2h`. Points where a mask, peak or `min()`
//! branch differs between `z - h e`, `z` and `z + h e` are not on a single
//! smooth piece of the loss; such coordinates are redrawn, and trials whose
//! center sits on an exact tie are redrawn with a fresh latent.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{evaluate, DenoiserConfig, DenoiserParams, LatentState};
use crate::error::Result;
use crate::guidance::SubjectSet;
use crate::rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            coordinates: 10,
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub trial: usize,
    pub seed: u64,
    pub patch: usize,
    pub channel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub failures: Vec<CoordinateCheck>,
    /// Trials redrawn because the center point sat on a tie.
    pub resampled_trials: usize,
    /// Coordinates redrawn because a branch flipped within the step.
    pub resampled_coordinates: usize,
    pub max_relative_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A randomly drawn guided evaluation point.
pub struct Trial {
    pub params: DenoiserParams<f64>,
    pub latent: LatentState<f64>,
    pub subjects: SubjectSet,
    pub lambda: f64,
}

const PROMPTS: [(&[&str], &[usize]); 3] = [
    (&["<|startoftext|>", "a", "cat", "and", "a", "dog"], &[2, 5]),
    (&["<|startoftext|>", "a", "bear", "and", "an", "elephant"], &[2, 5]),
    (&["<|startoftext|>", "a", "cat", "a", "dog", "a", "bird"], &[2, 4, 6]),
];

/// Draws trial `seed`, redrawing the latent while `attempt` increases.
pub fn draw_trial(seed: u64, attempt: u64) -> Result<Trial> {
    let mut r = rng::stream(seed, 0xC0FFEE);
    let (tokens, subjects) = PROMPTS[r.random_range(0..PROMPTS.len())];
    let lambda = r.random_range(0.5..2.0);
    let config = DenoiserConfig {
        seed,
        ..DenoiserConfig::default()
    };
    let params = DenoiserParams::new(config, tokens.iter().map(|s| s.to_string()).collect())?;
    let grid = params.grid();
    let c = params.channels();
    let values = Array2::from_shape_vec(
        (grid.patches(), c),
        rng::gaussian(
            &mut rng::stream(seed, rng::streams::NOISE + attempt),
            grid.patches() * c,
        ),
    )
    .expect("latent shape");
    Ok(Trial {
        latent: LatentState::new(grid, c, values, 981)?,
        params,
        subjects: SubjectSet::new(subjects.to_vec())?,
        lambda,
    })
}

/// Runs the finite-difference suite. `perturb` post-processes the analytic
/// gradient and exists so the harness itself can be shown to catch errors.
pub fn run_gradcheck_with(config: &GradcheckConfig, perturb: impl Fn(&mut Array2<f64>)) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for trial in 0..config.trials {
        let seed = config.seed.wrapping_add(trial as u64);
        let mut attempt = 0;
        let (point, center) = loop {
            let point = draw_trial(seed, attempt)?;
            let center = evaluate(&point.latent, &point.params, &point.subjects, point.lambda)?;
            if !center.branches.has_ties() {
                break (point, center);
            }
            report.resampled_trials += 1;
            attempt += 1;
        };
        let mut gradient = center.gradient.clone();
        perturb(&mut gradient);

        let (rows, cols) = gradient.dim();
        let mut picker = rng::stream(seed, 0xFD);
        let mut checked = 0;
        let mut draws = 0;
        while checked < config.coordinates && draws < config.coordinates * 50 {
            draws += 1;
            let (patch, channel) = (picker.random_range(0..rows), picker.random_range(0..cols));
            let shifted = |delta: f64| {
                let mut z = point.latent.clone();
                z.values[[patch, channel]] += delta;
                evaluate(&z, &point.params, &point.subjects, point.lambda)
            };
            let plus = shifted(config.step)?;
            let minus = shifted(-config.step)?;
            if plus.branches != center.branches || minus.branches != center.branches {
                report.resampled_coordinates += 1;
                continue;
            }
            let numeric = (plus.losses.total - minus.losses.total) / (2.0 * config.step);
            let analytic = gradient[[patch, channel]];
            let denom = analytic.abs().max(numeric.abs()).max(config.floor);
            let relative_error = (analytic - numeric).abs() / denom;
            let check = CoordinateCheck {
                trial,
                seed,
                patch,
                channel,
                analytic,
                numeric,
                relative_error,
            };
            report.max_relative_error = report.max_relative_error.max(relative_error);
            if !(relative_error < config.tolerance) {
                report.failures.push(check.clone());
            }
            report.checks.push(check);
            checked += 1;
        }
    }
    Ok(report)
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    run_gradcheck_with(config, |_| {})
}
