//! Guided reverse process: noise-pool initialization, one guidance step per
//! timestep inside the guidance window, threshold-gated iterative refinement
//! at selected steps, and an unguided tail.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::denoiser::{evaluate, forward, losses_at, DenoiserParams, Evaluation, LatentState};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceLosses, SubjectSet, DEFAULT_LAMBDA};
use crate::rng;
use crate::scalar::Scalar;

/// Scaled-linear beta schedule of the training process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_timesteps: usize,
    pub steps_offset: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 0.00085,
            beta_end: 0.012,
            train_timesteps: 1000,
            steps_offset: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub total_steps: usize,
    /// Guidance is applied at step indices `0..guidance_steps`.
    #[serde(alias = "tau_max_alter_step")]
    pub guidance_steps: usize,
    pub refinement_steps: BTreeSet<usize>,
    pub tau_cross: f64,
    pub tau_self_cross: f64,
    /// Cap on refinement iterations per refinement step.
    pub tau_max_iter: usize,
    pub lambda: f64,
    /// Latent step size at the first guided step; decays linearly to zero
    /// across the guidance window.
    pub step_size: f64,
    pub cfg_scale: f64,
    pub noise_pool_size: usize,
    pub noise_opt_rounds: usize,
    pub noise_lr: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            guidance_steps: 25,
            refinement_steps: BTreeSet::from([10, 20]),
            tau_cross: 0.2,
            tau_self_cross: 0.3,
            tau_max_iter: 20,
            lambda: DEFAULT_LAMBDA,
            step_size: 20.0,
            cfg_scale: 7.5,
            noise_pool_size: 4,
            noise_opt_rounds: 10,
            noise_lr: 10.0,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if self.total_steps > self.schedule.train_timesteps {
            return fail(format!(
                "total_steps {} exceeds train_timesteps {}",
                self.total_steps, self.schedule.train_timesteps
            ));
        }
        if self.guidance_steps > self.total_steps {
            return fail(format!(
                "guidance_steps {} exceeds total_steps {}",
                self.guidance_steps, self.total_steps
            ));
        }
        if let Some(s) = self.refinement_steps.iter().find(|&&s| s >= self.guidance_steps) {
            return fail(format!(
                "refinement step {s} outside guidance window 0..{}",
                self.guidance_steps
            ));
        }
        if !(self.tau_cross > 0.0) || !(self.tau_self_cross > 0.0) {
            return fail("thresholds must be positive".into());
        }
        if self.noise_pool_size == 0 {
            return fail("noise pool needs at least one candidate".into());
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("step_size", self.step_size),
            ("cfg_scale", self.cfg_scale),
            ("noise_lr", self.noise_lr),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.step_size < 0.0 || self.noise_lr < 0.0 {
            return fail("step sizes must be non-negative".into());
        }
        let s = &self.schedule;
        if !(s.beta_start > 0.0 && s.beta_start < s.beta_end && s.beta_end < 1.0) {
            return fail("beta schedule must satisfy 0 < start < end < 1".into());
        }
        Ok(())
    }

    /// Step size applied at guided step `step_index`.
    pub fn step_size_at(&self, step_index: usize) -> f64 {
        if self.guidance_steps == 0 {
            return 0.0;
        }
        self.step_size * (1.0 - step_index as f64 / self.guidance_steps as f64)
    }
}

/// Deterministic first-order (DDIM, eta = 0) scheduler.
#[derive(Clone, Debug)]
pub struct DdimSchedule {
    timesteps: Vec<usize>,
    alphas_cumprod: Vec<f64>,
    step_ratio: usize,
}

impl DdimSchedule {
    pub fn new(inference_steps: usize, config: &ScheduleConfig) -> Result<Self> {
        if inference_steps == 0 || inference_steps > config.train_timesteps {
            return Err(Error::config("inference steps must be in 1..=train_timesteps"));
        }
        let n = config.train_timesteps;
        let step_ratio = n / inference_steps;
        let timesteps = (0..inference_steps)
            .map(|s| s * step_ratio + config.steps_offset)
            .rev()
            .collect();
        let (lo, hi) = (config.beta_start.sqrt(), config.beta_end.sqrt());
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let root = if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - root * root;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            timesteps,
            alphas_cumprod,
            step_ratio,
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn timestep(&self, step_index: usize) -> usize {
        self.timesteps[step_index]
    }

    /// `(alpha_bar_t, alpha_bar_prev)` for a step.
    pub fn alphas(&self, step_index: usize) -> (f64, f64) {
        let t = self.timesteps[step_index];
        let prev = t as i64 - self.step_ratio as i64;
        let a_t = self.alphas_cumprod[t];
        let a_prev = if prev >= 0 {
            self.alphas_cumprod[prev as usize]
        } else {
            self.alphas_cumprod[0]
        };
        (a_t, a_prev)
    }

    /// Multiplier applied to the latent when the noise prediction is zero.
    pub fn latent_coefficient(&self, step_index: usize) -> f64 {
        let (a_t, a_prev) = self.alphas(step_index);
        (a_prev / a_t).sqrt()
    }

    fn next_timestep(&self, step_index: usize) -> i32 {
        self.timesteps.get(step_index + 1).map(|&t| t as i32).unwrap_or(0)
    }
}

/// One DDIM update from `timestep(step_index)` toward the previous timestep.
pub fn scheduler_step<T: Scalar>(
    latent: &LatentState<T>,
    noise_prediction: &Array2<T>,
    step_index: usize,
    schedule: &DdimSchedule,
) -> Result<LatentState<T>> {
    if step_index >= schedule.timesteps.len() {
        return Err(Error::config(format!(
            "step index {step_index} beyond {} steps",
            schedule.timesteps.len()
        )));
    }
    if noise_prediction.dim() != latent.values.dim() {
        return Err(Error::Shape("noise prediction shape differs from latent".into()));
    }
    let (a_t, a_prev) = schedule.alphas(step_index);
    let x_coef = T::of((a_prev / a_t).sqrt());
    let eps_coef = T::of((1.0 - a_prev).sqrt() - (a_prev / a_t).sqrt() * (1.0 - a_t).sqrt());
    let values = &latent.values * x_coef + &(noise_prediction * eps_coef);
    LatentState::new(latent.grid, latent.channels, values, schedule.next_timestep(step_index))
}

/// One candidate initial latent with its loss before and after optimization.
#[derive(Clone, Debug)]
pub struct PoolCandidate<T> {
    pub latent: LatentState<T>,
    pub initial_losses: GuidanceLosses<T>,
    pub losses: GuidanceLosses<T>,
}

#[derive(Clone, Debug)]
pub struct NoisePool<T> {
    pub candidates: Vec<PoolCandidate<T>>,
    pub selected: usize,
}

impl<T: Scalar> NoisePool<T> {
    pub fn selected_candidate(&self) -> &PoolCandidate<T> {
        &self.candidates[self.selected]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalKind {
    /// Losses and gradient at a guided step, before any latent update.
    Guidance,
    /// Re-evaluation after refinement iteration `iteration`.
    Refinement { iteration: usize },
    /// Conditional pass of the call that produces the noise prediction.
    Prediction,
}

/// One denoiser evaluation of the conditional prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<T> {
    pub step_index: usize,
    pub timestep: i32,
    #[serde(flatten)]
    pub kind: EvalKind,
    /// Whether a latent gradient was computed at this evaluation.
    pub gradient: bool,
    pub losses: GuidanceLosses<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementEntry<T> {
    pub step_index: usize,
    pub iterations: usize,
    pub entry_losses: GuidanceLosses<T>,
    pub exit_losses: GuidanceLosses<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry<T> {
    pub initial_total: T,
    pub total: T,
}

/// Everything a run did, in execution order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace<T> {
    pub seed: u64,
    pub config: SamplerConfig,
    pub pool: Vec<PoolEntry<T>>,
    pub selected_candidate: usize,
    pub evaluations: Vec<TraceEntry<T>>,
    pub refinements: Vec<RefinementEntry<T>>,
    /// Step size used at each guided step.
    pub step_sizes: Vec<T>,
    pub final_latent: LatentState<T>,
}

impl<T: Scalar> RunTrace<T> {
    /// Entries of the given kind at a step.
    pub fn at(&self, step_index: usize, kind: EvalKind) -> Option<&TraceEntry<T>> {
        self.evaluations
            .iter()
            .find(|e| e.step_index == step_index && e.kind == kind)
    }
}

pub struct RunOutput<T> {
    pub latent: LatentState<T>,
    pub trace: RunTrace<T>,
    /// Attention record of every trace entry, same order.
    pub records: Vec<AttentionRecord<T>>,
}

/// Borrowed run context: configuration, denoiser and subjects.
pub struct Sampler<'a, T> {
    config: &'a SamplerConfig,
    params: &'a DenoiserParams<T>,
    subjects: &'a SubjectSet,
    schedule: DdimSchedule,
}

struct Log<T> {
    entries: Vec<TraceEntry<T>>,
    records: Vec<AttentionRecord<T>>,
}

impl<T: Scalar> Log<T> {
    fn push(
        &mut self,
        step_index: usize,
        kind: EvalKind,
        gradient: bool,
        losses: GuidanceLosses<T>,
        record: AttentionRecord<T>,
    ) {
        self.entries.push(TraceEntry {
            step_index,
            timestep: record.timestep,
            kind,
            gradient,
            losses,
        });
        self.records.push(record);
    }
}

impl<'a, T: Scalar> Sampler<'a, T> {
    /// Validates everything up front; no denoiser call happens on error.
    pub fn new(config: &'a SamplerConfig, params: &'a DenoiserParams<T>, subjects: &'a SubjectSet) -> Result<Self> {
        config.validate()?;
        subjects.validate(params.tokens().len())?;
        let schedule = DdimSchedule::new(config.total_steps, &config.schedule)?;
        Ok(Self {
            config,
            params,
            subjects,
            schedule,
        })
    }

    pub fn schedule(&self) -> &DdimSchedule {
        &self.schedule
    }

    fn lambda(&self) -> T {
        T::of(self.config.lambda)
    }

    fn eval(&self, latent: &LatentState<T>) -> Result<Evaluation<T>> {
        evaluate(latent, self.params, self.subjects, self.lambda())
    }

    /// Seeded standard normal latent of pool candidate `candidate`.
    pub fn candidate_noise(&self, candidate: usize) -> LatentState<T> {
        let grid = self.params.grid();
        let c = self.params.channels();
        let mut r = rng::stream(self.config.seed, rng::streams::NOISE + candidate as u64);
        let values = Array2::from_shape_vec((grid.patches(), c), rng::gaussian(&mut r, grid.patches() * c))
            .expect("noise shape");
        LatentState {
            grid,
            channels: c,
            values,
            timestep: self.schedule.timestep(0) as i32,
        }
    }

    /// Optimizes mean and log-std of every candidate's Gaussian on the total
    /// loss at the first timestep, `z = mu + exp(log_sigma) * eps` with `eps`
    /// fixed per candidate, then selects the lowest-loss candidate.
    pub fn init_noise(&self) -> Result<NoisePool<T>> {
        let lr = T::of(self.config.noise_lr);
        let mut candidates = Vec::with_capacity(self.config.noise_pool_size);
        for c in 0..self.config.noise_pool_size {
            let eps = self.candidate_noise(c);
            let mut mu = Array2::<T>::zeros(eps.values.dim());
            let mut log_sigma = Array2::<T>::zeros(eps.values.dim());
            let compose = |mu: &Array2<T>, log_sigma: &Array2<T>| LatentState {
                values: mu + &(log_sigma.mapv(T::exp) * &eps.values),
                ..eps.clone()
            };
            let mut initial = None;
            for _ in 0..self.config.noise_opt_rounds {
                let z = compose(&mu, &log_sigma);
                let e = self.eval(&z)?;
                initial.get_or_insert(e.losses);
                let sigma = log_sigma.mapv(T::exp);
                log_sigma = &log_sigma - &(&e.gradient * &sigma * &eps.values * lr);
                mu = &mu - &(e.gradient * lr);
            }
            let latent = compose(&mu, &log_sigma);
            let (losses, _) = losses_at(&latent, self.params, self.subjects, self.lambda())?;
            candidates.push(PoolCandidate {
                latent,
                initial_losses: initial.unwrap_or_else(|| losses.clone()),
                losses,
            });
        }
        let selected = candidates.iter().enumerate().fold(0, |best, (i, c)| {
            if c.losses.total < candidates[best].losses.total {
                i
            } else {
                best
            }
        });
        Ok(NoisePool { candidates, selected })
    }

    /// Gradient steps from an existing evaluation until both losses are at or
    /// below their thresholds or the iteration cap is reached.
    fn refine_from(
        &self,
        mut latent: LatentState<T>,
        mut current: Evaluation<T>,
        step_index: usize,
        step_size: T,
        log: &mut Log<T>,
    ) -> Result<(LatentState<T>, usize, Evaluation<T>)> {
        let (tc, tsc) = (T::of(self.config.tau_cross), T::of(self.config.tau_self_cross));
        let mut iterations = 0;
        while current.losses.exceeds(tc, tsc) && iterations < self.config.tau_max_iter {
            latent.values = &latent.values - &(&current.gradient * step_size);
            iterations += 1;
            current = self.eval(&latent).map_err(|e| context(e, step_index))?;
            log.push(
                step_index,
                EvalKind::Refinement { iteration: iterations },
                true,
                current.losses.clone(),
                current.record.clone(),
            );
        }
        Ok((latent, iterations, current))
    }

    /// Iterative refinement of `latent` at guided step `step_index`.
    /// Returns the refined latent and the number of gradient steps taken.
    pub fn refine_latent(&self, latent: &LatentState<T>, step_index: usize) -> Result<(LatentState<T>, usize)> {
        let current = self.eval(latent).map_err(|e| context(e, step_index))?;
        let mut log = Log {
            entries: Vec::new(),
            records: Vec::new(),
        };
        let step_size = T::of(self.config.step_size_at(step_index));
        let (latent, iterations, _) = self.refine_from(latent.clone(), current, step_index, step_size, &mut log)?;
        Ok((latent, iterations))
    }

    pub fn run(&self) -> Result<RunOutput<T>> {
        let pool = self.init_noise()?;
        let mut latent = pool.selected_candidate().latent.clone();
        let mut log = Log {
            entries: Vec::new(),
            records: Vec::new(),
        };
        let mut refinements = Vec::new();
        let mut step_sizes = Vec::new();
        let (tc, tsc) = (T::of(self.config.tau_cross), T::of(self.config.tau_self_cross));
        let cfg = T::of(self.config.cfg_scale);

        for step in 0..self.config.total_steps {
            latent.timestep = self.schedule.timestep(step) as i32;
            if step < self.config.guidance_steps {
                let step_size = T::of(self.config.step_size_at(step));
                step_sizes.push(step_size);
                let current = self.eval(&latent).map_err(|e| context(e, step))?;
                log.push(
                    step,
                    EvalKind::Guidance,
                    true,
                    current.losses.clone(),
                    current.record.clone(),
                );
                if self.config.refinement_steps.contains(&step) && current.losses.exceeds(tc, tsc) {
                    let entry_losses = current.losses.clone();
                    let (refined, iterations, exit) = self.refine_from(latent, current, step, step_size, &mut log)?;
                    latent = refined;
                    refinements.push(RefinementEntry {
                        step_index: step,
                        iterations,
                        entry_losses,
                        exit_losses: exit.losses,
                    });
                } else {
                    latent.values = &latent.values - &(&current.gradient * step_size);
                }
            }
            let out = forward(&latent, self.params, cfg, false)?;
            let eval = crate::guidance::evaluate_record(&out.record, self.subjects, self.lambda())
                .map_err(|e| context(e, step))?;
            log.push(step, EvalKind::Prediction, false, eval.losses, out.record);
            latent = scheduler_step(&latent, &out.noise_prediction, step, &self.schedule)?;
        }

        let trace = RunTrace {
            seed: self.config.seed,
            config: self.config.clone(),
            pool: pool
                .candidates
                .iter()
                .map(|c| PoolEntry {
                    initial_total: c.initial_losses.total,
                    total: c.losses.total,
                })
                .collect(),
            selected_candidate: pool.selected,
            evaluations: log.entries,
            refinements,
            step_sizes,
            final_latent: latent.clone(),
        };
        Ok(RunOutput {
            latent,
            trace,
            records: log.records,
        })
    }
}

fn context(err: Error, step_index: usize) -> Error {
    match err {
        Error::DegenerateMask { subject, reason } => Error::DegenerateMask {
            subject,
            reason: format!("{reason} (at step {step_index})"),
        },
        other => other,
    }
}

/// Noise-pool initialization for a configuration.
pub fn init_noise<T: Scalar>(
    config: &SamplerConfig,
    params: &DenoiserParams<T>,
    subjects: &SubjectSet,
) -> Result<NoisePool<T>> {
    Sampler::new(config, params, subjects)?.init_noise()
}

/// Refinement of `latent` as performed at guided step `step_index`.
pub fn refine_latent<T: Scalar>(
    latent: &LatentState<T>,
    step_index: usize,
    config: &SamplerConfig,
    params: &DenoiserParams<T>,
    subjects: &SubjectSet,
) -> Result<(LatentState<T>, usize)> {
    Sampler::new(config, params, subjects)?.refine_latent(latent, step_index)
}

/// Full guided sampling run. `prompt_tokens` must be the tokens the
/// denoiser was built for.
pub fn run_pipeline<T: Scalar>(
    prompt_tokens: &[String],
    subjects: &SubjectSet,
    config: &SamplerConfig,
    params: &DenoiserParams<T>,
) -> Result<RunOutput<T>> {
    if prompt_tokens != params.tokens() {
        return Err(Error::config("prompt tokens differ from the denoiser's tokens"));
    }
    Sampler::new(config, params, subjects)?.run()
}
