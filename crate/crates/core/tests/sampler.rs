use selfcross::gradcheck::draw_trial;
use selfcross::sampler::EvalKind;
use selfcross::{
    evaluate, forward, losses_at, refine_latent, run_pipeline, scheduler_step, DenoiserConfig, DenoiserParams,
    LatentState, Sampler, SamplerConfig, SubjectSet,
};

fn tokens() -> Vec<String> {
    ["<|startoftext|>", "a", "cat", "and", "a", "dog"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn params(seed: u64) -> DenoiserParams<f64> {
    DenoiserParams::new(
        DenoiserConfig {
            seed,
            ..Default::default()
        },
        tokens(),
    )
    .unwrap()
}

fn subjects() -> SubjectSet {
    SubjectSet::new(vec![2, 5]).unwrap()
}

fn short_config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        total_steps: 12,
        guidance_steps: 6,
        refinement_steps: [2].into(),
        noise_opt_rounds: 3,
        seed,
        ..Default::default()
    }
}

fn bits(latent: &LatentState<f64>) -> Vec<u64> {
    latent.values.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn gradient_is_linear_in_lambda() {
    for seed in 0..10 {
        let t = draw_trial(seed, 0).unwrap();
        let g = |lambda: f64| evaluate(&t.latent, &t.params, &t.subjects, lambda).unwrap().gradient;
        let (g0, g1, g2) = (g(0.0), g(1.0), g(2.0));
        let lhs = &g2 - &g0;
        let rhs = (&g1 - &g0) * 2.0;
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn small_gradient_steps_descend() {
    let trials = 60;
    let mut descended = 0;
    for seed in 0..trials {
        let t = draw_trial(1000 + seed, 0).unwrap();
        let e = evaluate(&t.latent, &t.params, &t.subjects, t.lambda).unwrap();
        let norm = e.gradient.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut z = t.latent.clone();
        z.values = &z.values - &(&e.gradient * (1e-4 / norm.max(1e-12)));
        let (after, _) = losses_at(&z, &t.params, &t.subjects, t.lambda).unwrap();
        if after.total <= e.losses.total {
            descended += 1;
        }
    }
    assert!(descended as f64 >= 0.95 * trials as f64, "{descended}/{trials}");
}

#[test]
fn refinement_exits_on_thresholds_or_cap_and_never_worsens() {
    let config = SamplerConfig::default();
    let mut checked = 0;
    for seed in 0..10 {
        let p = params(seed);
        let cfg = SamplerConfig { seed, ..config.clone() };
        let s = subjects();
        let sampler = Sampler::new(&cfg, &p, &s).unwrap();
        let mut latent = sampler.candidate_noise(0);
        latent.timestep = sampler.schedule().timestep(10) as i32;
        let (before, _) = losses_at(&latent, &p, &subjects(), 1.0).unwrap();
        if !before.exceeds(cfg.tau_cross, cfg.tau_self_cross) {
            continue;
        }
        checked += 1;
        let (refined, iterations) = refine_latent(&latent, 10, &cfg, &p, &subjects()).unwrap();
        let (after, _) = losses_at(&refined, &p, &subjects(), 1.0).unwrap();
        assert!(!after.exceeds(cfg.tau_cross, cfg.tau_self_cross) || iterations == cfg.tau_max_iter);
        assert!(
            after.total <= before.total,
            "seed {seed}: {} > {}",
            after.total,
            before.total
        );
    }
    assert!(checked >= 5);
}

#[test]
fn refinement_guard_and_cap() {
    let p = params(3);
    let mut cfg = SamplerConfig {
        tau_cross: 10.0,
        tau_self_cross: 10.0,
        ..Default::default()
    };
    let latent = Sampler::new(&cfg, &p, &subjects()).unwrap().candidate_noise(0);
    let (out, n) = refine_latent(&latent, 10, &cfg, &p, &subjects()).unwrap();
    assert_eq!(n, 0);
    assert_eq!(bits(&out), bits(&latent));
    cfg.tau_cross = 1e-9;
    cfg.tau_self_cross = 1e-9;
    cfg.tau_max_iter = 0;
    let (out, n) = refine_latent(&latent, 10, &cfg, &p, &subjects()).unwrap();
    assert_eq!(n, 0);
    assert_eq!(bits(&out), bits(&latent));
}

#[test]
fn disabled_guidance_is_plain_sampling() {
    let p = params(0);
    let cfg = SamplerConfig {
        guidance_steps: 0,
        refinement_steps: Default::default(),
        total_steps: 20,
        ..Default::default()
    };
    let out = run_pipeline(&tokens(), &subjects(), &cfg, &p).unwrap();
    assert!(out.trace.evaluations.iter().all(|e| !e.gradient));
    assert!(out.trace.step_sizes.is_empty());
    assert!(out.trace.refinements.is_empty());

    let s = subjects();
    let sampler = Sampler::new(&cfg, &p, &s).unwrap();
    let mut z = sampler.init_noise().unwrap().selected_candidate().latent.clone();
    for step in 0..cfg.total_steps {
        z.timestep = sampler.schedule().timestep(step) as i32;
        let pred = forward(&z, &p, cfg.cfg_scale, false).unwrap().noise_prediction;
        z = scheduler_step(&z, &pred, step, sampler.schedule()).unwrap();
    }
    assert_eq!(bits(&out.latent), bits(&z));
}

#[test]
fn reruns_are_bit_identical() {
    let p = params(4);
    let cfg = short_config(9);
    let a = run_pipeline(&tokens(), &subjects(), &cfg, &p).unwrap();
    let b = run_pipeline(&tokens(), &subjects(), &cfg, &p).unwrap();
    assert_eq!(bits(&a.latent), bits(&b.latent));
    assert_eq!(
        serde_json::to_string(&a.trace).unwrap(),
        serde_json::to_string(&b.trace).unwrap()
    );
    let c = run_pipeline(&tokens(), &subjects(), &short_config(10), &p).unwrap();
    assert_ne!(bits(&a.latent), bits(&c.latent));
}

#[test]
fn trace_structure() {
    let p = params(1);
    let cfg = short_config(2);
    let out = run_pipeline(&tokens(), &subjects(), &cfg, &p).unwrap();
    let t = &out.trace;
    assert_eq!(out.records.len(), t.evaluations.len());
    for step in 0..cfg.total_steps {
        assert!(t.at(step, EvalKind::Prediction).is_some());
        assert_eq!(t.at(step, EvalKind::Guidance).is_some(), step < cfg.guidance_steps);
    }
    assert!(t
        .evaluations
        .iter()
        .filter(|e| e.gradient)
        .all(|e| e.step_index < cfg.guidance_steps));
    for r in &t.refinements {
        assert!(cfg.refinement_steps.contains(&r.step_index));
        assert!(r.entry_losses.exceeds(cfg.tau_cross, cfg.tau_self_cross));
    }
    assert_eq!(t.step_sizes.len(), cfg.guidance_steps);
    assert!(t.step_sizes.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(t.final_latent, out.latent);
    assert_eq!(out.latent.timestep, 0);
}

#[test]
fn noise_pool_selects_minimum() {
    for seed in 0..5 {
        let p = params(seed);
        let cfg = SamplerConfig {
            noise_pool_size: 5,
            noise_opt_rounds: 5,
            seed,
            ..Default::default()
        };
        let pool = Sampler::new(&cfg, &p, &subjects()).unwrap().init_noise().unwrap();
        let best = pool.selected_candidate().losses.total;
        assert!(pool.candidates.iter().all(|c| best <= c.losses.total));
        let first = pool.candidates.iter().position(|c| c.losses.total == best).unwrap();
        assert_eq!(first, pool.selected);
    }
}

#[test]
fn invalid_configuration_fails_before_compute() {
    let p = params(0);
    let cfg = SamplerConfig {
        refinement_steps: [30].into(),
        ..Default::default()
    };
    assert!(run_pipeline(&tokens(), &subjects(), &cfg, &p).is_err());
    let bad = SubjectSet::new(vec![2, 9]).unwrap();
    assert!(run_pipeline(&tokens(), &bad, &SamplerConfig::default(), &p).is_err());
    assert!(run_pipeline(&tokens()[..5], &subjects(), &SamplerConfig::default(), &p).is_err());
}

#[test]
fn config_accepts_alter_step_alias() {
    let cfg: SamplerConfig = serde_json::from_str(r#"{"tau_max_alter_step": 10, "refinement_steps": [5]}"#).unwrap();
    assert_eq!(cfg.guidance_steps, 10);
    assert_eq!(cfg.total_steps, 50);
}
