use anyhow::bail;
use selfcross::gradcheck::run_gradcheck_with;
use selfcross::GradcheckConfig;

use crate::usage;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Maximum relative error per coordinate.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Coordinates checked per trial.
    #[arg(long, default_value_t = 10)]
    coordinates: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if !(args.tolerance > 0.0) || !(args.step > 0.0) {
        return Err(usage("--tolerance and --step must be positive"));
    }
    if args.trials == 0 {
        eprintln!("warning: 0 trials requested; nothing was checked");
        println!("gradcheck: pass (vacuous)");
        return Ok(());
    }
    let config = GradcheckConfig {
        trials: args.trials,
        coordinates: args.coordinates,
        step: args.step,
        tolerance: args.tolerance,
        seed: args.seed,
        ..Default::default()
    };
    let report = run_gradcheck_with(&config, |g| {
        if args.inject_sign_flip {
            g.mapv_inplace(|v| -v);
        }
    })?;
    for f in &report.failures {
        println!(
            "FAIL trial {} seed {} coordinate (patch {}, channel {}): analytic {:.6e} numeric {:.6e} relative error {:.3e}",
            f.trial, f.seed, f.patch, f.channel, f.analytic, f.numeric, f.relative_error
        );
    }
    println!(
        "gradcheck: {} trials, {} coordinates, max relative error {:.3e}, {} resampled trial(s), {} resampled coordinate(s)",
        args.trials,
        report.checks.len(),
        report.max_relative_error,
        report.resampled_trials,
        report.resampled_coordinates
    );
    if !report.passed() {
        bail!(
            "{} of {} coordinates exceed tolerance {}",
            report.failures.len(),
            report.checks.len(),
            args.tolerance
        );
    }
    println!("gradcheck: pass");
    Ok(())
}
