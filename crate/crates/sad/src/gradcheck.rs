//! Central-difference gradient verification for the loss kernels.
//!
//! The finite-difference probe is deliberately independent of the analytic
//! gradients: it only ever evaluates loss *values*. Training code is not
//! trusted until this suite passes.

use crate::error::{Error, Result};
use crate::loss::{
    adl, fdl, focal_loss, focal_shared_joint, kl_binary, l2_mimic, HardLabel, LossHyperparams,
    SampleTerm,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative tolerance of the kernel gradient suite.
pub const GRAD_REL_TOL: f64 = 1e-6;

/// Step used by the kernel suite; well inside the supported range.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Central difference `(f(x+h) - f(x-h)) / (2h)`.
pub fn fd_gradient(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let fp = f(x + h);
    let fm = f(x - h);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::Oracle(format!(
            "non-finite evaluation near x={x}: f(x+h)={fp}, f(x-h)={fm}"
        )));
    }
    Ok((fp - fm) / (2.0 * h))
}

pub fn relative_gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Outcome of checking one kernel over many randomized configurations.
#[derive(Debug, Clone)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Check {
    name: &'static str,
    value: Box<dyn Fn(f64) -> f64>,
    analytic: f64,
}

fn checks_for(
    z: f64,
    q: f64,
    label: HardLabel,
    hp: LossHyperparams,
    zt: f64,
) -> Result<Vec<Check>> {
    let term = SampleTerm::labeled(z, q, label)?;
    let mut out = Vec::with_capacity(6);

    let h = hp;
    out.push(Check {
        name: "focal",
        analytic: focal_loss(&term, &h)?.grad_logit,
        value: Box::new(move |x| {
            focal_loss(&SampleTerm::labeled(x, q, label).unwrap(), &h)
                .unwrap()
                .value
        }),
    });
    out.push(Check {
        name: "kl",
        analytic: kl_binary(&term, &h)?.grad_logit,
        value: Box::new(move |x| {
            kl_binary(&SampleTerm::soft(x, q).unwrap(), &h).unwrap().value
        }),
    });
    out.push(Check {
        name: "joint",
        analytic: focal_shared_joint(&term, &h)?.grad_logit,
        value: Box::new(move |x| {
            focal_shared_joint(&SampleTerm::labeled(x, q, label).unwrap(), &h)
                .unwrap()
                .value
        }),
    });
    out.push(Check {
        name: "fdl",
        analytic: fdl(&term, &h)?.grad_logit,
        value: Box::new(move |x| {
            fdl(&SampleTerm::labeled(x, q, label).unwrap(), &h)
                .unwrap()
                .value
        }),
    });
    out.push(Check {
        name: "adl",
        analytic: adl(&term, &h)?.grad_logit,
        value: Box::new(move |x| {
            adl(&SampleTerm::soft(x, q).unwrap(), &h).unwrap().value
        }),
    });
    out.push(Check {
        name: "l2_mimic",
        analytic: l2_mimic(&[z], &[zt])?.grads[0],
        value: Box::new(move |x| l2_mimic(&[x], &[zt]).unwrap().value),
    });
    Ok(out)
}

/// Run the randomized kernel gradient suite: `trials` configurations per
/// kernel, each comparing the analytic gradient against central finite
/// differences at relative tolerance [`GRAD_REL_TOL`].
///
/// `perturb` injects a deliberate bias into the analytic side and exists as
/// a negative control for the suite itself.
pub fn run_suite(trials: usize, seed: u64, perturb: bool) -> Result<Vec<KernelReport>> {
    if trials == 0 {
        return Err(Error::usage("gradcheck needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas = [0.0, 1.0, 2.0, 5.0];
    let betas = [0.0, 0.5, 1.0, 1.5];
    let alphas = [1.0, 0.25];

    let names = ["focal", "kl", "joint", "fdl", "adl", "l2_mimic"];
    let mut reports: Vec<KernelReport> = names
        .iter()
        .map(|&kernel| KernelReport {
            kernel,
            trials: 0,
            failures: 0,
            max_rel_err: 0.0,
        })
        .collect();

    for _ in 0..trials {
        let z = rng.gen_range(-6.0..6.0);
        let q = rng.gen_range(0.02..0.98);
        let zt = rng.gen_range(-6.0..6.0);
        let label = if rng.gen_bool(0.5) {
            HardLabel::Positive
        } else {
            HardLabel::Negative
        };
        let hp = LossHyperparams {
            gamma: gammas[rng.gen_range(0..gammas.len())],
            beta: betas[rng.gen_range(0..betas.len())],
            alpha: alphas[rng.gen_range(0..alphas.len())],
            ..LossHyperparams::default()
        };
        for (i, check) in checks_for(z, q, label, hp, zt)?.into_iter().enumerate() {
            let numeric = fd_gradient(&check.value, z, DEFAULT_STEP)?;
            let analytic = if perturb {
                check.analytic + 1e-3
            } else {
                check.analytic
            };
            let err = relative_gradient_error(analytic, numeric);
            let report = &mut reports[i];
            debug_assert_eq!(report.kernel, check.name);
            report.trials += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > GRAD_REL_TOL {
                report.failures += 1;
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_identity_and_square() {
        assert!((fd_gradient(|x| x, 3.7, 1e-5).unwrap() - 1.0).abs() < 1e-10);
        // exact for quadratics up to roundoff
        assert!((fd_gradient(|x| x * x, 3.0, 1e-5).unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_bad_step_and_nan() {
        assert!(fd_gradient(|x| x, 0.0, 1e-2).is_err());
        assert!(matches!(
            fd_gradient(|_| f64::NAN, 0.0, 1e-5),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn suite_passes_on_default_seed() {
        let reports = run_suite(200, 1234, false).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} failed: max err {}", r.kernel, r.max_rel_err);
        }
    }

    #[test]
    fn suite_detects_injected_error() {
        let reports = run_suite(50, 1234, true).unwrap();
        assert!(reports.iter().any(|r| !r.passed()));
    }

    #[test]
    fn zero_trials_is_usage_error() {
        assert!(matches!(run_suite(0, 1, false), Err(Error::Usage(_))));
    }

    #[test]
    fn adl_fd_matches_analytic_spot() {
        let hp = LossHyperparams::default();
        let q = 0.37;
        let term = SampleTerm::soft(0.8, q).unwrap();
        let analytic = adl(&term, &hp).unwrap().grad_logit;
        let numeric = fd_gradient(
            |x| adl(&SampleTerm::soft(x, q).unwrap(), &hp).unwrap().value,
            0.8,
            1e-6,
        )
        .unwrap();
        assert!(relative_gradient_error(analytic, numeric) <= GRAD_REL_TOL);
    }

    #[test]
    fn detached_weight_gradient_is_weighted_kl_grad() {
        let hp = LossHyperparams {
            detach_weight: true,
            ..LossHyperparams::default()
        };
        let q = 0.3;
        let term = SampleTerm::soft(1.1, q).unwrap();
        let r = adl(&term, &hp).unwrap();
        let kl = kl_binary(&term, &hp).unwrap();
        let w = r.value / kl.value;
        assert!((r.grad_logit - w * kl.grad_logit).abs() < 1e-14);
    }
}
