//! Checkpoint-free checks runnable from the command line.

use serde::Serialize;

use crate::data::{gen_dataset, marker_detector, SynthConfig};
use crate::error::Result;
use crate::evaluation::{fleiss_kappa, mi_bound_check, perm_test, roc_auc, MiConfig, Posterior, RatingMatrix, ScoredSet, MI_TOLERANCE};
use crate::explanation::{manipulate_latent, ManipulationMode, ManipulationRequest};
use crate::gradcheck::{network_suite, primitive_suite};
use crate::network::{ArchConfig, DiffusionAutoencoder};
use crate::schedule::{ddim_decode, ddim_encode, NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;
use crate::training::{LogisticHead, NormalizedLatent};

#[derive(Clone, Debug, Serialize)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> SelfCheck {
    SelfCheck {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

fn gradients(seeds: u64) -> Result<Vec<SelfCheck>> {
    let mut worst_prim: f64 = 0.0;
    let mut worst_net: f64 = 0.0;
    let mut failed = Vec::new();
    for seed in 0..seeds {
        for (suite, worst) in [(primitive_suite(seed)?, &mut worst_prim), (network_suite(seed)?, &mut worst_net)] {
            for g in suite {
                *worst = worst.max(g.max_rel_err);
                if !g.passed() {
                    failed.push(format!("{}@{}", g.name, g.seed));
                }
            }
        }
    }
    Ok(vec![
        check(
            "gradients",
            failed.is_empty(),
            format!("{seeds} seeds, worst rel err {worst_prim:.2e} (primitives) {worst_net:.2e} (networks) {failed:?}"),
        ),
    ])
}

fn schedule() -> Result<Vec<SelfCheck>> {
    let s = NoiseSchedule::new(&ScheduleConfig::default())?;
    let ab = s.alpha_bar();
    let monotone = ab.windows(2).all(|w| w[1] < w[0]) && ab.iter().all(|&a| a > 0.0 && a < 1.0);
    let arch = ArchConfig::tiny(8);
    let model = DiffusionAutoencoder::new(&arch, 1)?;
    let x0 = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| ((i * 5) % 17) as f32 / 8.5 - 1.0).collect())?;
    let z = model.encode_semantic(&x0)?;
    let run = || -> Result<Tensor<f32>> { ddim_decode(&ddim_encode(&x0, &z, 50, &model, &s)?, &z, 20, &model, &s) };
    let deterministic = run()? == run()?;
    Ok(vec![
        check("alpha_bar", monotone, format!("alpha_bar[T-1] = {:.3e}", ab[ab.len() - 1])),
        check("ddim_determinism", deterministic, "encode 50 / decode 20 twice"),
    ])
}

fn statistics() -> Result<Vec<SelfCheck>> {
    let auc = roc_auc(&ScoredSet::new("x", vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1])?)?;
    let k1 = fleiss_kappa(&RatingMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]])?)?;
    let k2 = fleiss_kappa(&RatingMatrix::new(vec![vec![2, 1], vec![1, 2]])?)?;
    let scores = [0.2, 0.9, 0.4, 0.7, 0.1, 0.6];
    let p = perm_test(&scores, &scores, &[0, 1, 0, 1, 0, 1], 1000, 0)?.p_value;
    Ok(vec![
        check("auc_pairs", auc == 0.75, format!("{auc}")),
        check("fleiss_kappa", k1 == 1.0 && (k2 + 1.0 / 3.0).abs() < 1e-12, format!("{k1}, {k2}")),
        check("perm_self", p == 1.0, format!("p = {p}")),
    ])
}

fn mutual_information() -> Result<Vec<SelfCheck>> {
    let base = MiConfig {
        a: vec![vec![1.0, 0.5], vec![0.3, 0.8]],
        noise_var: 0.5,
        n_samples: 200_000,
        seed: 0,
        posterior: Posterior::Exact,
    };
    let exact = mi_bound_check(&base)?;
    let diag = mi_bound_check(&MiConfig {
        posterior: Posterior::Diagonal,
        ..base.clone()
    })?;
    Ok(vec![
        check("mi_exact", exact.gap.abs() < MI_TOLERANCE, format!("gap {:.2e}", exact.gap)),
        check(
            "mi_misspecified",
            diag.gap > 3.0 * diag.std_error,
            format!("gap {:.2e}, se {:.2e}", diag.gap, diag.std_error),
        ),
    ])
}

fn manipulation() -> Result<Vec<SelfCheck>> {
    let head = LogisticHead {
        w: vec![vec![0.7, -1.2, 0.4, 2.0]],
        b: vec![-0.2],
        class_names: vec!["disease".into()],
        stats_fingerprint: 1,
    };
    let z = NormalizedLatent {
        values: vec![0.3, 0.1, -0.8, 0.5],
        fingerprint: 1,
    };
    let req = |mode, epsilon| ManipulationRequest {
        mode,
        epsilon,
        ..ManipulationRequest::new(0)
    };
    let g = manipulate_latent(&z, &head, &req(ManipulationMode::Gradient, 0.3))?;
    let f = manipulate_latent(&z, &head, &req(ManipulationMode::ClosedFormFull, 0.3))?;
    let s = manipulate_latent(&z, &head, &req(ManipulationMode::ClosedFormSimplified, 0.3))?;
    let agree = g.values.iter().zip(&f.values).all(|(a, b)| (a - b).abs() < 1e-6);
    let norm2: f64 = head.w[0].iter().map(|w| w * w).sum();
    let gain = head.logit(&s.values, 0) - head.logit(&z.values, 0);
    let identity = manipulate_latent(&z, &head, &req(ManipulationMode::Gradient, 0.0))? == z;
    Ok(vec![
        check("manipulation_modes", agree, "gradient vs closed form"),
        check("manipulation_identity", identity, "epsilon 0"),
        check("logit_gain", (gain - 0.3 * norm2).abs() < 1e-5, format!("{gain} vs {}", 0.3 * norm2)),
    ])
}

fn synthetic_data() -> Result<Vec<SelfCheck>> {
    let cfg = SynthConfig {
        n_samples: 2000,
        ..SynthConfig::default()
    };
    let recs = gen_dataset(&cfg)?;
    let agree = recs
        .iter()
        .filter(|r| marker_detector(&r.image, &cfg.marker_region) == (r.confounder == 1))
        .count() as f64
        / recs.len() as f64;
    let sick: Vec<_> = recs.iter().filter(|r| r.disease == 1).collect();
    let rate = sick.iter().filter(|r| r.confounder == 1).count() as f64 / sick.len() as f64;
    let se = (0.9 * 0.1 / sick.len() as f64).sqrt();
    Ok(vec![
        check("detector_agreement", agree >= 0.99, format!("{agree:.4}")),
        check("confounder_rate", (rate - 0.9).abs() < 3.0 * se, format!("{rate:.4}")),
    ])
}

/// Runs every checkpoint-free check; gradient suites use seeds `0..seeds`.
pub fn run(seeds: u64) -> Result<Vec<SelfCheck>> {
    let mut out = Vec::new();
    for part in [gradients(seeds)?, schedule()?, statistics()?, mutual_information()?, manipulation()?, synthetic_data()?] {
        for c in &part {
            log::info!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out.extend(part);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let checks = super::run(1).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}
