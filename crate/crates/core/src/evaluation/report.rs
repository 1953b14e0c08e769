//! Per-class AUC reports with bootstrap intervals and optional paired
//! comparisons against a reference classifier.

use serde::{Deserialize, Serialize};

use super::auc::{bootstrap_ci, perm_test, roc_auc, ScoredSet};
use crate::error::{Error, Result};

/// Classes need more than this many positives to be reported.
pub const MIN_POSITIVES: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub n_pos: usize,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedClass {
    pub class: String,
    pub n_pos: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub class: String,
    pub reference: ClassRow,
    /// AUC − reference AUC.
    pub delta: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTable {
    pub name: String,
    pub rows: Vec<KappaRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub item: String,
    pub ratio_pct: f64,
    pub kappa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub redraws: usize,
    pub n_samples: usize,
    pub classes: Vec<ClassRow>,
    pub excluded: Vec<ExcludedClass>,
    pub mean_auc: Option<f64>,
    pub comparisons: Vec<Comparison>,
    pub kappa_tables: Vec<KappaTable>,
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

fn label_column(rows: &[Vec<u8>], j: usize) -> Vec<u8> {
    rows.iter().map(|r| r[j]).collect()
}

fn check_inputs(class_names: &[String], scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::config("dataset", "empty"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[scores.len()]));
    }
    let k = class_names.len();
    if let Some(r) = scores.iter().find(|r| r.len() != k) {
        return Err(Error::shape(&[k], &[r.len()]));
    }
    if let Some(r) = labels.iter().find(|r| r.len() != k) {
        return Err(Error::shape(&[k], &[r.len()]));
    }
    Ok(())
}

/// `scores[i][k]` and `labels[i][k]` for sample `i`, class `k`.
pub fn evaluate_scores(
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    redraws: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_inputs(class_names, scores, labels)?;
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let set = ScoredSet::new(name.clone(), column(scores, k), label_column(labels, k))?;
        let n_pos = set.positives();
        let reason = if n_pos <= MIN_POSITIVES {
            Some(format!("{n_pos} positives, more than {MIN_POSITIVES} required"))
        } else if n_pos == set.labels.len() {
            Some("no negatives".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            excluded.push(ExcludedClass {
                class: name.clone(),
                n_pos,
                reason,
            });
            continue;
        }
        let auc = roc_auc(&set)?;
        // one seed stream per class so reports do not depend on class order
        let (ci_lo, ci_hi) = bootstrap_ci(&set, redraws, seed.wrapping_add(k as u64))?;
        classes.push(ClassRow {
            class: name.clone(),
            n_pos,
            auc,
            ci_lo,
            ci_hi,
        });
    }
    let mean_auc = (!classes.is_empty()).then(|| classes.iter().map(|c| c.auc).sum::<f64>() / classes.len() as f64);
    Ok(EvalReport {
        seed,
        redraws,
        n_samples: scores.len(),
        classes,
        excluded,
        mean_auc,
        comparisons: Vec::new(),
        kappa_tables: Vec::new(),
    })
}

impl EvalReport {
    /// Adds a paired permutation comparison against reference scores for
    /// every reported class.
    pub fn compare_with(
        &mut self,
        class_names: &[String],
        scores: &[Vec<f64>],
        reference: &[Vec<f64>],
        labels: &[Vec<u8>],
        permutations: usize,
    ) -> Result<()> {
        check_inputs(class_names, reference, labels)?;
        let reference_report = evaluate_scores(class_names, reference, labels, self.redraws, self.seed)?;
        for row in &self.classes {
            let k = class_names.iter().position(|c| *c == row.class).expect("reported class exists");
            let r = reference_report
                .classes
                .iter()
                .find(|r| r.class == row.class)
                .expect("same labels give the same exclusions")
                .clone();
            let t = perm_test(
                &column(scores, k),
                &column(reference, k),
                &label_column(labels, k),
                permutations,
                self.seed.wrapping_add(k as u64),
            )?;
            self.comparisons.push(Comparison {
                class: row.class.clone(),
                reference: r,
                delta: t.delta,
                p: t.p_value,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per reported class: the AUC with its interval and, when a
    /// comparison was run, the reference AUC, its interval and the p-value.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# seed={}\nclass,n_pos,auc,ci_lo,ci_hi,reference_auc,reference_ci_lo,reference_ci_hi,p_value\n",
            self.seed
        );
        for c in &self.classes {
            out.push_str(&format!("{},{},{:.3},{:.3},{:.3}", c.class, c.n_pos, c.auc, c.ci_lo, c.ci_hi));
            match self.comparisons.iter().find(|m| m.class == c.class) {
                Some(m) => out.push_str(&format!(
                    ",{:.3},{:.3},{:.3},{}\n",
                    m.reference.auc,
                    m.reference.ci_lo,
                    m.reference.ci_hi,
                    format_p(m.p)
                )),
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }
}

/// Three decimals, or `<1e-4` below that resolution.
pub fn format_p(p: f64) -> String {
    if p < 1e-4 {
        "<1e-4".to_string()
    } else {
        format!("{p:.3}")
    }
}
