//! Automated confounder check: a region-mean marker detector and a paired
//! comparison of detection rates on counterfactuals versus their sources.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::Rect;
use crate::error::{Error, Result};
use crate::evaluation::{fleiss_kappa, RatingMatrix};
use crate::tensor::Tensor;

/// Compared in the f32 precision of model-space images.
pub const DETECTION_THRESHOLD: f32 = 0.3;

/// True iff the mean intensity over `region` strictly exceeds 0.3.
pub fn marker_detector(img: &Tensor<f32>, region: &Rect) -> bool {
    let w = *img.shape().last().expect("image has a width");
    let h = img.shape()[img.shape().len() - 2];
    if !region.fits(h.min(w)) {
        return false;
    }
    let data = img.data();
    let sum: f64 = (region.row0..region.row1)
        .flat_map(|y| (region.col0..region.col1).map(move |x| data[y * w + x] as f64))
        .sum();
    (sum / region.area() as f64) as f32 > DETECTION_THRESHOLD
}

/// One-sided exact sign test on discordant pairs: the probability of at
/// least `gained` successes in `gained + lost` fair coin flips.
pub fn paired_binomial_p(gained: u64, lost: u64) -> f64 {
    if gained == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, gained + lost).expect("valid parameters");
    b.sf(gained - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderReport {
    pub target_class: String,
    pub n: usize,
    pub detections: usize,
    pub ratio_pct: f64,
    pub source_detections: usize,
    pub source_ratio_pct: f64,
    /// Pairs where only the counterfactual fires.
    pub gained: usize,
    /// Pairs where only the source fires.
    pub lost: usize,
    pub p_value: f64,
    pub kappa: Option<f64>,
}

/// Detection rates on paired `(source, counterfactual)` images and the
/// one-sided test that counterfactuals fire more often.
pub fn confounder_prevalence_report(
    target_class: &str,
    counterfactuals: &[Tensor<f32>],
    sources: &[Tensor<f32>],
    region: &Rect,
    ratings: Option<&RatingMatrix>,
) -> Result<ConfounderReport> {
    if counterfactuals.is_empty() {
        return Err(Error::config("explanations", "at least one is required"));
    }
    if counterfactuals.len() != sources.len() {
        return Err(Error::shape(&[sources.len()], &[counterfactuals.len()]));
    }
    let cf: Vec<bool> = counterfactuals.iter().map(|x| marker_detector(x, region)).collect();
    let src: Vec<bool> = sources.iter().map(|x| marker_detector(x, region)).collect();
    let n = cf.len();
    let detections = cf.iter().filter(|&&d| d).count();
    let source_detections = src.iter().filter(|&&d| d).count();
    let gained = cf.iter().zip(&src).filter(|(&c, &s)| c && !s).count();
    let lost = cf.iter().zip(&src).filter(|(&c, &s)| !c && s).count();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(ConfounderReport {
        target_class: target_class.to_string(),
        n,
        detections,
        ratio_pct: pct(detections),
        source_detections,
        source_ratio_pct: pct(source_detections),
        gained,
        lost,
        p_value: paired_binomial_p(gained as u64, lost as u64),
        kappa: ratings.map(fleiss_kappa).transpose()?,
    })
}
