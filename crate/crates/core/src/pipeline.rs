//! Stages that tie the modules together: latent encoding, head finetuning
//! on a pretrained model, classifier evaluation and the data-efficiency
//! sweep.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result, StageExt};
use crate::explanation::{calibrate_epsilon, ManipulationRequest};
use crate::evaluation::{evaluate_scores, format_p, perm_test, EvalReport, DEFAULT_PERMUTATIONS};
use crate::network::{Checkpoint, DiffusionAutoencoder};
use crate::tensor::Tensor;
use crate::training::{compute_latent_stats, fit_head, normalize_latent, HeadConfig, LatentStats, LogisticHead};

/// Images per encoder forward pass.
pub const ENCODE_BATCH: usize = 64;

/// The toy set has a single finding.
pub const DISEASE_CLASS: &str = "disease";

pub fn class_names() -> Vec<String> {
    vec![DISEASE_CLASS.to_string()]
}

pub fn label_rows(records: &[SampleRecord]) -> Vec<Vec<u8>> {
    records.iter().map(|r| vec![r.disease]).collect()
}

/// Raw semantic latents of `images`, each `(c, h, w)`.
pub fn encode_latents(model: &DiffusionAutoencoder, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_BATCH) {
        let batch = Tensor::stack(&chunk.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        let z = model.encode_semantic(&batch)?;
        out.extend(z.unstack().iter().map(|r| r.data().iter().map(|&v| v as f64).collect::<Vec<f64>>()));
    }
    Ok(out)
}

pub fn encode_records(model: &DiffusionAutoencoder, records: &[SampleRecord]) -> Result<Vec<Vec<f64>>> {
    encode_latents(model, &records.iter().map(|r| &r.image).collect::<Vec<_>>())
}

/// Seeded sample of `round(fraction·n)` indices (at least 2), ascending.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("subset", "must lie in (0, 1]"));
    }
    let k = ((n as f64 * fraction).round() as usize).max(2);
    if k > n {
        return Err(Error::config("subset", format!("{n} records are too few")));
    }
    let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub seed: u64,
    /// Fraction of the labeled set used, sampled with `seed`.
    pub subset: f64,
    /// Permute the labels (with `seed`) before fitting; a chance-level
    /// control.
    pub shuffle_labels: bool,
    pub head: HeadConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            seed: 0,
            subset: 1.0,
            shuffle_labels: false,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// The pretrained weights plus latent statistics and head.
    pub checkpoint: Checkpoint,
    pub n_train: usize,
    pub zero_positive: Vec<String>,
    pub epochs_run: usize,
    /// `(images_shown, mean training BCE)` per epoch.
    pub loss_curve: Vec<(u64, f64)>,
}

/// Fits a logistic head on frozen latents of a seeded subset. Statistics
/// are computed over the whole subset used for finetuning.
pub fn finetune(pretrained: &Checkpoint, records: &[SampleRecord], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let model = DiffusionAutoencoder::from_params(&pretrained.header.arch, pretrained.params.clone())?;
    let idx = subset_indices(records.len(), cfg.subset, cfg.seed).stage("subset")?;
    let picked: Vec<SampleRecord> = idx.iter().map(|&i| records[i].clone()).collect();
    let raw = encode_records(&model, &picked).stage("encode_semantic")?;
    fit_encoded(pretrained, &picked, raw, cfg)
}

/// Head fit on already encoded records (`raw[i]` belongs to `picked[i]`).
fn fit_encoded(
    pretrained: &Checkpoint,
    picked: &[SampleRecord],
    raw: Vec<Vec<f64>>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let picked = if cfg.shuffle_labels {
        shuffle_labels(picked, cfg.seed)
    } else {
        picked.to_vec()
    };
    let stats = compute_latent_stats(&raw).stage("latent_stats")?;
    let zs = raw
        .iter()
        .map(|z| normalize_latent(z, &stats))
        .collect::<Result<Vec<_>>>()?;
    let head_cfg = HeadConfig {
        seed: cfg.seed,
        ..cfg.head.clone()
    };
    let fit = fit_head(&zs, &label_rows(&picked), &class_names(), &head_cfg).stage("fit_head")?;
    let loss_curve = fit
        .train_curve
        .iter()
        .enumerate()
        .map(|(e, &l)| (((e + 1) * fit.train_examples) as u64, l))
        .collect();
    let mut checkpoint = Checkpoint {
        header: pretrained.header.clone(),
        params: pretrained.params.clone(),
        optimizer: None,
    };
    checkpoint.header.seed = cfg.seed;
    checkpoint.header.optimizer_step = None;
    checkpoint.header.latent_stats = Some(stats);
    checkpoint.header.head = Some(fit.head);
    Ok(FinetuneOutcome {
        checkpoint,
        n_train: picked.len(),
        zero_positive: fit.zero_positive,
        epochs_run: fit.epochs_run,
        loss_curve,
    })
}

/// Chance-level control: test-set head probabilities of `shuffles` heads,
/// each finetuned with permuted labels. Head `s` is exactly
/// `finetune(pretrained, train, cfg)` with seed `cfg.seed + s` and
/// `shuffle_labels` set; images are encoded once.
pub fn shuffled_label_scores(
    pretrained: &Checkpoint,
    train: &[SampleRecord],
    test: &[SampleRecord],
    cfg: &FinetuneConfig,
    shuffles: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let model = DiffusionAutoencoder::from_params(&pretrained.header.arch, pretrained.params.clone())?;
    let raw_train = encode_records(&model, train).stage("encode_semantic")?;
    let raw_test = encode_records(&model, test).stage("encode_semantic")?;
    (0..shuffles as u64)
        .map(|s| {
            let c = FinetuneConfig {
                seed: cfg.seed + s,
                shuffle_labels: true,
                ..cfg.clone()
            };
            let idx = subset_indices(train.len(), c.subset, c.seed).stage("subset")?;
            let picked: Vec<SampleRecord> = idx.iter().map(|&i| train[i].clone()).collect();
            let raw = idx.iter().map(|&i| raw_train[i].clone()).collect();
            let ckpt = fit_encoded(pretrained, &picked, raw, &c)?.checkpoint;
            let (stats, head) = (ckpt.header.latent_stats.unwrap(), ckpt.header.head.unwrap());
            raw_test
                .iter()
                .map(|z| Ok(head.probs(&normalize_latent(z, &stats)?.values)))
                .collect()
        })
        .collect()
}

/// Model, statistics and head out of a finetuned checkpoint.
pub fn classifier_parts(ckpt: &Checkpoint) -> Result<(DiffusionAutoencoder, LatentStats, LogisticHead)> {
    let stats = ckpt
        .header
        .latent_stats
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "no latent statistics; run finetune first"))?;
    let head = ckpt
        .header
        .head
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "no classification head; run finetune first"))?;
    head.validate()?;
    let model = DiffusionAutoencoder::from_params(&ckpt.header.arch, ckpt.params.clone())?;
    Ok((model, stats, head))
}

/// Step factor for `req` calibrated so the mean target-class probability of
/// the manipulated latents of `records` reaches `target_prob`.
pub fn calibrate_request(
    model: &DiffusionAutoencoder,
    stats: &LatentStats,
    head: &LogisticHead,
    records: &[SampleRecord],
    req: &ManipulationRequest,
    target_prob: f64,
) -> Result<ManipulationRequest> {
    let latents = encode_records(model, records)?
        .iter()
        .map(|z| normalize_latent(z, stats))
        .collect::<Result<Vec<_>>>()?;
    let epsilon = calibrate_epsilon(&latents, head, req, target_prob)?;
    Ok(ManipulationRequest { epsilon, ..req.clone() })
}

/// Head probabilities for every record, one row per record.
pub fn predict(ckpt: &Checkpoint, records: &[SampleRecord]) -> Result<Vec<Vec<f64>>> {
    let (model, stats, head) = classifier_parts(ckpt)?;
    encode_records(&model, records)?
        .iter()
        .map(|z| Ok(head.probs(&normalize_latent(z, &stats)?.values)))
        .collect()
}

pub fn evaluate_classifier(ckpt: &Checkpoint, records: &[SampleRecord], redraws: usize, seed: u64) -> Result<EvalReport> {
    let names = ckpt.header.head.as_ref().map(|h| h.class_names.clone()).unwrap_or_default();
    let scores = predict(ckpt, records).stage("predict")?;
    evaluate_scores(&names, &scores, &label_rows(records), redraws, seed)
}

/// Copy of `records` with disease labels permuted by `seed`.
pub fn shuffle_labels(records: &[SampleRecord], seed: u64) -> Vec<SampleRecord> {
    let mut labels: Vec<u8> = records.iter().map(|r| r.disease).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    records
        .iter()
        .zip(labels)
        .map(|(r, d)| SampleRecord { disease: d, ..r.clone() })
        .collect()
}

pub const DATA_EFFICIENCY_FRACTIONS: [f64; 3] = [1.0, 0.1, 0.03];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub n_train: usize,
    pub class: String,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Paired permutation test against the largest fraction; `None` on
    /// that row itself.
    pub p_vs_full: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyReport {
    pub seed: u64,
    pub redraws: usize,
    pub n_test: usize,
    pub rows: Vec<EfficiencyRow>,
    /// AUC never rises by more than the larger subset's CI half-width as
    /// the fraction shrinks.
    pub monotone_or_flat: bool,
}

impl DataEfficiencyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# seed={}\nfraction,n_train,class,auc,ci_lo,ci_hi,p_vs_full\n", self.seed);
        for r in &self.rows {
            s += &format!(
                "{},{},{},{:.3},{:.3},{:.3},{}\n",
                r.fraction,
                r.n_train,
                r.class,
                r.auc,
                r.ci_lo,
                r.ci_hi,
                r.p_vs_full.map(format_p).unwrap_or_default()
            );
        }
        s
    }
}

/// Finetunes one head per fraction (largest first) and scores each on
/// `test`.
pub fn data_efficiency(
    pretrained: &Checkpoint,
    train: &[SampleRecord],
    test: &[SampleRecord],
    fractions: &[f64],
    base: &FinetuneConfig,
    redraws: usize,
    permutations: usize,
) -> Result<DataEfficiencyReport> {
    let mut fractions = fractions.to_vec();
    if fractions.is_empty() {
        return Err(Error::config("fractions", "need at least one"));
    }
    fractions.sort_by(|a, b| b.total_cmp(a));
    let labels = label_rows(test);
    let mut rows: Vec<EfficiencyRow> = Vec::new();
    let mut full_scores: Option<Vec<Vec<f64>>> = None;
    for &fraction in &fractions {
        let cfg = FinetuneConfig {
            subset: fraction,
            ..base.clone()
        };
        let out = finetune(pretrained, train, &cfg)?;
        let scores = predict(&out.checkpoint, test)?;
        let report = evaluate_scores(&class_names(), &scores, &labels, redraws, base.seed)?;
        for (k, row) in report.classes.iter().enumerate() {
            let p_vs_full = match &full_scores {
                Some(full) => {
                    let col = |s: &[Vec<f64>]| s.iter().map(|r| r[k]).collect::<Vec<f64>>();
                    let lab: Vec<u8> = labels.iter().map(|r| r[k]).collect();
                    Some(perm_test(&col(full), &col(&scores), &lab, permutations, base.seed)?.p_value)
                }
                None => None,
            };
            rows.push(EfficiencyRow {
                fraction,
                n_train: out.n_train,
                class: row.class.clone(),
                auc: row.auc,
                ci_lo: row.ci_lo,
                ci_hi: row.ci_hi,
                p_vs_full,
            });
        }
        full_scores.get_or_insert(scores);
    }
    let monotone_or_flat = rows.iter().all(|small| {
        rows.iter()
            .filter(|big| big.class == small.class && big.fraction > small.fraction)
            .all(|big| small.auc <= big.auc + (big.ci_hi - big.ci_lo) / 2.0)
    });
    Ok(DataEfficiencyReport {
        seed: base.seed,
        redraws,
        n_test: test.len(),
        rows,
        monotone_or_flat,
    })
}

/// [`data_efficiency`] at the default fractions and permutation count.
pub fn default_data_efficiency(
    pretrained: &Checkpoint,
    train: &[SampleRecord],
    test: &[SampleRecord],
    base: &FinetuneConfig,
    redraws: usize,
) -> Result<DataEfficiencyReport> {
    data_efficiency(pretrained, train, test, &DATA_EFFICIENCY_FRACTIONS, base, redraws, DEFAULT_PERMUTATIONS)
}
