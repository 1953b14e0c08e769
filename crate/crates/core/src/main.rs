use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use diffae::data::{
    confounder_prevalence_report, gen_dataset, load_dataset, save_dataset, stack_images, write_pgm, Pgm, Rect,
    SampleRecord, SynthConfig,
};
use diffae::evaluation::{mi_bound_check, MiConfig, DEFAULT_REDRAWS};
use diffae::explanation::{
    epsilon_for_step_length, generate_explanations, reconstruct, write_montage, ManipulationMode, ManipulationRequest, MontageCell,
    DEFAULT_EPSILON,
};
use diffae::network::{Checkpoint, DiffusionAutoencoder};
use diffae::pipeline::{
    classifier_parts, data_efficiency, evaluate_classifier, finetune, FinetuneConfig, DATA_EFFICIENCY_FRACTIONS,
    DISEASE_CLASS,
};
use diffae::schedule::{NoiseSchedule, DEFAULT_ENCODE_STEPS, DEFAULT_EXPLAIN_STEPS, DEFAULT_RECONSTRUCT_STEPS};
use diffae::training::{pretrain, rolling_endpoints, PretrainConfig, LOSS_CSV_HEADER};
use diffae::{Error, Result};

#[derive(Parser)]
#[command(name = "diffae", version, about = "Diffusion autoencoder pretraining, classification and counterfactual explanations")]
struct Cli {
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-confounder synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion autoencoder on unlabeled images.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit the logistic head on frozen latents.
    Finetune {
        #[command(flatten)]
        io: StageIo,
        /// Fraction of the labeled set to use (overrides the config).
        #[arg(long)]
        subset: Option<f64>,
    },
    /// Generate counterfactual explanations.
    Explain {
        #[command(flatten)]
        io: StageIo,
        /// Target class name (overrides the config).
        #[arg(long)]
        target: Option<String>,
        /// Step factor in standardized latent units (overrides the config).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Calibrate the step factor so the mean counterfactual probability
        /// reaches this value (overrides --epsilon).
        #[arg(long)]
        target_prob: Option<f64>,
        /// Move each latent this many standardized units along the target
        /// class's weight row (overrides --epsilon).
        #[arg(long)]
        step_length: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Encode and decode images with their own latents.
    Reconstruct {
        #[command(flatten)]
        io: StageIo,
    },
    /// Score a finetuned classifier: AUCs with bootstrap intervals.
    Eval {
        #[command(flatten)]
        io: StageIo,
    },
    /// Finetune on shrinking seeded subsets and compare AUCs.
    Efficiency {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled finetuning set.
        #[arg(long)]
        train: PathBuf,
        /// Labeled test set.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerically verify the mutual-information lower bound.
    MiCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the checkpoint-free property checks.
    Selftest {
        /// Seeds per gradient suite.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct StageIo {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Gradient,
    ClosedFormFull,
    ClosedFormSimplified,
}

impl From<ModeArg> for ManipulationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Gradient => ManipulationMode::Gradient,
            ModeArg::ClosedFormFull => ManipulationMode::ClosedFormFull,
            ModeArg::ClosedFormSimplified => ManipulationMode::ClosedFormSimplified,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainConfig {
    seed: u64,
    #[serde(default = "default_target")]
    target: String,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    /// When set, ε is calibrated over the selected sources to reach this
    /// mean target-class probability.
    #[serde(default)]
    target_probability: Option<f64>,
    /// When set, ε = step_length / ‖w_target‖.
    #[serde(default)]
    step_length: Option<f64>,
    #[serde(default)]
    mode: ManipulationMode,
    #[serde(default = "default_encode_steps")]
    encode_steps: usize,
    #[serde(default = "default_explain_steps")]
    decode_steps: usize,
    /// Only explain sources with this disease label.
    #[serde(default)]
    source_label: Option<u8>,
    /// Explain at most this many sources, in dataset order.
    #[serde(default)]
    limit: Option<usize>,
    /// Region scored by the marker detector.
    #[serde(default = "default_marker")]
    marker_region: Rect,
    /// Source/counterfactual pairs shown in the montage.
    #[serde(default = "default_montage_pairs")]
    montage_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconstructConfig {
    seed: u64,
    #[serde(default = "default_encode_steps")]
    encode_steps: usize,
    #[serde(default = "default_reconstruct_steps")]
    steps: usize,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default = "default_montage_pairs")]
    montage_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    seed: u64,
    #[serde(default = "default_redraws")]
    redraws: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EfficiencyConfig {
    #[serde(flatten)]
    finetune: FinetuneConfig,
    #[serde(default = "default_fractions")]
    fractions: Vec<f64>,
    #[serde(default = "default_redraws")]
    redraws: usize,
    #[serde(default = "default_permutations")]
    permutations: usize,
}

fn default_target() -> String {
    DISEASE_CLASS.to_string()
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_encode_steps() -> usize {
    DEFAULT_ENCODE_STEPS
}
fn default_explain_steps() -> usize {
    DEFAULT_EXPLAIN_STEPS
}
fn default_reconstruct_steps() -> usize {
    DEFAULT_RECONSTRUCT_STEPS
}
fn default_marker() -> Rect {
    SynthConfig::default().marker_region
}
fn default_montage_pairs() -> usize {
    8
}
fn default_redraws() -> usize {
    DEFAULT_REDRAWS
}
fn default_fractions() -> Vec<f64> {
    DATA_EFFICIENCY_FRACTIONS.to_vec()
}
fn default_permutations() -> usize {
    diffae::evaluation::DEFAULT_PERMUTATIONS
}

/// Reads a JSON config; the `seed` field is mandatory everywhere.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("seed").and_then(serde_json::Value::as_u64).is_none() {
        return Err(Error::config("seed", format!("{}: a non-negative integer seed is mandatory", path.display())));
    }
    Ok(serde_json::from_value(value)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_for(ckpt: &Checkpoint, dir: &Path, limit: Option<usize>) -> Result<Vec<SampleRecord>> {
    let mut recs = load_dataset(dir, ckpt.header.arch.image_size)?;
    if let Some(n) = limit {
        recs.truncate(n);
    }
    if recs.is_empty() {
        return Err(Error::config("data", "no records selected"));
    }
    Ok(recs)
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg: SynthConfig = read_config(config)?;
    let recs = gen_dataset(&cfg)?;
    save_dataset(&recs, out, cfg.seed)?;
    let n = recs.len() as f64;
    let sick = recs.iter().filter(|r| r.disease == 1).count();
    let marked = |d: u8| recs.iter().filter(|r| r.disease == d && r.confounder == 1).count();
    let healthy = recs.len() - sick;
    println!("records          {}", recs.len());
    println!("disease          {:.4}", sick as f64 / n);
    println!("marker|disease   {:.4}", marked(1) as f64 / sick.max(1) as f64);
    println!("marker|healthy   {:.4}", marked(0) as f64 / healthy.max(1) as f64);
    Ok(())
}

fn cmd_pretrain(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg: PretrainConfig = read_config(config)?;
    cfg.validate()?;
    let recs = load_dataset(data, cfg.arch.image_size)?;
    let images = stack_images(&recs)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let summary = pretrain(&images, &cfg, out, resume)?;
    println!("images shown     {}", summary.images_shown);
    if let Some((first, last)) = rolling_endpoints(&summary.losses, cfg.rolling_window) {
        println!("rolling loss     {first:.5} -> {last:.5} (ratio {:.4})", last / first);
    }
    let ckpt = summary.final_checkpoint.strip_prefix(out).unwrap_or(&summary.final_checkpoint);
    println!("checkpoint       {}", ckpt.display());
    Ok(())
}

fn cmd_finetune(io: &StageIo, subset: Option<f64>) -> Result<()> {
    let mut cfg: FinetuneConfig = read_config(&io.config)?;
    if let Some(s) = subset {
        cfg.subset = s;
    }
    let pretrained = Checkpoint::load(&io.checkpoint)?;
    let recs = load_for(&pretrained, &io.data, None)?;
    let out = finetune(&pretrained, &recs, &cfg)?;
    fs::create_dir_all(&io.out).map_err(|e| Error::io(&io.out, e))?;
    out.checkpoint.save(&io.out.join("model.ckpt"))?;
    let mut csv = format!("# seed={}\n{LOSS_CSV_HEADER}\n", cfg.seed);
    for (images, loss) in &out.loss_curve {
        csv += &format!("{images},{loss}\n");
    }
    write_text(&io.out.join("loss.csv"), &csv)?;
    for c in &out.zero_positive {
        println!("warning: class {c} has no positives");
    }
    println!("trained on       {} records, {} epochs", out.n_train, out.epochs_run);
    Ok(())
}

fn cmd_explain(
    io: &StageIo,
    target: Option<String>,
    epsilon: Option<f64>,
    target_prob: Option<f64>,
    step_length: Option<f64>,
    mode: Option<ModeArg>,
) -> Result<()> {
    let mut cfg: ExplainConfig = read_config(&io.config)?;
    if let Some(t) = target {
        cfg.target = t;
    }
    if let Some(e) = epsilon {
        cfg.epsilon = e;
        cfg.target_probability = None;
        cfg.step_length = None;
    }
    if target_prob.is_some() {
        cfg.target_probability = target_prob;
        cfg.step_length = None;
    }
    if step_length.is_some() {
        cfg.step_length = step_length;
        cfg.target_probability = None;
    }
    if cfg.target_probability.is_some() && cfg.step_length.is_some() {
        return Err(Error::config("step_length", "conflicts with target_probability"));
    }
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    let ckpt = Checkpoint::load(&io.checkpoint)?;
    let (model, stats, head) = classifier_parts(&ckpt)?;
    let sched = NoiseSchedule::new(&ckpt.header.schedule)?;
    let target_class = head
        .class_index(&cfg.target)
        .ok_or_else(|| Error::config("target", format!("unknown class {:?}", cfg.target)))?;
    let mut req = ManipulationRequest {
        target_class,
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        encode_steps: cfg.encode_steps,
        decode_steps: cfg.decode_steps,
    };
    if let Some(l) = cfg.step_length {
        req.epsilon = epsilon_for_step_length(&head, target_class, l)?;
    }
    req.validate(head.classes(), sched.len())?;
    let mut recs = load_dataset(&io.data, ckpt.header.arch.image_size)?;
    if let Some(label) = cfg.source_label {
        recs.retain(|r| r.disease == label);
    }
    if let Some(n) = cfg.limit {
        recs.truncate(n);
    }
    if recs.is_empty() {
        return Err(Error::config("data", "no records selected"));
    }
    if let Some(p) = cfg.target_probability {
        req = diffae::pipeline::calibrate_request(&model, &stats, &head, &recs, &req, p)?;
        println!("calibrated epsilon {:.4} (mean target probability {p})", req.epsilon);
    }
    let mut sources = Vec::with_capacity(recs.len());
    let mut counterfactuals = Vec::with_capacity(recs.len());
    let mut cells = Vec::new();
    for chunk in recs.chunks(diffae::pipeline::ENCODE_BATCH) {
        let batch = stack_images(chunk)?;
        let exps = generate_explanations(&batch, &model, &head, &stats, &req, &sched, cfg.seed)?;
        for (rec, ex) in chunk.iter().zip(exps) {
            ex.save(&io.out.join(&rec.id))?;
            if cells.len() < 2 * cfg.montage_pairs {
                cells.push(MontageCell {
                    caption: format!("{} source p={:.3}", rec.id, ex.meta.prob_before),
                    image: ex.source.clone(),
                });
                cells.push(MontageCell {
                    caption: format!("{} counterfactual p={:.3}", rec.id, ex.meta.prob_after),
                    image: ex.counterfactual.clone(),
                });
            }
            sources.push(ex.source);
            counterfactuals.push(ex.counterfactual);
        }
        log::info!("explained {}/{}", sources.len(), recs.len());
    }
    if !cells.is_empty() {
        write_montage(&io.out.join("montage.pgm"), &cells, 2, cfg.seed)?;
    }
    let report = confounder_prevalence_report(&cfg.target, &counterfactuals, &sources, &cfg.marker_region, None)?;
    write_json(&io.out.join("confounder_report.json"), &serde_json::json!({ "seed": cfg.seed, "epsilon": req.epsilon, "report": report }))?;
    println!(
        "marker rate      source {:.1}% -> counterfactual {:.1}% (n={}, p={:.3e})",
        report.source_ratio_pct, report.ratio_pct, report.n, report.p_value
    );
    Ok(())
}

#[derive(Serialize)]
struct ReconstructReport {
    seed: u64,
    encode_steps: usize,
    steps: usize,
    n: usize,
    mae: f64,
}

fn cmd_reconstruct(io: &StageIo) -> Result<()> {
    let cfg: ReconstructConfig = read_config(&io.config)?;
    let ckpt = Checkpoint::load(&io.checkpoint)?;
    let model = DiffusionAutoencoder::from_params(&ckpt.header.arch, ckpt.params.clone())?;
    let sched = NoiseSchedule::new(&ckpt.header.schedule)?;
    let recs = load_for(&ckpt, &io.data, cfg.limit)?;
    fs::create_dir_all(&io.out).map_err(|e| Error::io(&io.out, e))?;
    let comments = [format!("seed={}", cfg.seed)];
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    let mut cells = Vec::new();
    for chunk in recs.chunks(diffae::pipeline::ENCODE_BATCH) {
        let batch = stack_images(chunk)?;
        let rec = reconstruct(&batch, &model, &sched, cfg.encode_steps, cfg.steps)?;
        for (r, img) in chunk.iter().zip(rec.unstack()) {
            abs_sum += r.image.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            count += img.numel();
            write_pgm(&io.out.join(format!("{}.pgm", r.id)), &Pgm::from_image(&img)?, &comments)?;
            if cells.len() < 2 * cfg.montage_pairs {
                cells.push(MontageCell {
                    caption: format!("{} source", r.id),
                    image: r.image.clone(),
                });
                cells.push(MontageCell {
                    caption: format!("{} reconstruction", r.id),
                    image: img,
                });
            }
        }
    }
    write_montage(&io.out.join("montage.pgm"), &cells, 2, cfg.seed)?;
    let report = ReconstructReport {
        seed: cfg.seed,
        encode_steps: cfg.encode_steps,
        steps: cfg.steps,
        n: recs.len(),
        mae: abs_sum / count as f64,
    };
    write_json(&io.out.join("reconstruct.json"), &report)?;
    println!("reconstruction MAE {:.5} over {} images", report.mae, report.n);
    Ok(())
}

fn cmd_eval(io: &StageIo) -> Result<()> {
    let cfg: EvalConfig = read_config(&io.config)?;
    let ckpt = Checkpoint::load(&io.checkpoint)?;
    let recs = load_for(&ckpt, &io.data, None)?;
    let report = evaluate_classifier(&ckpt, &recs, cfg.redraws, cfg.seed)?;
    fs::create_dir_all(&io.out).map_err(|e| Error::io(&io.out, e))?;
    write_text(&io.out.join("eval.json"), &report.to_json()?)?;
    write_text(&io.out.join("eval.csv"), &report.to_csv())?;
    for c in &report.classes {
        println!("{:<16} AUC {:.3} ({:.3}, {:.3})", c.class, c.auc, c.ci_lo, c.ci_hi);
    }
    for e in &report.excluded {
        println!("{:<16} excluded: {}", e.class, e.reason);
    }
    Ok(())
}

fn cmd_efficiency(config: &Path, checkpoint: &Path, train: &Path, test: &Path, out: &Path) -> Result<()> {
    let cfg: EfficiencyConfig = read_config(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let train = load_for(&ckpt, train, None)?;
    let test = load_for(&ckpt, test, None)?;
    let report = data_efficiency(&ckpt, &train, &test, &cfg.fractions, &cfg.finetune, cfg.redraws, cfg.permutations)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("efficiency.json"), &report.to_json()?)?;
    write_text(&out.join("efficiency.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_mi_check(config: &Path, out: &Path) -> Result<()> {
    let cfg: MiConfig = read_config(config)?;
    let report = mi_bound_check(&cfg)?;
    write_json(out, &report)?;
    println!(
        "analytic MI {:.5}  bound {:.5}  gap {:.2e} (se {:.2e})",
        report.analytic_mi, report.bound_value, report.gap, report.std_error
    );
    Ok(())
}

fn cmd_selftest(seeds: u64) -> Result<bool> {
    let checks = diffae::selftest::run(seeds)?;
    for c in &checks {
        println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out).map_err(|e| e.at("gen-data"))?,
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => cmd_pretrain(&config, &data, &out, resume.as_deref()).map_err(|e| e.at("pretrain"))?,
        Command::Finetune { io, subset } => cmd_finetune(&io, subset).map_err(|e| e.at("finetune"))?,
        Command::Explain {
            io,
            target,
            epsilon,
            target_prob,
            step_length,
            mode,
        } => cmd_explain(&io, target, epsilon, target_prob, step_length, mode).map_err(|e| e.at("explain"))?,
        Command::Reconstruct { io } => cmd_reconstruct(&io).map_err(|e| e.at("reconstruct"))?,
        Command::Eval { io } => cmd_eval(&io).map_err(|e| e.at("eval"))?,
        Command::Efficiency {
            config,
            checkpoint,
            train,
            test,
            out,
        } => cmd_efficiency(&config, &checkpoint, &train, &test, &out).map_err(|e| e.at("efficiency"))?,
        Command::MiCheck { config, out } => cmd_mi_check(&config, &out).map_err(|e| e.at("mi-check"))?,
        Command::Selftest { seeds } => return cmd_selftest(seeds).map_err(|e| e.at("selftest")),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
