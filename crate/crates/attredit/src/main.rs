//! Command-line interface: corpus generation, training, editing and the
//! evaluation suites.

use anyhow::{anyhow, bail, Result};
use attredit::captioner::{EchoCaptioner, EchoParser, HttpCaptioner};
use attredit::corpus::{build_corpus, load_corpus, manifest_hash, BuildConfig, MaskAug};
use attredit::evalsuite::{
    ablation_suite, cad_suite, dump_score_maps, guided_pairs, preserve_suite, probe_suite,
    probe_training_set, SuiteCtx,
};
use attredit::report::Report;
use attredit::runconfig::{RunConfig, Thresholds};
use attredit::trainer::run_training;
use attredit::{checkpoint, pngio};
use attredit_core::denoiser::Model;
use attredit_core::pipeline::{edit, AblationVariant, EditRequest};
use attredit_core::probe::{train_probe, ProbeConfig};
use attredit_core::synth::canonical_vocab;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "attredit", about = "Local attribute inpainting toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic triple corpus (images, captions, masks).
    GenData(GenDataArgs),
    /// Train the denoiser from a run configuration file.
    Train(TrainArgs),
    /// Edit one image: inpaint the masked region from a prompt.
    Edit(EditArgs),
    /// Run an evaluation suite against a checkpoint.
    Eval(EvalArgs),
    /// Train the attribute probe used by the probe/ablation suites.
    TrainProbe(TrainProbeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of triples to generate.
    #[arg(long, default_value_t = 2200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/corpus")]
    out: PathBuf,
    /// Mask coarsening: hull, dilate, bezier or mixed.
    #[arg(long, default_value = "mixed")]
    mask_aug: String,
    /// Image side length (power of two).
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Caption through an HTTP service instead of the ground-truth echo.
    #[arg(long)]
    captioner_url: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Stop early once the trailing/leading loss ratio falls below this.
    #[arg(long)]
    early_stop_ratio: Option<f64>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "edited.png")]
    out: PathBuf,
    /// Guidance strength of the frequency alignment.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// DDIM sampling steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 7.5)]
    scale: f64,
    /// Disable the frequency-domain guidance.
    #[arg(long, default_value_t = false)]
    no_stfg: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dump per-timestep score maps into this directory.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    /// Ablation variant to run.
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoAdapter,
    ParallelInjection,
    NoStfg,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => AblationVariant::Full,
            VariantArg::NoAdapter => AblationVariant::NoCondAdapter,
            VariantArg::ParallelInjection => AblationVariant::ParallelInjection,
            VariantArg::NoStfg => AblationVariant::NoFreqGuidance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Cad,
    Preserve,
    Probe,
    Ablation,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Probe checkpoint; trained on the fly when omitted.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, default_value = "configs/thresholds.toml")]
    thresholds: PathBuf,
    /// Worker threads for per-sample parallelism.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Sample count override (defaults per suite: preserve 50, probe 60,
    /// cad/ablation 20 pairs).
    #[arg(long)]
    n: Option<usize>,
    /// Sampling steps per edit.
    #[arg(long, default_value_t = 50)]
    steps: usize,
}

#[derive(Args)]
struct TrainProbeArgs {
    #[arg(long, default_value = "checkpoints/probe.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training set size (balanced across buckets).
    #[arg(long, default_value_t = 240)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Edit(a) => edit_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::TrainProbe(a) => train_probe_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = BuildConfig {
        n: a.n,
        seed: a.seed,
        size: a.size,
        mask_aug: a.mask_aug.parse::<MaskAug>()?,
        ..Default::default()
    };
    let manifest = match &a.captioner_url {
        Some(url) => build_corpus(
            &a.out,
            &cfg,
            &HttpCaptioner {
                endpoint: url.clone(),
            },
            &EchoParser,
        )?,
        None => build_corpus(&a.out, &cfg, &EchoCaptioner, &EchoParser)?,
    };
    let hash = manifest_hash(&a.out.join("manifest.tsv"))?;
    println!(
        "corpus: {} accepted, {} rejected, manifest fnv64 {hash:016x}",
        manifest.records.len(),
        manifest.rejects.len()
    );
    if manifest.records.is_empty() {
        bail!("no samples accepted ({} rejects)", manifest.rejects.len());
    }
    if !manifest.rejects.is_empty() {
        eprintln!("rejects:");
        for (i, e) in manifest.rejects.iter().take(10) {
            eprintln!("  sample {i}: {e}");
        }
        std::process::exit(2);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let rc = RunConfig::load(&a.config)?;
    let dn_cfg = rc.denoiser_config()?;
    let train_cfg = rc.train_config()?;
    let manifest = PathBuf::from(&rc.data.corpus).join("manifest.tsv");
    let samples = load_corpus(&manifest, Some("train"), Some(rc.data.shuffle_seed))?;
    println!(
        "training on {} samples, {} steps, batch {}",
        samples.len(),
        train_cfg.steps,
        train_cfg.batch_size
    );
    let mut model = Model::new(dn_cfg, &canonical_vocab(), rc.model.init_seed);
    println!("model parameters: {}", model.params.total_elements());
    let log_every = rc.train.log_every.max(1);
    let mut log_lines = String::from("step\tloss\n");
    let ckpt_path = PathBuf::from(&rc.out.checkpoint);
    if let Some(dir) = ckpt_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = train_cfg.schedule_spec();
    let outcome = run_training(
        &mut model,
        &samples,
        &train_cfg,
        a.early_stop_ratio,
        250,
        |step, m| {
            checkpoint::save_model(&ckpt_path, m, &spec)?;
            println!("snapshot at step {step} -> {}", ckpt_path.display());
            Ok(())
        },
        |step, loss| {
            if step % log_every == 0 {
                println!("step {step:5}  loss {loss:.5}");
            }
            log_lines.push_str(&format!("{step}\t{loss:.6}\n"));
        },
    )?;
    println!(
        "done: {} steps in {:.1}s; first-100 mean {:.4}, last-100 mean {:.4}",
        outcome.steps_run, outcome.wall_secs, outcome.first100, outcome.last100
    );
    checkpoint::save_model(&ckpt_path, &model, &spec)?;
    println!("checkpoint written to {}", ckpt_path.display());
    let loss_log = PathBuf::from(&rc.out.loss_log);
    if let Some(dir) = loss_log.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&loss_log, log_lines)?;
    Ok(())
}

fn edit_cmd(a: EditArgs) -> Result<()> {
    let (model, spec) = checkpoint::load_model(&a.ckpt)?;
    let image = pngio::load_image(&a.image)?;
    let mask = pngio::load_mask(&a.mask)?;
    let schedule = spec.build().map_err(|e| anyhow!("{e}"))?;
    let mut req = EditRequest::new(image, mask, a.prompt.clone());
    req.lambda = a.lambda;
    req.steps = a.steps;
    req.guidance_scale = a.scale;
    req.stfg_enabled = !a.no_stfg;
    req.seed = a.seed;
    req.variant = a.variant.into();
    req.capture_scores = a.dump_scores.is_some();
    let out = edit(&model, &req, &schedule).map_err(|e| anyhow!("edit failed: {e}"))?;
    pngio::save_image(&a.out, &out.image)?;
    println!("edited image written to {}", a.out.display());
    if let Some(dir) = &a.dump_scores {
        dump_score_maps(dir, &out.trace.score_maps)?;
        println!("score maps written to {}", dir.display());
    }
    if !out.trace.guidance_values.is_empty() {
        let mean_g = attredit_core::pipeline::mean_guidance_value(&out.trace);
        println!(
            "guidance ran on {} steps, mean value {mean_g:.5}",
            out.trace.guidance_values.len()
        );
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, spec) = checkpoint::load_model(&a.ckpt)?;
    let thresholds = if a.thresholds.exists() {
        Thresholds::load(&a.thresholds)?
    } else {
        Thresholds::default()
    };
    let schedule = spec.build().map_err(|e| anyhow!("{e}"))?;
    std::fs::create_dir_all(&a.out)?;
    let report = Report::new(a.out.join("eval_report.tsv"));
    let ctx = SuiteCtx {
        model: &model,
        schedule: &schedule,
        thresholds: &thresholds,
        report: &report,
        out_dir: a.out.clone(),
        workers: a.workers,
        steps: a.steps,
        guidance_scale: 7.5,
        lambda: 1.0,
    };

    let load_probe_model = || -> Result<attredit_core::probe::ProbeModel> {
        match &a.probe {
            Some(p) => checkpoint::load_probe(p),
            None => {
                println!("no --probe given; training one on clean synthetic data");
                let set = probe_training_set(240, 7, model.cfg.image_size);
                train_probe(&set, ProbeConfig::default(), 7).map_err(|e| anyhow!("{e}"))
            }
        }
    };

    let ok = match a.suite {
        SuiteArg::Preserve => preserve_suite(&ctx, a.n.unwrap_or(50))?,
        SuiteArg::Probe => {
            let probe = load_probe_model()?;
            println!("probe clean accuracy {:.3}", probe.accuracy);
            probe_suite(&ctx, &probe, a.n.unwrap_or(60), AblationVariant::Full, "probe")?.2
        }
        SuiteArg::Cad => {
            let pairs = guided_pairs(&ctx, a.n.unwrap_or(20))?;
            cad_suite(&ctx, &pairs)?
        }
        SuiteArg::Ablation => {
            let probe = load_probe_model()?;
            let n = a.n.unwrap_or(20);
            let pairs = guided_pairs(&ctx, n)?;
            let (full_acc, _, _) =
                probe_suite(&ctx, &probe, 60, AblationVariant::Full, "ablation_full")?;
            ablation_suite(&ctx, &probe, &pairs, full_acc, 60)?
        }
    };
    println!("suite {}: {}", suite_name(a.suite), if ok { "pass" } else { "fail" });
    if !ok {
        std::process::exit(3);
    }
    Ok(())
}

fn suite_name(s: SuiteArg) -> &'static str {
    match s {
        SuiteArg::Cad => "cad",
        SuiteArg::Preserve => "preserve",
        SuiteArg::Probe => "probe",
        SuiteArg::Ablation => "ablation",
    }
}

fn train_probe_cmd(a: TrainProbeArgs) -> Result<()> {
    let set = probe_training_set(a.n, a.seed, a.size);
    let probe = train_probe(&set, ProbeConfig::default(), a.seed)
        .map_err(|e| anyhow!("probe training refused: {e}"))?;
    println!("probe held-out accuracy {:.3}", probe.accuracy);
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save_probe(&a.out, &probe)?;
    println!("probe checkpoint written to {}", a.out.display());
    Ok(())
}
