//! Subcommands and their output files.
//!
//! Checkpoints in the output directory:
//!
//! | file                | written by                 |
//! |---------------------|----------------------------|
//! | `vae.bin`           | `train-vae`, `run-avic`    |
//! | `gen.separate.bin`  | `attack-train`, `run-avic` |
//! | `cls.separate.bin`  | `cls-train`, `run-avic`    |
//! | `gen.bin`, `cls.bin`| `finetune`, `run-avic`     |
//! | `cls.clean.bin`     | `run-avic`                 |
//!
//! Stage commands also save Adam moments as `<name>.adam.bin` so a later
//! stage continues the optimizer state, and never overwrite their inputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avic_core::attacks::Targets;
use avic_core::data::{load_dataset, DatasetSplit};
use avic_core::eval::{evaluate_accuracy, transfer_matrix, vae_loss_increase, PgdSettings};
use avic_core::nn::{load_into, save_weights, AdamState, ParameterStore};
use avic_core::pipeline::{
    build_classifier, build_generator, build_vae, global_finetune, train_classifier_adv, train_generator_separate,
    train_vae_stage, Model, RunConfig,
};
use avic_core::report::{emit_report, read_report, stages_csv, to_canonical_json, transfer_csv};
use avic_core::run::{generate_all, run_avic};
use avic_core::train::StageResult;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, Settings, SweepParam};

#[derive(Debug, Parser)]
#[command(
    name = "avic",
    version,
    about = "Staged adversarial training with a VAE-attacking generator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file; documented defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, as `key=value` or `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Use only the first N training records.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Use only the first N test records.
    #[arg(long, value_name = "N")]
    pub test_limit: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory (else `data_dir`, `$AVIC_DATA_DIR`, then `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1: train the VAE on clean images.
    TrainVae(Common),
    /// Stage 2a: train the generator against the frozen VAE.
    AttackTrain(Common),
    /// Stage 2b: train the classifier on generator outputs.
    ClsTrain(Common),
    /// Stage 3: fine-tune generator and classifier jointly.
    Finetune(Common),
    /// Every stage, the clean baseline and the evaluation.
    RunAvic(Common),
    /// Evaluate saved `vae.bin`, `gen.bin` and `cls.bin`.
    Eval(Common),
    /// One `run-avic` per value of epsilon or alpha.
    Sweep(SweepArgs),
    /// Rewrite the CSV tables of an existing report and print a summary.
    Report(Common),
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// epsilon or alpha (else `sweep_param`).
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated grid (else `sweep_values`).
    #[arg(long)]
    pub values: Option<String>,
    /// Run points concurrently (else `sweep_parallel`).
    #[arg(long)]
    pub parallel: bool,
}

impl Common {
    pub fn settings(&self) -> Result<Settings> {
        let mut overrides = self.set.clone();
        if let Some(n) = self.limit {
            overrides.push(format!("train_limit={n}"));
        }
        if let Some(n) = self.test_limit {
            overrides.push(format!("test_limit={n}"));
        }
        if let Some(d) = &self.data {
            overrides.push(format!("data_dir={}", d.display()));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={}", o.display()));
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

fn load(settings: &Settings) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = settings.data_dir();
    let r = &settings.run;
    load_dataset(r.dataset, &dir, r.train_limit, r.test_limit)
        .with_context(|| format!("loading {} from {}", r.dataset, dir.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save(store: &ParameterStore<f32>, dir: &Path, name: &str) -> Result<()> {
    save_weights(store, &dir.join(name)).with_context(|| format!("saving {name}"))
}

fn save_model<N>(m: &Model<N, f32>, dir: &Path, name: &str) -> Result<()> {
    save(&m.params, dir, &format!("{name}.bin"))?;
    save(&m.adam.to_store()?, dir, &format!("{name}.adam.bin"))
}

fn load_params<N>(m: &mut Model<N, f32>, dir: &Path, name: &str) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    m.params = load_into(&m.params, &path).with_context(|| format!("loading {}", path.display()))?;
    Ok(())
}

fn load_model<N>(m: &mut Model<N, f32>, dir: &Path, name: &str, lr: f64) -> Result<()> {
    load_params(m, dir, name)?;
    let path = dir.join(format!("{name}.adam.bin"));
    let saved =
        avic_core::nn::load_weights::<f32>(&path, "adam").with_context(|| format!("loading {}", path.display()))?;
    m.adam = AdamState::from_store(&m.params, &saved, lr)?;
    Ok(())
}

fn write_stage(dir: &Path, result: &StageResult) -> Result<()> {
    write_text(&dir.join(format!("{}.json", result.stage)), &to_canonical_json(result)?)
}

fn train_vae_cmd(s: &Settings) -> Result<()> {
    let (train, _) = load(s)?;
    let cfg = &s.run;
    create_dir(&s.out_dir)?;
    let mut vae = build_vae::<f32>(cfg)?;
    let r = train_vae_stage(&mut vae, &train, cfg.schedule(cfg.epochs.vae)).map_err(|e| e.in_stage("vae"))?;
    save_model(&vae, &s.out_dir, "vae")?;
    write_stage(&s.out_dir, &r)
}

fn attack_train_cmd(s: &Settings) -> Result<()> {
    let (train, _) = load(s)?;
    let cfg = &s.run;
    let mut vae = build_vae::<f32>(cfg)?;
    load_params(&mut vae, &s.out_dir, "vae")?;
    vae.params.freeze();
    let mut gen = build_generator::<f32>(cfg)?;
    let r = train_generator_separate(&mut gen, &vae, &train, cfg.epsilon, cfg.schedule(cfg.epochs.gen))
        .map_err(|e| e.in_stage("generator"))?;
    save_model(&gen, &s.out_dir, "gen.separate")?;
    write_stage(&s.out_dir, &r)
}

fn cls_train_cmd(s: &Settings) -> Result<()> {
    let (train, _) = load(s)?;
    let cfg = &s.run;
    let mut gen = build_generator::<f32>(cfg)?;
    load_params(&mut gen, &s.out_dir, "gen.separate")?;
    gen.params.freeze();
    let mut cls = build_classifier::<f32>(cfg)?;
    let r = train_classifier_adv(&mut cls, &gen, &train, cfg.epsilon, cfg.schedule(cfg.epochs.cls))
        .map_err(|e| e.in_stage("classifier"))?;
    save_model(&cls, &s.out_dir, "cls.separate")?;
    write_stage(&s.out_dir, &r)
}

fn finetune_cmd(s: &Settings) -> Result<()> {
    let (train, _) = load(s)?;
    let cfg = &s.run;
    let mut vae = build_vae::<f32>(cfg)?;
    load_params(&mut vae, &s.out_dir, "vae")?;
    vae.params.freeze();
    let mut gen = build_generator::<f32>(cfg)?;
    load_model(&mut gen, &s.out_dir, "gen.separate", cfg.gen_lr)?;
    let mut cls = build_classifier::<f32>(cfg)?;
    load_model(&mut cls, &s.out_dir, "cls.separate", cfg.cls_lr)?;
    let schedule = cfg.schedule(cfg.epochs.global).continuing(cfg.epochs.cls);
    let r = global_finetune(&mut gen, &mut cls, &vae, &train, cfg.epsilon, cfg.alpha, schedule)
        .map_err(|e| e.in_stage("global"))?;
    save_model(&gen, &s.out_dir, "gen")?;
    save_model(&cls, &s.out_dir, "cls")?;
    write_stage(&s.out_dir, &r)
}

/// Runs the whole pipeline into `out_dir`.
pub fn run_avic_into(cfg: &RunConfig, train: &DatasetSplit, test: &DatasetSplit, out_dir: &Path) -> Result<()> {
    let outcome = run_avic::<f32>(cfg, train, test)?;
    create_dir(out_dir)?;
    let t = &outcome.trained;
    save(&t.vae.params, out_dir, "vae.bin")?;
    save(&t.generator.params, out_dir, "gen.bin")?;
    save(&t.classifier.params, out_dir, "cls.bin")?;
    save(&t.separate_classifier, out_dir, "cls.separate.bin")?;
    save(&t.clean_classifier.params, out_dir, "cls.clean.bin")?;
    emit_report(&outcome.report, &outcome.timing, out_dir)?;
    if let Some(grid) = &outcome.samples {
        grid.save(&out_dir.join("samples.ppm"))?;
    }
    Ok(())
}

fn run_avic_cmd(s: &Settings) -> Result<()> {
    let (train, test) = load(s)?;
    run_avic_into(&s.run, &train, &test, &s.out_dir)?;
    println!("wrote {}", s.out_dir.join("report.json").display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalSummary {
    accuracy: f64,
    adv_accuracy: f64,
    vae_clean_loss: f64,
    vae_adv_loss: f64,
    increase_rate: f64,
    epsilon: f64,
    transfer: Vec<avic_core::eval::TransferCell>,
}

fn eval_cmd(s: &Settings) -> Result<()> {
    let (_, test) = load(s)?;
    let cfg = &s.run;
    let dir = &s.out_dir;
    let mut vae = build_vae::<f32>(cfg)?;
    load_params(&mut vae, dir, "vae")?;
    let mut gen = build_generator::<f32>(cfg)?;
    load_params(&mut gen, dir, "gen")?;
    let mut cls = build_classifier::<f32>(cfg)?;
    load_params(&mut cls, dir, "cls")?;
    let bs = cfg.batch_size;
    let (x, y) = (&test.images, test.labels.as_slice());
    let adv = generate_all(&gen.net, &gen.params, x, cfg.epsilon, bs)?;
    let inc = vae_loss_increase(&vae.net, &vae.params, x, &adv, bs, cfg.seed)?;
    let targets = Targets {
        vae: Some((&vae.net, &vae.params)),
        classifier: Some((&cls.net, &cls.params)),
        generator: Some((&gen.net, &gen.params)),
    };
    let pgd = PgdSettings {
        steps: cfg.pgd_steps,
        step_size: cfg.pgd_step_size,
        rand_init: cfg.pgd_rand_init,
    };
    let transfer = transfer_matrix(&targets, x, y, &cfg.transfer_eps, pgd, bs, cfg.seed)?;
    let summary = EvalSummary {
        accuracy: evaluate_accuracy(&cls.net, &cls.params, x, y, bs)?,
        adv_accuracy: evaluate_accuracy(&cls.net, &cls.params, &adv, y, bs)?,
        vae_clean_loss: inc.clean,
        vae_adv_loss: inc.adv,
        increase_rate: inc.rate,
        epsilon: cfg.epsilon,
        transfer,
    };
    write_text(&dir.join("eval.json"), &to_canonical_json(&summary)?)?;
    write_text(&dir.join("eval_transfer.csv"), &transfer_csv(&summary.transfer))?;
    println!(
        "accuracy {:.2}%  on generator outputs {:.2}%  VAE loss {:.4} -> {:.4} ({:+.2}%)",
        summary.accuracy, summary.adv_accuracy, inc.clean, inc.adv, inc.rate
    );
    Ok(())
}

/// Directory name of one sweep point.
pub fn point_dir(param: SweepParam, value: f64) -> String {
    format!("{}={}", param.as_str(), avic_core::report::format_float(value))
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let mut s = args.common.settings()?;
    if let Some(p) = &args.param {
        s.set(Some("sweep"), "sweep_param", p)?;
    }
    if let Some(v) = &args.values {
        s.set(Some("sweep"), "sweep_values", v)?;
    }
    let parallel = args.parallel || s.sweep.parallel;
    let sweep = s.sweep.clone();
    if sweep.values.is_empty() {
        bail!("sweep needs values (--values or sweep_values)");
    }
    let mut points = Vec::new();
    for &v in &sweep.values {
        let mut cfg = s.run.clone();
        sweep.param.apply(&mut cfg, v);
        cfg.validate()
            .with_context(|| format!("sweep point {}={v}", sweep.param.as_str()))?;
        points.push((cfg, s.out_dir.join(point_dir(sweep.param, v))));
    }
    let (train, test) = load(&s)?;
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = points
                .iter()
                .map(|(cfg, dir)| scope.spawn(|| run_avic_into(cfg, &train, &test, dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| bail!("sweep worker panicked")))
                .collect::<Result<Vec<_>>>()
        })?;
    } else {
        for (cfg, dir) in &points {
            run_avic_into(cfg, &train, &test, dir)?;
        }
    }
    let mut csv = format!(
        "{},clean_accuracy,separate_accuracy,avic_accuracy,increase_rate\n",
        sweep.param.as_str()
    );
    for (cfg, dir) in &points {
        let r = read_report(&dir.join("report.json"))?;
        let v = match sweep.param {
            SweepParam::Epsilon => cfg.epsilon,
            SweepParam::Alpha => cfg.alpha,
        };
        let f = avic_core::report::format_float;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            f(v),
            f(r.clean_accuracy),
            f(r.separate_accuracy),
            f(r.avic_accuracy),
            r.increase_rate.map(f).unwrap_or_default()
        ));
    }
    write_text(&s.out_dir.join("sweep.csv"), &csv)?;
    println!("wrote {} points under {}", points.len(), s.out_dir.display());
    Ok(())
}

fn report_cmd(s: &Settings) -> Result<()> {
    let path = s.out_dir.join("report.json");
    let r = read_report(&path)?;
    write_text(&s.out_dir.join("transfer.csv"), &transfer_csv(&r.transfer))?;
    write_text(&s.out_dir.join("stages.csv"), &stages_csv(&r.stages))?;
    println!(
        "{} (seed {}, epsilon {}, alpha {})",
        path.display(),
        r.seed,
        r.config.epsilon,
        r.config.alpha
    );
    println!("  clean baseline accuracy  {:.2}%", r.clean_accuracy);
    println!("  separate-stage accuracy  {:.2}%", r.separate_accuracy);
    println!("  fine-tuned accuracy      {:.2}%", r.avic_accuracy);
    println!("  on generator outputs     {:.2}%", r.avic_adv_accuracy);
    match r.increase_rate {
        Some(rate) => println!(
            "  VAE loss {:.4} -> {:.4} ({rate:+.2}%)",
            r.vae_clean_loss, r.vae_adv_loss
        ),
        None => println!("  VAE loss {:.4} -> {:.4}", r.vae_clean_loss, r.vae_adv_loss),
    }
    Ok(())
}

/// Runs one parsed command.
pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainVae(c) => train_vae_cmd(&c.settings()?),
        Command::AttackTrain(c) => attack_train_cmd(&c.settings()?),
        Command::ClsTrain(c) => cls_train_cmd(&c.settings()?),
        Command::Finetune(c) => finetune_cmd(&c.settings()?),
        Command::RunAvic(c) => run_avic_cmd(&c.settings()?),
        Command::Eval(c) => eval_cmd(&c.settings()?),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Report(c) => report_cmd(&c.settings()?),
    }
}
