//! Command-line surface: staged training phases, evaluation, ablations,
//! and a one-shot run-all, each driven by a TOML config or built-in preset.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use driftprompt::backbone::Backbone;
use driftprompt::config::{preset, preset_names, ExperimentConfig};
use driftprompt::data::DomainDataset;
use driftprompt::error::{Error, Result};
use driftprompt::pipeline;
use driftprompt::prompt::PromptBank;
use driftprompt::report;
use driftprompt::runner::{self, AblationAxis};

#[derive(Parser)]
#[command(
    name = "driftprompt",
    version,
    about = "Adapts a frozen transformer to future drifted domains via learned prompts"
)]
struct Cli {
    /// Experiment config: a TOML path or a built-in preset name.
    #[arg(long, global = true, default_value = "mg-alternation")]
    config: String,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact and report directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the number of repeated runs (mean and std over seeds).
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured domains as per-domain CSV files.
    GenerateData,
    /// Phase 1: pretrain the backbone on pooled source domains, then freeze.
    Pretrain,
    /// Phase 2: learn one prompt per source domain against the frozen backbone.
    LearnPrompts,
    /// Phase 3: train the drift forecaster and the shared general prompt.
    LearnTemporal,
    /// Score the vanilla backbone and the prompted model on the target domain.
    Evaluate,
    /// Run one ablation grid and report every cell.
    Ablate {
        /// prompt_components | num_domains | prompt_size | generator_layers
        #[arg(long)]
        axis: String,
    },
    /// Train all phases, save artifacts, evaluate, and emit the report.
    RunAll,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output through this path
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = Path::new(&cli.config);
    let mut config = if path.exists() {
        ExperimentConfig::load(path)?
    } else if cli.config.ends_with(".toml") {
        return Err(Error::Config(format!(
            "config file {:?} does not exist",
            cli.config
        )));
    } else {
        preset(&cli.config).map_err(|_| {
            Error::Config(format!(
                "{:?} is neither a config file nor a preset; presets: {}",
                cli.config,
                preset_names().join(", ")
            ))
        })?
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(runs) = cli.runs {
        config.runs = runs;
    }
    config.validate()?;
    Ok(config)
}

fn write_domain_csv(path: &Path, ds: &DomainDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = Vec::new();
    for j in 0..ds.tokens * ds.input_dim {
        header.push(format!("x{j}"));
    }
    for j in 0..ds.output_dim {
        header.push(format!("y{j}"));
    }
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let row_x = ds.tokens * ds.input_dim;
    for i in 0..ds.rows {
        let mut record: Vec<String> = ds.x[i * row_x..(i + 1) * row_x]
            .iter()
            .map(|v| v.to_string())
            .collect();
        record.extend(
            ds.y[i * ds.output_dim..(i + 1) * ds.output_dim]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&record).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn generate_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = pipeline::prepare_data(config)?;
    let dir = out.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = 0usize;
    for (train, held) in &data.sources {
        let t = train.domain_index;
        write_domain_csv(&dir.join(format!("domain-{t:02}-train.csv")), train)?;
        write_domain_csv(&dir.join(format!("domain-{t:02}-heldout.csv")), held)?;
        written += 2;
    }
    for target in &data.targets {
        write_domain_csv(
            &dir.join(format!("domain-{:02}-target.csv", target.domain_index)),
            target,
        )?;
        written += 1;
    }
    println!("wrote {written} domain files to {}", dir.display());
    Ok(())
}

// staged commands share one artifact layout and the run-0 seed
fn staged_seed(config: &ExperimentConfig) -> u64 {
    runner::run_seed(config.seed, 0)
}

fn load_backbone(out: &Path) -> Result<Backbone> {
    Backbone::load(out.join("backbone/backbone.ckpt"))
}

fn save_in(dir: &Path, sub: &str, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let d = dir.join(sub);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    save(&d)
}

fn pretrain(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = pipeline::prepare_data(config)?;
    let (backbone, log) = pipeline::run_phase1_pretrain(config, &data, staged_seed(config))?;
    save_in(out, "backbone", |d| backbone.save(d.join("backbone.ckpt")))?;
    save_in(out, "logs", |d| {
        pipeline::write_phase_log(d.join("phase1_pretrain.csv"), &log)
    })?;
    let last = log.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs, final train loss {last:.6}; backbone frozen",
        log.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenerateData => generate_data(&config, &cli.out),
        Command::Pretrain => pretrain(&config, &cli.out),
        Command::LearnPrompts => learn_prompts(&config, &cli.out),
        Command::LearnTemporal => learn_temporal(&config, &cli.out),
        Command::Evaluate => evaluate(&config, &cli.out),
        Command::Ablate { axis } => ablate(&config, axis, &cli.out),
        Command::RunAll => run_all(&config, &cli.out),
    }
}

fn learn_prompts(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = pipeline::prepare_data(config)?;
    let backbone = load_backbone(out)?;
    let (bank, logs) =
        pipeline::run_phase2_domain_prompts(config, &backbone, &data, staged_seed(config))?;
    save_in(out, "prompts", |d| bank.save(d.join("bank.ckpt")))?;
    save_in(out, "logs", |d| {
        pipeline::write_prompt_log(d.join("phase2_prompts.csv"), &logs)
    })?;
    println!("learned {} domain prompts", logs.len());
    Ok(())
}

fn learn_temporal(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = pipeline::prepare_data(config)?;
    let backbone = load_backbone(out)?;
    let mut bank = PromptBank::load(out.join("prompts/bank.ckpt"))?;
    let result =
        pipeline::run_phase3_temporal(config, &backbone, &bank, &data, staged_seed(config))?;
    bank.set_general(result.general)?;
    save_in(out, "prompts", |d| bank.save(d.join("bank.ckpt")))?;
    save_in(out, "generator", |d| {
        result.generator.save(d.join("generator.ckpt"))
    })?;
    save_in(out, "logs", |d| {
        pipeline::write_phase_log(d.join("phase3_temporal.csv"), &result.log)
    })?;
    let last = result.log.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    println!(
        "temporal phase done after {} epochs, final train loss {last:.6}",
        result.log.len()
    );
    Ok(())
}

fn evaluate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let result = runner::evaluate_experiment(config)?;
    report::emit_report(&result.records, &result.plots, out.join("report"))?;
    print!("{}", report::render_table(&result.records)?);
    println!("report written to {}", out.join("report").display());
    Ok(())
}

fn ablate(config: &ExperimentConfig, axis: &str, out: &Path) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    let result = runner::run_ablation(config, axis)?;
    let dir = out.join(format!("ablation-{}", axis.as_str()));
    report::emit_report(&result.records, &result.plots, &dir)?;
    print!("{}", report::render_table(&result.records)?);
    println!("report written to {}", dir.display());
    Ok(())
}

fn run_all(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let (result, artifacts) = runner::evaluate_experiment_keeping(config)?;
    pipeline::save_artifacts(out, &artifacts)?;
    report::emit_report(&result.records, &result.plots, out.join("report"))?;
    print!("{}", report::render_table(&result.records)?);
    println!("artifacts and report written to {}", out.display());
    Ok(())
}
