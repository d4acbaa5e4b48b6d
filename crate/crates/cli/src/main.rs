use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedcorr_core::payload::{self, MODEL_MAGIC, UPDATE_MAGIC};
use fedcorr_core::sim::harness::{build_tables, derive_seed, summarize, summary_table};
use fedcorr_core::sim::{build_world, generate_clients, run_experiment_suite, Arm, ExperimentConfig, TaskSpec};
use fedcorr_core::{Error, ParameterSet, Precision};

#[derive(Parser)]
#[command(name = "fedcorr", version, about = "Federated learning from user corrections, on a desk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-round metrics plus a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured ones.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this arm instead of the configured ones.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic client pool, eval set and tables.
    GenData {
        /// Task TOML: either a bare task table or a full experiment config.
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode a model or update payload and print its layout.
    AuditPayload {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Configuration problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            arm,
            out,
        } => run(&config, seed, arm.as_deref(), &out),
        Command::GenData { task, out, seed } => gen_data(&task, &out, seed),
        Command::AuditPayload { input } => audit(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(config: &Path, seed: Option<u64>, arm: Option<&str>, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.experiment.seeds.clone());
    let arms = match arm {
        Some(a) => vec![a.parse::<Arm>()?],
        None => cfg.experiment.arms.clone(),
    };
    let runs = run_experiment_suite(&cfg, &seeds, &arms, Some(out))?;
    print!(
        "{}",
        summary_table(&summarize(&runs, cfg.experiment.general_wer_tolerance))
    );
    Ok(())
}

fn gen_data(task: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(task)
        .map_err(|e| Error::Config(format!("{}: {e}", task.display())))?;
    let (spec, full) = match ExperimentConfig::from_toml(&text) {
        Ok(cfg) => (cfg.task.clone(), Some(cfg)),
        Err(full_err) => match toml::from_str::<TaskSpec>(&text) {
            Ok(spec) => (spec, None),
            Err(e) => {
                return Err(Error::Config(format!(
                    "neither an experiment config ({full_err}) nor a task table ({e})"
                ))
                .into())
            }
        },
    };
    let max_diff = full.as_ref().map(|c| c.federated.max_word_len_diff).unwrap_or(1);
    let world = build_world(&spec)?;
    let data = generate_clients(&world, derive_seed(seed, 2), max_diff);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut clients = String::new();
    for c in &data.clients {
        clients.push_str(&serde_json::to_string(c)?);
        clients.push('\n');
    }
    fs::write(out.join("clients.jsonl"), clients)?;
    let mut eval = String::new();
    for u in &data.eval {
        eval.push_str(&serde_json::to_string(u)?);
        eval.push('\n');
    }
    fs::write(out.join("eval.jsonl"), eval)?;
    let words: String = data
        .corrected_words
        .words
        .iter()
        .map(|w| format!("{w}\n"))
        .collect();
    fs::write(out.join("corrected_words.txt"), words)?;
    fs::write(out.join("incumbent.json"), serde_json::to_string_pretty(&world.incumbent)?)?;
    let acc = fedcorr_core::accuracy_table(
        data.accuracy_eval.iter().map(|(t, o)| (t.as_slice(), o.as_slice())),
    )?;
    fs::write(out.join("acc_table.txt"), acc.to_text())?;
    if let Some(cfg) = &full {
        let tables = build_tables(cfg, &data, seed)?;
        fs::write(out.join("freq_table.txt"), tables.freq.to_text())?;
    }
    println!(
        "{} clients, {} eval utterances, {} corrected words -> {}",
        data.clients.len(),
        data.eval.len(),
        data.corrected_words.len(),
        out.display()
    );
    Ok(())
}

fn audit(input: &Path) -> anyhow::Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let (body, wire) = if bytes.starts_with(&MODEL_MAGIC) || bytes.starts_with(&UPDATE_MAGIC) {
        (bytes.clone(), None)
    } else {
        (payload::unwrap(&bytes)?, Some(bytes.len()))
    };
    if let Some(n) = wire {
        println!("wire bytes\t{n}");
    }
    println!("body bytes\t{}", body.len());
    if body.starts_with(&UPDATE_MAGIC) {
        let u = payload::decode_update(&body)?;
        println!("kind\tupdate");
        println!("weight\t{}", u.weight);
        println!("examples\t{}", u.example_count);
        for (name, g) in &u.gradients {
            println!("{name}\tf32\t{} elements", g.len());
        }
        return Ok(());
    }
    let params: ParameterSet = payload::deserialize(&body)?;
    println!("kind\tmodel");
    println!("name\tshape\tprecision\ttrainable\tbytes");
    let mut f16_elems = 0;
    for v in &params.variables {
        let shape: Vec<String> = v.shape.iter().map(|d| d.to_string()).collect();
        println!(
            "{}\t{}\t{:?}\t{}\t{}",
            v.name,
            shape.join("x"),
            v.precision,
            v.trainable,
            v.byte_len()
        );
        if v.precision == Precision::F16 {
            f16_elems += v.len();
        }
    }
    println!("parameters\t{}", params.parameter_count());
    println!("f16 elements\t{f16_elems}");
    println!(
        "trainable\t{}",
        params.trainable_names().join(",")
    );
    Ok(())
}
