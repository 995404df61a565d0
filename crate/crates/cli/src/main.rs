use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use casslr::diagnostics;
use casslr::encoder::trainable_parameter_report;
use casslr::harness::checkpoint;
use casslr::harness::compare::{compare, NamedReport};
use casslr::harness::{evaluate, run_pipeline, ExperimentConfig, PipelineCache, PipelineOptions};
use casslr::synthdata::{build_corpora, read_corpus, write_corpus, CorpusSpec};
use casslr::{Error, Result};
use clap::{Parser, Subcommand};

const SEED_ENV: &str = "CASSLR_SEED";

#[derive(Parser)]
#[command(name = "casslr", version, about = "Condition-aware speech encoder experiments on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// Corpus spec JSON; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training pipeline of an experiment.
    Train {
        /// Experiment config JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use a corpus written by gen-data instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate after every stage.
        #[arg(long)]
        eval_stages: bool,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Relative-change table of reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameter counts per block for a checkpoint or a config.
    ParamReport {
        #[arg(long, conflicts_with = "config")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the core operators.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Quick numerical self-test.
    Selftest,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out } => {
            let spec: CorpusSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => CorpusSpec::default(),
            };
            let corpus = build_corpora(&spec)?;
            write_corpus(&corpus, &out)?;
            println!(
                "wrote {} training and {} evaluation utterances to {}",
                corpus.asr_lid.len() + corpus.sv.len(),
                corpus.eval_normal.len() + corpus.eval_fewshot.len() + corpus.sv_eval.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            data,
            eval_stages,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let corpus = match data {
                Some(d) => {
                    let c = read_corpus(&d)?;
                    cfg.corpus = c.spec.clone();
                    c
                }
                None => build_corpora(&cfg.corpus)?,
            };
            let mut cache = PipelineCache::new();
            let result = run_pipeline(
                &cfg,
                &corpus,
                &mut cache,
                PipelineOptions {
                    eval_each_stage: eval_stages,
                },
            )?;
            checkpoint::save(&out, &cfg, &result.completed, &result.store)?;
            write_json(&out.join("stages.json"), &result.stages)?;
            write_json(&out.join("report.json"), &result.report)?;
            println!("{}", serde_json::to_string_pretty(&result.report)?);
        }
        Command::Eval { ckpt, data, report } => {
            let ck = checkpoint::load(&ckpt)?;
            let corpus = read_corpus(&data)?;
            let r = evaluate(&ck.store, &ck.config.model_config(), &corpus)?;
            write_json(&report, &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Compare { reports, csv } => {
            let loaded = reports.iter().map(|p| NamedReport::load(p)).collect::<Result<Vec<_>>>()?;
            let table = compare(&loaded)?;
            print!("{}", table.render());
            if let Some(p) = csv {
                fs::write(p, table.to_csv())?;
            }
        }
        Command::ParamReport { ckpt, config } => {
            let (cfg, store) = match ckpt {
                Some(dir) => {
                    let ck = checkpoint::load(&dir)?;
                    (ck.config, ck.store)
                }
                None => {
                    let cfg = load_config(config.as_deref())?;
                    let m = cfg.model_config();
                    let mut store = casslr::model::init_model::<f32>(&m, cfg.seed);
                    store.set_trainable(|n| casslr::params::Block::of(n).is_adapter());
                    (cfg, store)
                }
            };
            let report = trainable_parameter_report(&store, &cfg.model_config());
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for (name, r) in diagnostics::gradient_suite(seed)? {
                println!(
                    "{:<24} {} max rel err {:.2e} over {} coordinates",
                    name,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.checked()
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks failed")));
            }
        }
        Command::Selftest => {
            let checks = [
                ("conditioner identity", diagnostics::conditioner_identity(1, 20)?),
                (
                    "encoder identity (cc)",
                    diagnostics::encoder_identity(1, casslr::conditioner::ConditionerMode::Cc, 2)?,
                ),
                (
                    "encoder identity (tcac)",
                    diagnostics::encoder_identity(1, casslr::conditioner::ConditionerMode::Tcac, 2)?,
                ),
                (
                    "gradients",
                    diagnostics::gradient_suite(1)?.iter().all(|(_, r)| r.passed),
                ),
            ];
            let mut ok = true;
            for (name, pass) in checks {
                println!("{:<24} {}", name, if pass { "ok" } else { "FAIL" });
                ok &= pass;
            }
            if !ok {
                return Err(Error::Numerical("self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvariantBreach(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
