//! Command-line surface. Exit codes: 0 ok, 1 check failure, 2 input error,
//! 3 I/O error, 4 compatibility error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{sample, write_samples_csv, InferenceMode};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::pipeline::{self, BaseRun};

#[derive(Debug, Parser)]
#[command(
    name = "hyperforget",
    version,
    about = "Concept unlearning with a hypernetwork adapter field"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base conditional denoiser.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace path. Defaults to `<out>.trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the hypernetwork field against a frozen base.
    TrainHypernet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace path. Defaults to `<out>.trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Draw samples for one concept and write them as CSV.
    Sample {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        hypernet: Option<PathBuf>,
        #[arg(long)]
        concept: usize,
        #[arg(long, default_value = "off")]
        mode: InferenceMode,
        /// Defaults to `eval.n_per_prompt`.
        #[arg(long)]
        n: Option<usize>,
        /// Defaults to `eval.guidance_w`.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation protocol and write a JSON report plus a CSV row.
    Evaluate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        hypernet: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump `‖θ_s‖` and the task loss along the predicted trajectory.
    Trajectory {
        #[arg(long)]
        hypernet: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        concept: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    RunConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_base(path: &Path) -> Result<(Checkpoint, BaseRun)> {
    let ck = Checkpoint::load(path)?;
    let run = pipeline::load_base(&ck)?;
    Ok((ck, run))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBase { config, out, trace } => {
            let cfg = read_config(&config)?;
            let (run, rows, warnings) = pipeline::train_base_run(&cfg)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            pipeline::base_checkpoint(&run, &pipeline::timestamp()).save(&out)?;
            let trace = trace.unwrap_or_else(|| with_suffix(&out, ".trace.jsonl"));
            write(&trace, pipeline::jsonl(&rows).as_bytes())?;
            if let Some(last) = rows.last() {
                eprintln!("trained base: {} steps, final loss {:.4}", rows.len(), last.loss);
            }
            println!("{}", out.display());
        }
        Command::TrainHypernet {
            config,
            base,
            out,
            trace,
        } => {
            let cfg = read_config(&config)?;
            let (ck, run) = load_base(&base)?;
            pipeline::check_base_fingerprint(&cfg, &ck)?;
            let (h, rows) = pipeline::train_hypernet_run(&cfg, &run)?;
            pipeline::hypernet_checkpoint(&cfg, &h, &pipeline::timestamp()).save(&out)?;
            let trace = trace.unwrap_or_else(|| with_suffix(&out, ".trace.jsonl"));
            write(&trace, pipeline::jsonl(&rows).as_bytes())?;
            if let Some(last) = rows.last() {
                eprintln!(
                    "trained hypernet: {} iterations, final loss {:.4e}",
                    rows.len(),
                    last.l_final
                );
            }
            println!("{}", out.display());
        }
        Command::Sample {
            base,
            hypernet,
            concept,
            mode,
            n,
            w,
            seed,
            out,
        } => {
            let (_, run) = load_base(&base)?;
            let h = match &hypernet {
                Some(p) => Some(pipeline::load_hypernet(&Checkpoint::load(p)?, &run)?.1),
                None if mode == InferenceMode::Off => None,
                None => return Err(Error::invalid(format!("--mode {mode} needs --hypernet"))),
            };
            let c = run.concepts.get(concept)?;
            let theta = match (&h, mode) {
                (Some(h), m) if m != InferenceMode::Off => Some(h.endpoint(&c.embedding)?),
                _ => None,
            };
            let adapter = h.as_ref().zip(theta.as_ref()).map(|(h, t)| (h.spec(), t));
            let batch = sample(
                &run.model,
                &run.schedule,
                mode,
                adapter,
                concept,
                &c.embedding,
                &run.concepts.null_embedding,
                n.unwrap_or(run.config.eval.n_per_prompt),
                w.unwrap_or(run.config.eval.guidance_w),
                seed,
            )?;
            let mut buf = Vec::new();
            write_samples_csv(&batch, &mut buf).expect("writing to memory");
            write(&out, &buf)?;
        }
        Command::Evaluate {
            base,
            hypernet,
            config,
            out,
        } => {
            let cfg = read_config(&config)?;
            let (base_ck, run) = load_base(&base)?;
            pipeline::check_base_fingerprint(&cfg, &base_ck)?;
            let h_ck = Checkpoint::load(&hypernet)?;
            pipeline::check_hypernet_fingerprint(&cfg, &h_ck)?;
            let (_, h) = pipeline::load_hypernet(&h_ck, &run)?;
            let report = pipeline::evaluate(&cfg, &run, Some(&h))?;
            let mut json = report.to_json();
            json.push('\n');
            write(&out, json.as_bytes())?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).expect("writing to memory");
            write(&out.with_extension("csv"), &csv)?;
            println!(
                "acc_e {:.3}  acc_s {:.3}  acc_g {:.3}  h_o {:.3}",
                report.acc_e, report.acc_s, report.acc_g, report.h_o_object
            );
        }
        Command::Gradcheck { seed } => {
            let table = gradcheck::run_suite(seed)?;
            println!(
                "{:<14} {:>9} {:>12} {:>12}  status",
                "check", "instances", "max_rel", "max_abs"
            );
            for r in &table {
                println!(
                    "{:<14} {:>9} {:>12.3e} {:>12.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_err,
                    r.max_abs_err,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            let failing: Vec<&str> = table.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failing.is_empty() {
                return Err(Error::Check(format!("gradient mismatch in {}", failing.join(", "))));
            }
        }
        Command::Trajectory {
            hypernet,
            base,
            concept,
            out,
        } => {
            let (_, run) = load_base(&base)?;
            let (cfg, h) = pipeline::load_hypernet(&Checkpoint::load(&hypernet)?, &run)?;
            let rows = pipeline::trajectory(&cfg, &run, &h, concept)?;
            write(&out, pipeline::jsonl(&rows).as_bytes())?;
        }
    }
    Ok(())
}
