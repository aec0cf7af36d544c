//! `nitp`: train, verify, probe and account for next-implicit-token runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nitp_core::flops::{full_breakdown, ArchSpec};
use nitp_core::probes::{snapshot_trace, ProbeConfig};
use nitp_core::theory::{run_verification, VerifyCase, VerifyConfig};
use nitp_core::train::ablate::run_ablation;
use nitp_core::train::checkpoint::load_model;
use nitp_core::train::compare::RunSummary;
use nitp_core::train::trainer::metrics_path;
use nitp_core::train::{
    compare_runs, load_corpus, read_metrics, synthetic_corpus, AblationAxis, Batcher, RunConfig, Trainer,
};
use nitp_core::Graph;

#[derive(Parser)]
#[command(name = "nitp", version, about = "Desk-scale next-implicit-token prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Check the closed-form gradient, Hessian and lifting on random cases.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "3,8,32,128")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 10)]
        tangents: usize,
        #[arg(long, default_value_t = 0.8)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One JSON object per case instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Effective rank and average cosine of a checkpoint's final states.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 1024)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-token training FLOPs and the implicit-token overhead.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train the baseline and every variant along one axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// target_layer, shift, loss, lambda, start_step, projector or sg.
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        json: bool,
    },
    /// Step-aligned differences between two metric logs (b − a).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a deterministic synthetic text corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

// Pass thresholds for `verify`.
const GRAD_TOL: f64 = 1e-8;
const HESS_TOL: f64 = 1e-5;
const SYM_TOL: f64 = 1e-12;
const RADIAL_TOL: f64 = 1e-12;
const TANGENT_TOL: f64 = 1e-10;
const LIFT_TOL: f64 = 1e-8;

fn case_ok(c: &VerifyCase) -> bool {
    c.grad_err <= GRAD_TOL
        && c.hess_err <= HESS_TOL
        && c.asymmetry <= SYM_TOL
        && c.radial <= RADIAL_TOL
        && c.tangent_rel_err <= TANGENT_TOL
        && c.lift_err <= LIFT_TOL
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume } => {
            let run = RunConfig::load(&config)?;
            let mut trainer = match resume {
                Some(dir) => Trainer::resume(Some(run), &dir)?,
                None => Trainer::new(run)?,
            };
            let records = trainer.run_to_end()?;
            if let Some(path) = metrics_path(trainer.run_config()) {
                println!("metrics: {}", path.display());
            }
            match RunSummary::of(&records) {
                Some(s) => println!("{}", serde_json::to_string_pretty(&s)?),
                None => println!("nothing to do: already at step {}", trainer.step()),
            }
        }
        Command::Verify {
            dims,
            cases,
            tangents,
            lambda,
            seed,
            json,
        } => {
            let cfg = VerifyConfig {
                cases,
                tangents,
                lambda,
                seed,
                ..Default::default()
            };
            let rows = run_verification(&dims, &cfg)?;
            if !json {
                println!(
                    "{:>5} {:>4} {:>10} {:>11} {:>9} {:>9} {:>10} {:>10} {:>12}",
                    "case", "d", "grad_err", "max_abs_err", "asym", "radial", "tangent", "lift_err", "min_lifted"
                );
            }
            for c in &rows {
                if json {
                    println!("{}", serde_json::to_string(c)?);
                } else {
                    println!(
                        "{:>5} {:>4} {:>10.2e} {:>11.2e} {:>9.1e} {:>9.1e} {:>10.1e} {:>10.1e} {:>12.5e}{}",
                        c.id,
                        c.dim,
                        c.grad_err,
                        c.hess_err,
                        c.asymmetry,
                        c.radial,
                        c.tangent_rel_err,
                        c.lift_err,
                        c.min_lifted,
                        if case_ok(c) { "" } else { "  FAIL" }
                    );
                }
            }
            let failed = rows.iter().filter(|c| !case_ok(c)).count();
            eprintln!("{} cases, {failed} outside tolerance", rows.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Probe {
            checkpoint,
            corpus,
            batch,
            seq_len,
            pairs,
            seed,
        } => {
            let model = load_model(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            if seq_len > model.config().max_seq_len {
                bail!("seq_len {seq_len} exceeds the model's max_seq_len {}", model.config().max_seq_len);
            }
            let mut batcher = Batcher::new(load_corpus(&corpus)?, batch, seq_len, seed)?;
            let tokens = batcher.batch(0);
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let fwd = model.forward(&mut g, &vars, &tokens, seq_len)?;
            let cfg = ProbeConfig {
                num_pairs: pairs,
                seed,
                ..Default::default()
            };
            let snap = snapshot_trace(&g, &fwd.trace, 0, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&snap)?);
        }
        Command::Flops { config, json } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let spec: ArchSpec = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let b = full_breakdown(&spec)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&b)?);
            } else {
                println!("attention / layer    {:>14.4e}", b.attention_flops as f64);
                println!("ffn / layer          {:>14.4e}", b.ffn_flops as f64);
                println!("backbone             {:>14.4e}", b.backbone_flops as f64);
                println!("unembedding          {:>14.4e}", b.unembedding_flops as f64);
                println!("baseline total       {:>14.4e}", b.baseline_total as f64);
                println!("nitp projection      {:>14.4e}", b.nitp_projection_flops as f64);
                println!("nitp cosine          {:>14.4e}", b.nitp_cosine_flops as f64);
                println!("nitp overhead        {:>14.4e}", b.nitp_overhead as f64);
                println!("overhead ratio       {:>13.3}%", 100.0 * b.overhead_ratio);
            }
        }
        Command::Ablate { config, axis, json } => {
            let base = RunConfig::load(&config)?;
            let tokens = load_corpus(&base.corpus)?;
            let results = run_ablation(&base, axis, &tokens)?;
            if json {
                for r in &results {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                println!("{:<28} {:>10} {:>10} {:>10} {:>10}", "variant", "ntp_loss", "eff_rank", "avg_cos", "align");
                for r in &results {
                    let s = &r.summary;
                    println!(
                        "{:<28} {:>10.4} {:>10} {:>10} {:>10}",
                        r.label,
                        s.final_ntp_loss,
                        opt(s.late_effective_rank),
                        opt(s.late_avg_cosine),
                        opt(s.final_alignment)
                    );
                }
            }
        }
        Command::Compare { a, b, json } => {
            let cmp = compare_runs(&read_metrics(&a)?, &read_metrics(&b)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp)?);
            } else {
                print!("{}", cmp.render());
            }
        }
        Command::SynthCorpus { out, bytes, seed } => {
            std::fs::write(&out, synthetic_corpus(bytes, seed)).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
