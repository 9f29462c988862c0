use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use isagrasp::error::{Error, Result};
use isagrasp::hand::HandDescription;
use isagrasp::pipeline::{self, Augmented, BaselineKind, EvalTable, Generation, PipelineConfig, RefinementComparison, SourceDemo, StageCounts};
use isagrasp::policy::PolicyNet;
use isagrasp::retarget::DemoRecord;

#[derive(Parser)]
#[command(name = "isagrasp", version, about = "Grasp dataset augmentation and policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding stage inputs and outputs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one demonstration per template and style.
    DemoSynth(Common),
    /// Retarget the demonstrations onto the robot hand.
    Retarget(Common),
    /// Refine source grasps and transfer them onto deformed instances.
    Augment(Common),
    /// Refine transferred grasps, write the dataset and the refinement report.
    Refine(Common),
    /// Train the policy on the dataset.
    Train(Common),
    /// Evaluate the policy and both baselines on held-out instances.
    Eval(Common),
    /// Print the refinement and evaluation tables.
    Report(Common),
    /// Evaluate a single baseline on the held-out instances.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: BaselineKind,
    },
    /// Re-verify every dataset record.
    Verify(Common),
    /// Print the effective configuration.
    Config(Common),
}

#[derive(Serialize, Deserialize)]
struct DemoEntry {
    template: usize,
    style: usize,
    demo: DemoRecord,
}

/// Everything `refine` learned except the records themselves.
#[derive(Serialize, Deserialize)]
struct RefinementFile {
    counts: StageCounts,
    comparison: RefinementComparison,
}

const DEMOS: &str = "demos.json";
const SOURCES: &str = "sources.json";
const AUGMENTED: &str = "augmented.json";
const DATASET: &str = "dataset.jsonl";
const REFINEMENT: &str = "refinement.json";
const CHECKPOINT: &str = "policy.ckpt";
const LOSS: &str = "loss.json";
const EVAL: &str = "eval.json";

struct Ctx {
    cfg: PipelineConfig,
    desc: HandDescription,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        let desc = cfg.hand_description()?;
        std::fs::create_dir_all(&c.out)?;
        Ok(Ctx {
            cfg,
            desc,
            out: c.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Dataset(format!("{}: {e} (run the earlier stage first)", p.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
    }

    fn write<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(name), value)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DemoSynth(c) => {
            let ctx = Ctx::new(&c)?;
            let demos = pipeline::synthesize_demos(&ctx.cfg)?;
            let entries: Vec<DemoEntry> = demos
                .into_iter()
                .map(|(template, style, demo)| DemoEntry { template, style, demo })
                .collect();
            ctx.write(DEMOS, &entries)?;
            println!("{} demonstrations -> {}", entries.len(), ctx.path(DEMOS).display());
        }
        Command::Retarget(c) => {
            let ctx = Ctx::new(&c)?;
            let entries: Vec<DemoEntry> = ctx.read(DEMOS)?;
            let demos: Vec<_> = entries.into_iter().map(|e| (e.template, e.style, e.demo)).collect();
            for (t, s, _) in &demos {
                if *t >= ctx.cfg.suite.templates.len() || *s >= ctx.cfg.suite.styles.len() {
                    return Err(Error::Dataset(format!("demo ({t}, {s}) does not match the configured suite")));
                }
            }
            let sources = pipeline::retarget_demos(&ctx.cfg, &ctx.desc, &demos)?;
            for s in &sources {
                println!("template {} {:<10} objective {:.3e}", s.template, s.style.name(), s.objective);
            }
            ctx.write(SOURCES, &sources)?;
        }
        Command::Augment(c) => {
            let ctx = Ctx::new(&c)?;
            let sources: Vec<SourceDemo> = ctx.read(SOURCES)?;
            let aug = pipeline::augment(&ctx.cfg, &ctx.desc, &sources)?;
            println!(
                "{}/{} source grasps refined, {} transfer candidates",
                aug.counts.sources_refined,
                sources.len(),
                aug.candidates.len()
            );
            ctx.write(AUGMENTED, &aug)?;
        }
        Command::Refine(c) => {
            let ctx = Ctx::new(&c)?;
            let aug: Augmented = ctx.read(AUGMENTED)?;
            let generation: Generation = pipeline::refine_candidates(&ctx.cfg, &ctx.desc, &aug)?;
            pipeline::write_dataset(&ctx.path(DATASET), &generation.records)?;
            let comparison = pipeline::compare_refinement(&ctx.cfg, &ctx.desc, &generation)?;
            print!("{}", pipeline::render_refinement(&comparison, &generation.counts));
            ctx.write(
                REFINEMENT,
                &RefinementFile {
                    counts: generation.counts,
                    comparison,
                },
            )?;
        }
        Command::Train(c) => {
            let ctx = Ctx::new(&c)?;
            let records = pipeline::read_dataset(&ctx.path(DATASET))?;
            let out = pipeline::train_policy(&ctx.cfg, &records)?;
            out.net.save(&ctx.path(CHECKPOINT))?;
            ctx.write(LOSS, &out.loss_curve)?;
            println!(
                "trained on {} records, final loss {:.4} -> {}",
                records.len(),
                out.loss_curve.last().copied().unwrap_or(f64::NAN),
                ctx.path(CHECKPOINT).display()
            );
        }
        Command::Eval(c) => {
            let ctx = Ctx::new(&c)?;
            let net = PolicyNet::load(&ctx.path(CHECKPOINT))?;
            let table = pipeline::run_eval(&ctx.cfg, &ctx.desc, &net)?;
            print!("{}", pipeline::render_eval_table(&table));
            ctx.write(EVAL, &table)?;
        }
        Command::Report(c) => {
            let ctx = Ctx::new(&c)?;
            let mut any = false;
            if ctx.path(REFINEMENT).exists() {
                let r: RefinementFile = ctx.read(REFINEMENT)?;
                println!("Refinement rate by grasp seed\n");
                print!("{}", pipeline::render_refinement(&r.comparison, &r.counts));
                any = true;
            }
            if ctx.path(EVAL).exists() {
                let t: EvalTable = ctx.read(EVAL)?;
                println!("\nLift success on held-out instances\n");
                print!("{}", pipeline::render_eval_table(&t));
                any = true;
            }
            if !any {
                return Err(Error::Dataset(format!("nothing to report in {}", ctx.out.display())));
            }
        }
        Command::Baseline { common, kind } => {
            let ctx = Ctx::new(&common)?;
            let instances = pipeline::eval_instances(&ctx.cfg)?;
            let row = pipeline::baseline_row(&ctx.cfg, &ctx.desc, &instances, kind);
            let columns = pipeline::columns_of(&instances);
            print!("{}", pipeline::render_eval_table(&EvalTable { columns, rows: vec![row] }));
        }
        Command::Verify(c) => {
            let ctx = Ctx::new(&c)?;
            let records = pipeline::read_dataset(&ctx.path(DATASET))?;
            let mut failed = 0;
            for (i, r) in records.iter().enumerate() {
                let v = pipeline::verify_record(&ctx.desc, r)?;
                if !v.ok() {
                    failed += 1;
                    eprintln!("record {i}: {v:?}");
                }
            }
            println!("{}/{} records verified", records.len() - failed, records.len());
            if failed > 0 {
                return Err(Error::Dataset(format!("{failed} records failed verification")));
            }
        }
        Command::Config(c) => {
            let ctx = Ctx::new(&c)?;
            print!("{}", ctx.cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
