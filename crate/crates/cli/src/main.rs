use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pdos_core::harness::{
    gen_multidoc_task, gen_planning_task, gen_retrieval_task, run_bench, run_task, EngineChoice, SuiteConfig, TaskKind,
    TaskScript,
};
use pdos_core::oracle::{run_isolation_oracle, run_mask_oracle};
use pdos_core::{build_layout, init_model, tree_mask, DecodeConfig, Instruction, Mode, ModelConfig};

/// Parallel decoding of independent steps inside one sequence.
#[derive(Parser)]
#[command(name = "pdos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one synthetic task and print the final text.
    Generate(GenerateArgs),
    /// Run task suites in both modes and report passes and speedups.
    Bench(BenchArgs),
    /// Run the mask and branch-isolation oracles; exits non-zero on failure.
    Oracle(OracleArgs),
    /// Print the attention visibility grid of a parallel block layout.
    DumpMask(DumpMaskArgs),
}

#[derive(Args)]
struct EngineArgs {
    /// Transformer config (TOML). Without it a rule-driven engine is used;
    /// with it a seeded transformer is steered by the task script.
    #[arg(long, value_name = "PATH")]
    model_config: Option<PathBuf>,
    /// Replace the built-in format instruction.
    #[arg(long, value_name = "PATH")]
    instruction: Option<PathBuf>,
}

impl EngineArgs {
    fn engine(&self) -> Result<EngineChoice> {
        Ok(match &self.model_config {
            None => EngineChoice::Scripted,
            Some(path) => {
                let config = ModelConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
                EngineChoice::Guided(Arc::new(init_model(config)?))
            }
        })
    }

    fn instruction(&self) -> Result<Instruction> {
        Ok(match &self.instruction {
            None => Instruction::builtin(),
            Some(path) => Instruction::load(path)?,
        })
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "retrieval")]
    suite: TaskKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "parallel")]
    mode: Mode,
    /// Branch count (aspect count for planning).
    #[arg(long, default_value_t = 10)]
    branches: usize,
    #[arg(long, default_value_t = 256)]
    max_steps: usize,
    /// Write the decode trace as JSON here.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Suites to run (repeatable); all three by default.
    #[arg(long)]
    suite: Vec<TaskKind>,
    /// Suite sizes and seeds (TOML); the shipped config by default.
    #[arg(long, value_name = "PATH")]
    suite_config: Option<PathBuf>,
    /// Added to every suite seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on instances per suite.
    #[arg(long)]
    instances: Option<usize>,
    /// Write the JSON report here.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Write the summary table as CSV here (it is always printed).
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Zero wall times in the JSON report so reruns compare byte for byte.
    #[arg(long)]
    no_timings: bool,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    layouts: usize,
    #[arg(long, default_value_t = 64)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f32,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpMaskArgs {
    /// Shared prefix length.
    #[arg(long, default_value_t = 3)]
    prefix: usize,
    /// Title length of each branch, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4])]
    titles: Vec<usize>,
    /// Body length of each branch, comma separated; a branch is padded once
    /// its body is done. Defaults to two steps for every branch.
    #[arg(long, value_delimiter = ',')]
    bodies: Vec<usize>,
    /// Continuation slots after the block.
    #[arg(long, default_value_t = 0)]
    continuation: usize,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn make_task(kind: TaskKind, branches: usize, seed: u64) -> Result<TaskScript> {
    Ok(match kind {
        TaskKind::Retrieval => gen_retrieval_task(branches, seed, 20, 5)?,
        TaskKind::Multidoc => gen_multidoc_task(branches, seed)?,
        TaskKind::Planning => gen_planning_task(branches, seed)?,
        TaskKind::Custom => bail!("custom tasks have no generator"),
    })
}

fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let task = make_task(args.suite, args.branches, args.seed)?;
    let config = DecodeConfig { max_steps_per_branch: args.max_steps, ..Default::default() };
    let (text, trace) = run_task(&task, &args.engine.engine()?, &args.engine.instruction()?, &config, args.mode)?;
    println!("{text}");
    if let Some(out) = &args.out {
        write_or_print(Some(out), &serde_json::to_string_pretty(&trace)?)?;
    }
    eprintln!(
        "{} tokens in {} passes ({} prefill, {} decode), {} block(s)",
        trace.output_tokens,
        trace.total_passes(),
        trace.prefill_passes(),
        trace.decode_passes(),
        trace.block_count
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let mut suite = match &args.suite_config {
        Some(p) => SuiteConfig::load(p)?,
        None => SuiteConfig::builtin(),
    };
    suite.retrieval.seed = suite.retrieval.seed.wrapping_add(args.seed);
    suite.multidoc.seed = suite.multidoc.seed.wrapping_add(args.seed);
    suite.planning.seed = suite.planning.seed.wrapping_add(args.seed);
    if let Some(n) = args.instances {
        suite.retrieval.instances = suite.retrieval.instances.min(n);
        suite.multidoc.instances = suite.multidoc.instances.min(n);
        suite.planning.instances = suite.planning.instances.min(n);
    }
    let kinds =
        if args.suite.is_empty() { vec![TaskKind::Retrieval, TaskKind::Multidoc, TaskKind::Planning] } else { args.suite };
    let suites = kinds.into_iter().map(|k| Ok((k, suite.tasks(k)?))).collect::<Result<Vec<_>>>()?;
    let report = run_bench(&suites, &args.engine.engine()?, &args.engine.instruction()?, &DecodeConfig::default())?;
    let report = if args.no_timings { report.without_timings() } else { report };

    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &args.csv {
        write_or_print(Some(p), &csv)?;
    }
    if let Some(p) = &args.out {
        write_or_print(Some(p), &serde_json::to_string_pretty(&report)?)?;
    }
    let failed: usize = report.suites.iter().map(|s| s.failed).sum();
    if failed > 0 {
        eprintln!("{failed} task(s) failed; see the errors field of their rows");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle(args: OracleArgs) -> Result<ExitCode> {
    let mask = run_mask_oracle(args.layouts, args.seed);
    let isolation = run_isolation_oracle(args.cases, args.seed);
    let passed = mask.passed() && isolation.passed(args.tolerance);
    let json = serde_json::json!({ "passed": passed, "mask": mask, "isolation": isolation });
    write_or_print(args.out.as_deref(), &(serde_json::to_string_pretty(&json)? + "\n"))?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn dump_mask(args: DumpMaskArgs) -> Result<ExitCode> {
    let bodies = if args.bodies.is_empty() { vec![2; args.titles.len()] } else { args.bodies };
    if bodies.len() != args.titles.len() {
        bail!("--bodies needs one entry per title ({} titles)", args.titles.len());
    }
    let mut layout = build_layout(args.prefix, &args.titles)?;
    for step in 0..bodies.iter().copied().max().unwrap_or(0) {
        let active: Vec<bool> = bodies.iter().map(|&l| step < l).collect();
        layout.push_step(&active)?;
    }
    layout.push_continuation(args.continuation);
    write_or_print(args.out.as_deref(), &tree_mask(&layout).to_grid())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Bench(a) => bench(a),
        Command::Oracle(a) => oracle(a),
        Command::DumpMask(a) => dump_mask(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
