use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cone_shap::game::SyntheticGameSpec;
use cone_shap::models::MaskingPolicy;
use cone_shap::oracle::{run_oracle, OracleSettings};
use cone_shap::pipeline::{self, Context, RunConfig};
use cone_shap::toy::ToyConfig;
use cone_shap::{Ablation, Error};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cone-shap", version, about = "Concept-based neighbor Shapley explanations for image classifiers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Neighbors sampled per draw.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Sampling repetitions.
    #[arg(long = "M", global = true)]
    draws: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Drop one edge type from the neighbor graph.
    #[arg(long, global = true)]
    ablate: Option<AblateArg>,
    #[arg(long, global = true)]
    masking: Option<MaskingArg>,
    /// Restrict class-level commands to this class.
    #[arg(long = "class", global = true)]
    class_id: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    NoPhysical,
    NoSemantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskingArg {
    Zero,
    Mean,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic colored-blob dataset and configs.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 40)]
        size: usize,
    },
    /// Multi-resolution superpixels for every image.
    Segment,
    /// Segment embeddings and k-means concepts per class.
    Discover,
    /// Per-segment attributions, saliency maps and instance concept importances.
    ExplainInstance {
        /// Image ids; all images of the selected classes when omitted.
        images: Vec<String>,
    },
    /// Class-wise concept scores.
    ExplainClass,
    /// Coherency, complexity, faithfulness and add/remove curves.
    Evaluate,
    /// Add/remove curves over a grid of k and M.
    Sweep,
    /// Segment, discover and evaluate in one go.
    Run,
    /// Compare every estimator on a synthetic game.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct OracleArgs {
    /// Synthetic game spec (JSON).
    #[arg(long, conflicts_with_all = ["ring", "grid", "additive"])]
    game: Option<PathBuf>,
    /// Edge-counting game on a ring of N players.
    #[arg(long)]
    ring: Option<usize>,
    /// Edge-counting game on an RxC grid, e.g. 3x4.
    #[arg(long)]
    grid: Option<String>,
    /// Additive game with the given comma-separated weights.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    additive: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2000)]
    mc_permutations: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// Completed, but some metric was undefined or a check failed.
    Warn,
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, Error> {
    let path = g.config.as_deref().ok_or_else(|| {
        Error::Precondition("this command needs --config PATH (see `cone-shap generate`)".into())
    })?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if let Some(m) = g.draws {
        cfg.draws = m;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(a) = g.ablate {
        cfg.ablation = match a {
            AblateArg::NoPhysical => Ablation::NoPhysical,
            AblateArg::NoSemantic => Ablation::NoSemantic,
        };
    }
    if let Some(m) = g.masking {
        cfg.masking = match m {
            MaskingArg::Zero => MaskingPolicy::Zero,
            MaskingArg::Mean => MaskingPolicy::MeanColor,
        };
    }
    if g.class_id.is_some() {
        cfg.class_id = g.class_id;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn oracle_spec(args: &OracleArgs) -> Result<SyntheticGameSpec, Error> {
    if let Some(path) = &args.game {
        return SyntheticGameSpec::load(path);
    }
    if let Some(n) = args.ring {
        if n < 3 {
            return Err(Error::Format("a ring needs at least 3 players".into()));
        }
        return Ok(SyntheticGameSpec::ring(n));
    }
    if let Some(g) = &args.grid {
        let parsed = g
            .split_once(['x', 'X'])
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)));
        return match parsed {
            Some((r, c)) if r >= 1 && c >= 1 => Ok(SyntheticGameSpec::grid(r, c)),
            _ => Err(Error::Format(format!("--grid expects RxC, got {g:?}"))),
        };
    }
    if let Some(w) = &args.additive {
        return Ok(SyntheticGameSpec::additive(w.clone()));
    }
    Err(Error::Precondition(
        "oracle needs one of --game, --ring, --grid or --additive".into(),
    ))
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn evaluate(ctx: &Context) -> Result<Outcome, Error> {
    let report = pipeline::cmd_evaluate(ctx)?;
    for u in &report.undefined_metrics {
        log::warn!("{u}");
    }
    print_json(&report)?;
    Ok(if report.undefined_metrics.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Warn
    })
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let g = &cli.global;
    match cli.command {
        Command::Generate {
            out,
            classes,
            per_class,
            size,
        } => {
            let toy = ToyConfig {
                classes,
                per_class,
                size,
                seed: g.seed.unwrap_or(0),
            };
            print_json(&pipeline::cmd_generate(&out, &toy)?)?;
            Ok(Outcome::Ok)
        }
        Command::Segment => {
            print_json(&pipeline::cmd_segment(&load_config(g)?)?)?;
            Ok(Outcome::Ok)
        }
        Command::Discover => {
            let ctx = Context::open(&load_config(g)?)?;
            print_json(&pipeline::cmd_discover(&ctx)?)?;
            Ok(Outcome::Ok)
        }
        Command::ExplainInstance { images } => {
            let ctx = Context::open(&load_config(g)?)?;
            let tables = pipeline::cmd_explain_instance(&ctx, &images)?;
            let written: Vec<&str> = tables.iter().map(|t| t.image_id.as_str()).collect();
            print_json(&serde_json::json!({ "run": ctx.cfg.run_name(), "images": written }))?;
            Ok(Outcome::Ok)
        }
        Command::ExplainClass => {
            let ctx = Context::open(&load_config(g)?)?;
            print_json(&pipeline::cmd_explain_class(&ctx)?)?;
            Ok(Outcome::Ok)
        }
        Command::Evaluate => evaluate(&Context::open(&load_config(g)?)?),
        Command::Sweep => {
            let ctx = Context::open(&load_config(g)?)?;
            print_json(&pipeline::cmd_sweep(&ctx)?)?;
            Ok(Outcome::Ok)
        }
        Command::Run => {
            let cfg = load_config(g)?;
            pipeline::cmd_segment(&cfg)?;
            let ctx = Context::open(&cfg)?;
            pipeline::cmd_discover(&ctx)?;
            evaluate(&ctx)
        }
        Command::Oracle(args) => {
            let spec = oracle_spec(&args)?;
            let settings = OracleSettings {
                k: g.k.unwrap_or(5),
                draws: g.draws.unwrap_or(1),
                seed: g.seed.unwrap_or(0),
                mc_permutations: args.mc_permutations,
            };
            let report = run_oracle(&spec, &settings)?;
            if let Some(path) = &args.out {
                write_report(path, &report)?;
            }
            print_json(&report)?;
            Ok(if report.passed() { Outcome::Ok } else { Outcome::Warn })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONE_SHAP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Warn) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
