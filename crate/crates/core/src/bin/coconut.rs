use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coconut::cli::{cmd_eval, cmd_gen, cmd_probe, cmd_train, Analysis, RunConfig, OUTPUT_ROOT_ENV};
use coconut::curriculum::{StageSchedule, Variant};
use coconut::prosqa::oracle::HeightMode;
use coconut::prosqa::Split;
use coconut::Error;

#[derive(Parser)]
#[command(name = "coconut", version, about = "Continuous-thought reasoning lab")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Relative paths resolve under $COCONUT_OUTPUT_ROOT when set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ProsQA train/val/test splits.
    Gen(GenArgs),
    /// Train a model through the staged curriculum.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a k sweep.
    Eval(EvalArgs),
    /// Analyse frontier values, heights or thought decodings.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Train,val,test sizes.
    #[arg(long, alias = "n", value_delimiter = ',')]
    split_sizes: Option<Vec<usize>>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    min_path: Option<usize>,
    #[arg(long)]
    max_path: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Prosqa,
    Gsm8k,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Same epoch count for every stage.
    #[arg(long)]
    epochs_per_stage: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_parser = parse_analysis)]
    analysis: Option<Analysis>,
    #[arg(long, value_delimiter = ',')]
    step: Option<Vec<usize>>,
    #[arg(long)]
    example: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    longest_height: bool,
    #[arg(long)]
    normalize: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_analysis(s: &str) -> Result<Analysis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split {s:?}"))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn configure(cli: Cli) -> coconut::Result<(RunConfig, Command)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.output_dir, cli.out);
    set(&mut cfg.data.dir, cli.data);
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    match &cli.command {
        Command::Gen(a) => {
            cfg.command = "gen".into();
            if let Some(s) = &a.split_sizes {
                if s.len() != 3 {
                    return Err(Error::Config("--split-sizes takes train,val,test".into()));
                }
                cfg.data.sizes.train = s[0];
                cfg.data.sizes.val = s[1];
                cfg.data.sizes.test = s[2];
            }
            set(&mut cfg.data.generator.nodes, a.nodes);
            set(&mut cfg.data.generator.min_path, a.min_path);
            set(&mut cfg.data.generator.max_path, a.max_path);
        }
        Command::Train(a) => {
            cfg.command = "train".into();
            let variant = a.variant.unwrap_or(cfg.schedule.variant);
            match a.preset {
                Some(Preset::Prosqa) => cfg.schedule = StageSchedule::prosqa(variant),
                Some(Preset::Gsm8k) => cfg.schedule = StageSchedule::gsm8k(variant),
                None => cfg.schedule.variant = variant,
            }
            let s = &mut cfg.schedule;
            set(&mut s.max_epochs, a.max_epochs);
            if let Some(e) = a.epochs_per_stage {
                s.epochs_per_stage = vec![e; s.stages + 1];
            }
            set(&mut s.batch_size, a.batch_size);
            set(&mut s.lr, a.lr);
            set(&mut cfg.data.train_limit, a.train_limit.map(Some));
            set(&mut cfg.data.val_limit, a.val_limit.map(Some));
            set(&mut cfg.model.layers, a.layers);
            set(&mut cfg.model.d_model, a.d_model);
            set(&mut cfg.model.heads, a.heads);
            set(&mut cfg.model.d_ff, a.d_ff);
        }
        Command::Eval(a) => {
            cfg.command = "eval".into();
            set(&mut cfg.eval.ks, a.k.clone());
            set(&mut cfg.eval.checkpoint, a.checkpoint.clone().map(Some));
            set(&mut cfg.eval.split, a.split);
            set(&mut cfg.eval.limit, a.limit.map(Some));
        }
        Command::Probe(a) => {
            cfg.command = "probe".into();
            let p = &mut cfg.probe;
            set(&mut p.analysis, a.analysis);
            if p.analysis == Analysis::Height {
                set(&mut p.height_steps, a.step.clone());
            } else {
                set(&mut p.steps, a.step.clone());
            }
            set(&mut p.example, a.example);
            set(&mut p.k, a.k);
            set(&mut p.checkpoint, a.checkpoint.clone().map(Some));
            set(&mut p.split, a.split);
            set(&mut p.limit, a.limit.map(Some));
            if a.longest_height {
                p.options.height_mode = HeightMode::Longest;
            }
            p.options.normalize |= a.normalize;
        }
    }
    Ok((cfg, cli.command))
}

fn run(cli: Cli) -> coconut::Result<()> {
    let (cfg, command) = configure(cli)?;
    match command {
        Command::Gen(_) => {
            let s = cmd_gen(&cfg)?;
            println!(
                "wrote {} ({} / {} / {}): mean nodes {:.2}, edges {:.2}, shortest path {:.2} x {:.2}",
                cfg.data.dir.display(),
                s.train.instances,
                s.val.instances,
                s.test.instances,
                s.train.mean_nodes,
                s.train.mean_edges,
                s.train.mean_shortest_path_len,
                s.train.mean_shortest_path_count
            );
        }
        Command::Train(_) => {
            let mut log = |m: &coconut::curriculum::EpochMetrics| {
                println!(
                    "stage {} epoch {:>2}  loss {:.4}  val {:.3}",
                    m.stage, m.epoch, m.train_loss, m.val_accuracy
                );
            };
            let out = cmd_train(&cfg, Some(&mut log))?;
            let best = coconut::curriculum::select_checkpoint(&out.records)?;
            println!(
                "selected stage {} epoch {} (val {:.3}) in {}",
                best.stage,
                best.epoch,
                best.val_accuracy,
                cfg.output_dir.display()
            );
        }
        Command::Eval(_) => {
            let ev = cmd_eval(&cfg)?;
            for s in &ev.report.per_k {
                println!("k={} accuracy {:.3} tokens {:.2}", s.k, s.accuracy, s.mean_new_tokens);
            }
        }
        Command::Probe(_) => {
            for p in cmd_probe(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
