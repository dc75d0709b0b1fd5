use std::path::PathBuf;

use clap::{Parser, Subcommand};
use regionedit::eval::Method;

use crate::cache::Cache;
use crate::config::{default_cache_dir, SharedFlags, Settings};
use crate::error::{exit, CliError, CliResult};
use crate::pipeline::{cmd_edit, cmd_eval, cmd_inspect, print_report, EditRequest, EvalRequest};

#[derive(Debug, Parser)]
#[command(name = "regionedit", version, about = "Mask-free local image editing with learned edit regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edit an image from a text prompt and write the best candidate.
    Edit(EditArgs),
    /// Like `edit`, but write overlays and every anchor's candidate.
    Inspect(EditArgs),
    /// Compare methods and ablations over a set of images.
    Eval(EvalArgs),
    /// Manage the feature and edit cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, clap::Args)]
pub struct EditArgs {
    /// Input image (PNG or JPEG).
    pub image: PathBuf,
    /// Edit prompt.
    #[arg(long, short)]
    pub prompt: String,
    /// Skip training and run inference with the initial parameters.
    #[arg(long)]
    pub untrained: bool,
    #[command(flatten)]
    pub shared: SharedFlags,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// JSON manifest: {"items": [{"image", "prompt", "roi_text"?, "name"?}]}.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Include the built-in synthetic scene.
    #[arg(long)]
    pub synthetic: bool,
    /// Comma-separated methods: ours, random-random, dino-random.
    #[arg(long, value_delimiter = ',', default_value = "ours")]
    pub methods: Vec<String>,
    /// Proposal counts to sweep, e.g. 1,3,7.
    #[arg(long, value_delimiter = ',', value_name = "M,..")]
    pub sweep_proposals: Vec<usize>,
    /// Anchor counts to sweep.
    #[arg(long, value_delimiter = ',', value_name = "K,..")]
    pub sweep_anchors: Vec<usize>,
    /// Add rows with loss terms switched off in turn.
    #[arg(long)]
    pub sweep_losses: bool,
    #[command(flatten)]
    pub shared: SharedFlags,
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    /// Print the cache location, entry count and size.
    Stats,
    /// Check every entry and evict corrupt ones.
    Verify,
    /// Remove every entry.
    Clear,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Edit(args) => {
            let settings = Settings::resolve(&args.shared, "regionedit-out")?;
            let req = EditRequest { image: &args.image, prompt: &args.prompt, untrained: args.untrained };
            let side = cmd_edit(&req, &settings)?;
            let w = &side.winner;
            println!(
                "anchor {} size {} S={:.4} (S_t2i {:.4}, S_i2i {:.4}) -> {}",
                w.anchor_index,
                w.size_index,
                w.quality.s,
                w.quality.s_t2i,
                w.quality.s_i2i,
                settings.out.join(&side.output).display()
            );
        }
        Command::Inspect(args) => {
            let settings = Settings::resolve(&args.shared, "regionedit-inspect")?;
            let req = EditRequest { image: &args.image, prompt: &args.prompt, untrained: args.untrained };
            let report = cmd_inspect(&req, &settings)?;
            for c in &report.candidates {
                println!(
                    "#{} anchor {} size {} S={:.4} {}",
                    c.rank, c.candidate.anchor_index, c.candidate.size_index, c.candidate.quality.s, c.file
                );
            }
        }
        Command::Eval(args) => {
            let settings = Settings::resolve(&args.shared, "regionedit-eval")?;
            let methods = args
                .methods
                .iter()
                .filter(|m| !m.is_empty())
                .map(|m| m.parse::<Method>().map_err(|e| CliError::usage(e.to_string())))
                .collect::<CliResult<Vec<_>>>()?;
            let req = EvalRequest {
                manifest: args.manifest,
                synthetic: args.synthetic,
                methods,
                sweep_proposals: args.sweep_proposals,
                sweep_anchors: args.sweep_anchors,
                sweep_losses: args.sweep_losses,
            };
            let report = cmd_eval(&req, &settings)?;
            print_report(&report, std::io::stdout()).map_err(|e| CliError::input(e.to_string()))?;
        }
        Command::Cache { action } => {
            let cache = Cache::open(default_cache_dir())?;
            let value = match action {
                CacheAction::Stats | CacheAction::Verify => {
                    let stats = cache.verify();
                    serde_json::json!({"root": cache.root(), "entries": stats.entries, "bytes": stats.bytes, "evicted": stats.evicted})
                }
                CacheAction::Clear => serde_json::json!({"root": cache.root(), "removed": cache.clear()?}),
            };
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        }
    }
    Ok(())
}
