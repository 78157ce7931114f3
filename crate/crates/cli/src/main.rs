use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgegrad::fd::{FDConfig, FdScheme};
use edgegrad_cli::commands::{
    cmd_fd_check, cmd_grad, cmd_optimize, cmd_render, Common, FdCheckArgs, GradArgs, RenderArgs,
};

/// Differentiable rasterization experiments.
#[derive(Parser, Debug)]
#[command(name = "edgegrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Scene (render, grad, fd-check) or experiment (optimize) JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 is the bit-reproducible reference mode.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print edge pair classification statistics.
    #[arg(long)]
    stats: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render every camera to PNG, optionally dumping raster buffers as PFM.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        /// Square resolution overriding the config size.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        dump_index: bool,
        #[arg(long)]
        dump_depth: bool,
        #[arg(long)]
        dump_bary: bool,
        #[arg(long)]
        dump_backface: bool,
    },
    /// Vertex gradients, forward-gradient images and pair statistics.
    Grad {
        #[command(flatten)]
        common: CommonArgs,
        /// `l2` (against the config target) or `mean`.
        #[arg(long)]
        loss: Option<String>,
        /// Scalar parameter for the forward-gradient image: `V:AXIS`, `all:AXIS` or `random`.
        #[arg(long)]
        param: Option<String>,
        #[arg(long)]
        resolution: Option<usize>,
        /// Continuous-only gradients.
        #[arg(long)]
        no_edges: bool,
        #[arg(long)]
        no_intersections: bool,
        /// Also write the finite-difference forward gradient.
        #[arg(long)]
        fd: bool,
    },
    /// Compare gradient variants with the supersampled finite-difference oracle.
    FdCheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        loss: Option<String>,
        /// Comma-separated square resolutions, e.g. 32,64,128,256.
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        supersampling: usize,
        /// Step in pixels.
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        /// One-sided differences instead of central ones.
        #[arg(long)]
        forward_differences: bool,
        /// Write fd_check.csv to the output directory.
        #[arg(long)]
        csv: bool,
    },
    /// Fit a mesh to target renders.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn common(a: &CommonArgs) -> Common {
    Common {
        out: a.out.clone(),
        threads: a.threads,
        seed: a.seed,
        stats: a.stats,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = match &cli.command {
        Command::Render { common, .. }
        | Command::Grad { common, .. }
        | Command::FdCheck { common, .. }
        | Command::Optimize { common } => common.threads,
    };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let mut out = io::stdout();
    let result = match &cli.command {
        Command::Render {
            common: c,
            resolution,
            dump_index,
            dump_depth,
            dump_bary,
            dump_backface,
        } => {
            let args = RenderArgs {
                resolution: *resolution,
                dump_index: *dump_index,
                dump_depth: *dump_depth,
                dump_bary: *dump_bary,
                dump_backface: *dump_backface,
            };
            cmd_render(&c.config, &common(c), &args, &mut out).map(|_| ())
        }
        Command::Grad {
            common: c,
            loss,
            param,
            resolution,
            no_edges,
            no_intersections,
            fd,
        } => {
            let args = GradArgs {
                loss: loss.clone(),
                param: param.clone(),
                resolution: *resolution,
                no_edges: *no_edges,
                no_intersections: *no_intersections,
                fd: *fd,
            };
            cmd_grad(&c.config, &common(c), &args, &mut out).map(|_| ())
        }
        Command::FdCheck {
            common: c,
            loss,
            resolutions,
            supersampling,
            epsilon,
            forward_differences,
            csv,
        } => {
            let args = FdCheckArgs {
                loss: loss.clone(),
                resolutions: resolutions.clone(),
                fd: FDConfig {
                    supersampling: *supersampling,
                    epsilon: *epsilon,
                    scheme: if *forward_differences { FdScheme::Forward } else { FdScheme::Central },
                },
                csv: *csv,
            };
            cmd_fd_check(&c.config, &common(c), &args, &mut out).map(|_| ())
        }
        Command::Optimize { common: c } => cmd_optimize(&c.config, &common(c), &mut out).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
