//! Command-line front end: argument parsing, config merging and the four
//! pipeline commands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_extract_mesh, cmd_optimize, cmd_prune, cmd_render};
pub use config::RunConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing inputs (exit code 2).
    Usage(String),
    /// Failure while running (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (CliError::Usage(m) | CliError::Runtime(m)) = self;
        f.write_str(&m.replace('\n', " "))
    }
}

impl From<splatkit::Error> for CliError {
    fn from(e: splatkit::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Library errors raised while validating inputs count as usage errors.
pub(crate) fn usage(e: splatkit::Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "splatkit", version, about = "Gaussian splatting rendering, optimization and meshing")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    /// Verbose logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render color, median depth and opacity for every camera.
    Render(RenderArgs),
    /// Fit a cloud to posed images.
    Optimize(OptimizeArgs),
    /// Fuse median-depth renders into a triangle mesh.
    ExtractMesh(ExtractArgs),
    /// Remove kernels by opacity, sky mask or free-space depth.
    Prune(PruneArgs),
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Sky checkpoint; enables hybrid compositing.
    #[arg(long)]
    pub sky: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_triple)]
    pub background: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Directory of `<camera id>.png` images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Directory of `<camera id>.png` sky masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Initial cloud; without it `--init-random` kernels are sampled.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub init_random: Option<usize>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    /// Add a sky ball.
    #[arg(long)]
    pub sky: bool,
    #[arg(long)]
    pub sky_points: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Views per step; 0 uses all.
    #[arg(long)]
    pub views_per_step: Option<usize>,
    #[arg(long)]
    pub lambda_scale: Option<f64>,
    #[arg(long)]
    pub lambda_entropy: Option<f64>,
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub lambda_sky: Option<f64>,
    /// Apply the sky penalty during this many initial steps.
    #[arg(long)]
    pub sky_loss_steps: Option<u64>,
    #[arg(long)]
    pub no_densify: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Render from these cameras instead of an orbit.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub voxel_div: Option<f64>,
    #[arg(long)]
    pub trunc_div: Option<f64>,
    #[arg(long)]
    pub depth_clip: Option<f64>,
    #[arg(long)]
    pub max_voxels: Option<u64>,
    /// Mesh path; `.ply` for binary PLY, anything else for OBJ.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cameras per orbit ring.
    #[arg(long)]
    pub orbit_views: Option<usize>,
    /// Ring elevation in degrees; repeat for several rings.
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    pub orbit_elevation: Vec<f64>,
    #[arg(long)]
    pub orbit_distance: Option<f64>,
    #[arg(long)]
    pub orbit_size: Option<u32>,
    #[arg(long)]
    pub orbit_focal: Option<f64>,
    #[arg(long, value_parser = parse_triple, allow_negative_numbers = true)]
    pub orbit_up: Option<[f64; 3]>,
    #[arg(long)]
    pub no_colors: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Remove kernels with opacity below this.
    #[arg(long)]
    pub opacity: Option<f64>,
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Directory of `<camera id>.png` sky masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub mask_fraction: Option<f64>,
    /// Directory of `<camera id>_depth.pfm` reference depths.
    #[arg(long)]
    pub depths: Option<PathBuf>,
    #[arg(long)]
    pub margin: Option<f64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

/// Fold the subcommand's flags into `cfg`.
pub fn apply_flags(cfg: &mut RunConfig, command: Command) -> Command {
    match &command {
        Command::Render(a) => {
            set_opt(&mut cfg.paths.model, a.input.clone());
            set_opt(&mut cfg.paths.cameras, a.cameras.clone());
            set_opt(&mut cfg.paths.sky, a.sky.clone());
            set_opt(&mut cfg.paths.output, a.out.clone());
            set(&mut cfg.render.background, a.background);
        }
        Command::Optimize(a) => {
            set_opt(&mut cfg.paths.cameras, a.cameras.clone());
            set_opt(&mut cfg.paths.images, a.images.clone());
            set_opt(&mut cfg.paths.masks, a.masks.clone());
            set_opt(&mut cfg.paths.model, a.init.clone());
            set_opt(&mut cfg.paths.output, a.out.clone());
            set(&mut cfg.init.random_kernels, a.init_random);
            set(&mut cfg.init.sh_degree, a.sh_degree);
            cfg.init.sky |= a.sky;
            set(&mut cfg.init.sky_points, a.sky_points);
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.train.log_interval, a.log_interval);
            set(&mut cfg.checkpoint_interval, a.checkpoint_interval);
            set(&mut cfg.train.views_per_step, a.views_per_step);
            set(&mut cfg.train.weights.scale, a.lambda_scale);
            set(&mut cfg.train.weights.entropy, a.lambda_entropy);
            set(&mut cfg.train.weights.mask, a.lambda_mask);
            set(&mut cfg.train.weights.sky, a.lambda_sky);
            set(&mut cfg.train.sky_loss_steps, a.sky_loss_steps);
            if a.no_densify {
                cfg.train.densify.enabled = false;
            }
        }
        Command::ExtractMesh(a) => {
            set_opt(&mut cfg.paths.model, a.input.clone());
            set_opt(&mut cfg.paths.cameras, a.cameras.clone());
            set_opt(&mut cfg.paths.output, a.out.clone());
            let m = &mut cfg.mesh;
            set(&mut m.voxel_div, a.voxel_div);
            set(&mut m.trunc_div, a.trunc_div);
            set(&mut m.depth_clip, a.depth_clip);
            set(&mut m.max_voxels, a.max_voxels);
            set(&mut m.orbit.views, a.orbit_views);
            if !a.orbit_elevation.is_empty() {
                m.orbit.elevations = a.orbit_elevation.clone();
            }
            set(&mut m.orbit.distance, a.orbit_distance);
            if let Some(s) = a.orbit_size {
                m.orbit.width = s;
                m.orbit.height = s;
            }
            if let Some(f) = a.orbit_focal {
                m.orbit.fx = f;
                m.orbit.fy = f;
            }
            set(&mut m.orbit.up, a.orbit_up);
            if a.no_colors {
                m.colors = false;
            }
        }
        Command::Prune(a) => {
            set_opt(&mut cfg.paths.model, a.input.clone());
            set_opt(&mut cfg.paths.output, a.out.clone());
            set_opt(&mut cfg.paths.cameras, a.cameras.clone());
            set_opt(&mut cfg.paths.masks, a.masks.clone());
            set_opt(&mut cfg.paths.depths, a.depths.clone());
            set_opt(&mut cfg.prune.opacity, a.opacity);
            set(&mut cfg.prune.mask_fraction, a.mask_fraction);
            set_opt(&mut cfg.prune.margin, a.margin);
        }
    }
    command
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();

    let result = (|| {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        match apply_flags(&mut cfg, cli.command) {
            Command::Render(_) => cmd_render(&cfg).map(|_| ()),
            Command::Optimize(_) => cmd_optimize(&cfg).map(|_| ()),
            Command::ExtractMesh(_) => cmd_extract_mesh(&cfg).map(|_| ()),
            Command::Prune(_) => cmd_prune(&cfg).map(|_| ()),
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
