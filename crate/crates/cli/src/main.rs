use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use voxfuse_core::config::{GenerateConfig, RunConfig};
use voxfuse_core::harness::{bench_retrieval, bench_to_csv, generate_scene, holdout_sweep, reports_to_csv, Pairing};
use voxfuse_core::pipeline::{load_scene, run_pipeline, Fixtures};
use voxfuse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "voxfuse", version, about = "Multi-depth LiDAR-camera voxel fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the multi-scale fusion pipeline and write tensors, BEV maps, and metrics.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Depths per seed (overrides mdu.k).
        #[arg(long)]
        k: Option<usize>,
        /// Seeds per instance (overrides mdu.seeds_per_instance).
        #[arg(long)]
        seeds: Option<usize>,
        /// Fixture directory (overrides fixtures_dir).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Also write per-stage wall-clock timings to this JSON file.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Hold-out evaluation of virtual point error and recall over a K sweep.
    EvalMdu {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values, e.g. 1,3,6,10.
        #[arg(long, default_value = "1,3,6,10")]
        k: String,
        /// Fraction of reference points held out (overrides holdout_fraction).
        #[arg(long)]
        holdout: Option<f64>,
        #[arg(long, value_enum, default_value_t = PairingArg::OwnSeed)]
        pairing: PairingArg,
    },
    /// Time reference assignment on random voxel sets.
    BenchGma {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated camera x LiDAR voxel counts, e.g. 50000x50000,100000x100000.
        #[arg(long, default_value = "50000x50000,100000x100000")]
        sizes: String,
        #[arg(long, default_value_t = 256)]
        l: usize,
        /// Ball radius in voxel units.
        #[arg(long, default_value_t = 4.0)]
        radius: f64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic scene directory with a matching fixtures/ directory.
    GenScene {
        #[command(flatten)]
        common: Common,
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory or generation descriptor such as
    /// gen:instances=10,points=200,kind=planar.
    #[arg(long)]
    scene: Option<String>,
    /// Base random seed (overrides rng_seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    OwnSeed,
    GlobalNearest,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::OwnSeed => Pairing::OwnSeed,
            PairingArg::GlobalNearest => Pairing::GlobalNearest,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.rng_seed = seed;
        }
        if let Some(scene) = &self.scene {
            if scene.starts_with("gen:") {
                cfg.scene.generate = Some(GenerateConfig::parse_descriptor(scene)?);
                cfg.scene.path = None;
            } else {
                cfg.scene.path = Some(PathBuf::from(scene));
                cfg.scene.generate = None;
            }
        }
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} value {x:?}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} list is empty")));
    }
    Ok(items)
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>> {
    let pairs: Vec<String> = parse_list(s, "size")?;
    pairs
        .iter()
        .map(|p| {
            let bad = || Error::InvalidArgument(format!("size must look like MxN, got {p:?}"));
            let (m, n) = p.split_once(['x', 'X']).ok_or_else(bad)?;
            Ok((m.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            common,
            out,
            k,
            seeds,
            fixtures,
            timings,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(k) = k {
                cfg.mdu.k = k;
            }
            if let Some(n) = seeds {
                cfg.mdu.seeds_per_instance = n;
            }
            if fixtures.is_some() {
                cfg.fixtures_dir = fixtures;
            }
            cfg.validate()?;
            let fixtures = match &cfg.fixtures_dir {
                Some(dir) => Fixtures::read_dir(dir, cfg.num_scales)?,
                None => Fixtures::generate(cfg.num_scales, cfg.channels, cfg.rng_seed),
            };
            let (scene, _) = load_scene(&cfg)?;
            let output = run_pipeline(&scene, &fixtures, &cfg)?;
            output.write(&out)?;
            if let Some(path) = timings {
                output.write_timings(&path)?;
            }
            eprintln!(
                "wrote {} scales to {} (nvpf {})",
                cfg.num_scales,
                out.display(),
                output.metrics.nvpf
            );
        }
        Command::EvalMdu {
            common,
            out,
            k,
            holdout,
            pairing,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(h) = holdout {
                cfg.holdout_fraction = h;
            }
            let ks: Vec<usize> = parse_list(&k, "K")?;
            cfg.validate()?;
            let (scene, _) = load_scene(&cfg)?;
            let reports = holdout_sweep(&scene, cfg.holdout_fraction, &ks, pairing.into(), cfg.rng_seed)?;
            write_file(&out, &reports_to_csv(&reports))?;
        }
        Command::BenchGma {
            out,
            sizes,
            l,
            radius,
            repeats,
            seed,
        } => {
            let sizes = parse_sizes(&sizes)?;
            let rows = bench_retrieval(&sizes, l, radius, repeats, seed)?;
            write_file(&out, &bench_to_csv(&rows, l, radius, repeats))?;
        }
        Command::GenScene { common, out } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let generate = cfg.scene.generate.unwrap_or_default();
            let synthetic = generate_scene(&generate.to_spec(cfg.channels, cfg.rng_seed))?;
            synthetic.scene.write_dir(&out)?;
            Fixtures::generate(cfg.num_scales, cfg.channels, cfg.rng_seed).write_dir(&out.join("fixtures"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
