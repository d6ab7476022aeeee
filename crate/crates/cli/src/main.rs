use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use sparsevid::bench::{run_bench, BenchSpec};
use sparsevid::fixtures::{
    generate_grid, write_tensor, Correlation, GridDims, NoiseDistribution, SeededNoiseSpec,
};
use sparsevid::pipeline::{run_pipeline_with, PipelineConfig, RunOptions};
use sparsevid::policy::{
    allocate, entropy_profile_from_dumps, find_dumps, Aggregation, BaseSchedule, EntropyProfile,
    PolicyParams,
};
use sparsevid::{Error, ErrorClass};

const DOC_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "sparsevid", version, about = "Token merging, cube-sparse attention and entropy-aware sparsity allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded noise grid as a tensor file plus JSON sidecar.
    GenFixture {
        #[arg(long)]
        seed: u64,
        /// T,H,W,d
        #[arg(long, value_parser = parse_dims)]
        dims: GridDims,
        #[arg(long, value_enum, default_value_t = FixtureMode::Iid)]
        mode: FixtureMode,
        #[arg(long, value_enum, default_value_t = Distribution::Normal)]
        distribution: Distribution,
        /// Box-filter window per axis for smoothed mode, as t,h,w.
        #[arg(long, value_parser = parse_triple, default_value = "1,2,2")]
        window: [usize; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate per-layer sparsity from an entropy profile.
    Allocate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the toy pipeline and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Final token grid as a tensor file.
        #[arg(long)]
        out_grid: Option<PathBuf>,
        /// Per-layer cost rows.
        #[arg(long)]
        cost_csv: Option<PathBuf>,
        /// Directory for per-layer attention-weight dumps.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Time cube-sparse attention across token counts and sparsity levels.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the thread count given in the bench spec file.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Layer-wise entropy bands from attention-weight dumps.
    Entropy {
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an entropy profile document usable by `allocate`.
        #[arg(long)]
        profile_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Reduce::Mean)]
        aggregate: Reduce,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureMode {
    Iid,
    Smoothed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distribution {
    Normal,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reduce {
    Mean,
    Min,
    Max,
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_dims(s: &str) -> Result<GridDims, String> {
    match parse_list(s)?.as_slice() {
        &[t, h, w, d] => GridDims::new(t, h, w, d).map_err(|e| e.to_string()),
        other => Err(format!("expected T,H,W,d, got {} values", other.len())),
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)?
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected 3 values, got {}", v.len()))
}

/// Reads a JSON object whose `version` field sits beside the payload's own
/// fields; everything but `version` must belong to `T`.
fn read_doc<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let mut value: Value = read_json(path)?;
    let version = value
        .as_object_mut()
        .and_then(|m| m.remove("version"))
        .and_then(|v| v.as_u64());
    if version != Some(DOC_VERSION as u64) {
        return Err(Error::Validation(format!(
            "{}: missing or unsupported version {version:?}, expected {DOC_VERSION}",
            path.display()
        ))
        .into());
    }
    serde_json::from_value(value)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_doc<T: Serialize>(path: &Path, body: &T) -> anyhow::Result<()> {
    let mut value = serde_json::to_value(body)?;
    if let Some(map) = value.as_object_mut() {
        map.insert("version".into(), Value::from(DOC_VERSION));
    }
    write_json(path, &value)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    if threads == 0 {
        bail!(Error::Validation("threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenFixture {
            seed,
            dims,
            mode,
            distribution,
            window,
            out,
        } => {
            let spec = SeededNoiseSpec {
                seed,
                distribution: match distribution {
                    Distribution::Normal => NoiseDistribution::StandardNormal,
                    Distribution::Uniform => NoiseDistribution::UniformUnit,
                },
                correlation: match mode {
                    FixtureMode::Iid => Correlation::Iid,
                    FixtureMode::Smoothed => Correlation::BlockSmoothed(window),
                },
            };
            let grid = generate_grid(&spec, dims)?;
            write_tensor(&grid, &out)?;
            println!("{}", grid.checksum());
        }
        Command::Allocate {
            profile,
            schedule,
            params,
            out,
        } => {
            let profile: EntropyProfile = read_doc(&profile)?;
            let schedule: BaseSchedule = read_doc(&schedule)?;
            let params: PolicyParams = read_doc(&params)?;
            let alloc = allocate(&profile, &schedule, &params)?;
            write_doc(&out, &alloc)?;
        }
        Command::Run {
            config,
            trace,
            csv,
            out_grid,
            cost_csv,
            dump_dir,
            sample,
            threads,
        } => {
            let cfg: PipelineConfig = read_json(&config)?;
            if let Some(dir) = &dump_dir {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let opts = RunOptions { dump_dir, sample };
            let (grid, record) = with_threads(threads, || run_pipeline_with(&cfg, &opts))??;
            write_json(&trace, &record)?;
            record.write_csv(create(&csv)?)?;
            if let Some(path) = cost_csv {
                record.cost.write_csv(create(&path)?)?;
            }
            if let Some(path) = out_grid {
                write_tensor(&grid, &path)?;
            }
            println!(
                "modelled speedup: total {:.3}x, attention {:.3}x (measured wall-clock reference {}x DiT)",
                record.cost.speedup_total,
                record.cost.speedup_attention,
                record.cost.wallclock_reference.dit_speedup
            );
        }
        Command::Bench { spec, out, threads } => {
            let mut spec: BenchSpec = read_json(&spec)?;
            if threads.is_some() {
                spec.threads = threads;
            }
            let report = run_bench(&spec)?;
            report.write_csv(create(&out)?)?;
            let mut meta = out.clone().into_os_string();
            meta.push(".json");
            write_json(Path::new(&meta), &report.metadata)?;
        }
        Command::Entropy {
            dumps,
            out,
            profile_out,
            aggregate,
        } => {
            let bands = entropy_profile_from_dumps(&find_dumps(&dumps)?)?;
            bands.write_csv(create(&out)?)?;
            if let Some(path) = profile_out {
                let how = match aggregate {
                    Reduce::Mean => Aggregation::Mean,
                    Reduce::Min => Aggregation::Min,
                    Reduce::Max => Aggregation::Max,
                };
                write_doc(&path, &bands.profile(how))?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.class() == ErrorClass::Internal => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
