//! The `airlift` command line: argument parsing and dispatch to the library.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::ExitStatus;

use airlift::archive::{self, PackOptions, RootfsArchive};
use airlift::bench::{self, MeasureOptions, Report};
use airlift::image::{self, FlattenedRootfs};
use airlift::launcher::{self, LaunchPlan, LaunchTemplate, Walltime};
use airlift::runtime::{self, Bind, Container, ContainerSpec, EnvPolicy};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{GlobalConfig, Layer};

/// Exit code for bad usage.
pub const EXIT_USAGE: i32 = 1;
/// Exit code when an operation fails.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "airlift",
    version,
    about = "Move container images to air-gapped HPC systems and run them unprivileged"
)]
pub struct Cli {
    /// Read settings from this key=value file [env: AIRLIFT_CONFIG]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Host directory bound into every container (repeatable) [env: AIRLIFT_SITE_BIND_DIRS]
    #[arg(long = "site-bind", global = true, value_name = "DIR")]
    pub site_bind: Vec<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Squash an OCI layout or docker-save tarball into a rootfs archive
    Flatten(FlattenArgs),
    /// Pack a rootfs directory (or an image input, flattened first) into a rootfs archive
    Pack(PackArgs),
    /// Extract a rootfs archive into a directory
    Unpack(UnpackArgs),
    /// Run a command inside an unpacked rootfs
    Run(RunArgs),
    /// Generate launch commands and batch scripts
    #[command(subcommand)]
    Launch(LaunchCommand),
    /// Measure or analyse containerization overhead
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Speedup and parallel efficiency from epoch times
    ScaleReport(ScaleArgs),
    /// Report what the kernel offers for unprivileged containers
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct FlattenArgs {
    /// OCI image layout directory or docker-save tarball
    pub input: PathBuf,
    /// Output archive (.tar.gz)
    pub output: PathBuf,
    /// Input format: auto, oci or docker-save
    #[arg(long, default_value = "auto")]
    pub format: String,
    /// Image reference to select when the input holds several
    #[arg(long = "ref", value_name = "REF")]
    pub reference: Option<String>,
    /// Top-level directory name [default: output file name without extension]
    #[arg(long)]
    pub name: Option<String>,
    /// gzip level, 0-9
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(0..=9))]
    pub level: u32,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Rootfs directory, OCI layout or docker-save tarball
    pub rootfs: PathBuf,
    /// Output archive (.tar.gz)
    pub output: PathBuf,
    /// Top-level directory name [default: output file name without extension]
    #[arg(long)]
    pub name: Option<String>,
    /// gzip level, 0-9
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(0..=9))]
    pub level: u32,
}

#[derive(Debug, Args)]
pub struct UnpackArgs {
    /// Rootfs archive
    pub archive: PathBuf,
    /// Directory to extract into
    pub dest: PathBuf,
    /// Replace an existing rootfs of the same name
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Make the image writable (changes persist in the rootfs)
    #[arg(short, long)]
    pub writable: bool,
    /// Bind a host path, SRC[:DST] (repeatable)
    #[arg(short, long, value_name = "SRC[:DST]")]
    pub bind: Vec<String>,
    /// Working directory inside the container
    #[arg(long = "cd", value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    /// inherit-host, image-config or merged [env: AIRLIFT_DEFAULT_ENV_POLICY]
    #[arg(long, value_name = "POLICY")]
    pub env_policy: Option<String>,
    /// Do not bind /dev, /proc, /sys and $HOME
    #[arg(long)]
    pub no_default_binds: bool,
    /// Unpacked rootfs directory
    pub rootfs: PathBuf,
    /// Command and arguments
    #[arg(last = true, required = true, value_name = "CMD")]
    pub command: Vec<OsString>,
}

#[derive(Debug, Subcommand)]
pub enum LaunchCommand {
    /// Print the launch line or batch script for a job
    Plan(PlanArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 1)]
    pub nodes: u32,
    #[arg(long, default_value_t = 1)]
    pub ranks_per_node: u32,
    /// Physical cores per node
    #[arg(long, default_value_t = 1)]
    pub cores: u32,
    /// Hardware threads per core
    #[arg(long, default_value_t = 1)]
    pub smt: u32,
    /// Rootfs path on the compute nodes
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long, default_value = "airlift")]
    pub job_name: String,
    /// Walltime, [D-]HH:MM:SS
    #[arg(long, default_value = "01:00:00")]
    pub time: String,
    /// Output kind: cmdline or slurm
    #[arg(long, default_value = "cmdline")]
    pub emit: String,
    #[arg(long, default_value = "mpirun")]
    pub mpirun: String,
    /// Extra mpirun argument (repeatable)
    #[arg(long = "mpirun-arg", value_name = "ARG", allow_hyphen_values = true)]
    pub mpirun_args: Vec<String>,
    /// Environment variable carrying the thread count
    #[arg(long, default_value = "OMP_NUM_THREADS")]
    pub thread_var: String,
    /// Module line for batch scripts ("" to omit)
    #[arg(long, default_value = "module load airlift")]
    pub module: String,
    /// Extra #SBATCH argument (repeatable)
    #[arg(long = "sbatch", value_name = "ARG", allow_hyphen_values = true)]
    pub sbatch: Vec<String>,
    /// Runtime executable name on the compute nodes
    #[arg(long, default_value = "airlift")]
    pub runtime: String,
    /// Write to FILE instead of stdout
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Command run in each container
    #[arg(last = true, required = true, value_name = "CMD")]
    pub command: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Run a workload natively and in a container and compare
    Measure(MeasureArgs),
    /// Throughput and memory deltas from a CSV of measurements
    Overhead(OverheadArgs),
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    /// Unpacked rootfs the workload also exists in
    #[arg(long)]
    pub rootfs: PathBuf,
    /// Regex whose first group captures the throughput
    #[arg(long)]
    pub pattern: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Bind a host path into the container, SRC[:DST] (repeatable)
    #[arg(short, long, value_name = "SRC[:DST]")]
    pub bind: Vec<String>,
    /// Benchmark name in the report
    #[arg(long)]
    pub name: Option<String>,
    /// Relative throughput change reported as overhead
    #[arg(long, default_value_t = bench::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Report format: csv or json
    #[arg(long, default_value = "csv")]
    pub format: String,
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Workload command and arguments
    #[arg(last = true, required = true, value_name = "CMD")]
    pub workload: Vec<OsString>,
}

#[derive(Debug, Args)]
pub struct OverheadArgs {
    /// CSV with header benchmark,tp_with,tp_without,mem_with,mem_without
    pub input: PathBuf,
    #[arg(long, default_value_t = bench::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Report format: csv or json
    #[arg(long, default_value = "csv")]
    pub format: String,
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// CSV with header nodes,epoch_time_s
    pub input: PathBuf,
    /// Baseline node count [default: smallest in the series]
    #[arg(long)]
    pub baseline: Option<u32>,
    /// Report format: csv or json
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Also write nodes,measured_speedup,linear_speedup to FILE
    #[arg(long, value_name = "FILE")]
    pub plot: Option<PathBuf>,
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Print JSON instead of text
    #[arg(long)]
    pub json: bool,
}

fn write_out(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

/// `tf.tar.gz` -> `tf`.
fn stem_name(output: &Path) -> String {
    let name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = [".tar.gz", ".tgz", ".tar"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .unwrap_or(&name);
    image::sanitize_name(stem)
}

fn pack_tree(rootfs: &FlattenedRootfs, name: Option<&str>, output: &Path, level: u32) -> Result<()> {
    let name = name.map(str::to_string).unwrap_or_else(|| stem_name(output));
    let archive = archive::pack(
        rootfs,
        &name,
        output,
        &PackOptions {
            compression_level: level,
        },
    )?;
    eprintln!(
        "wrote {} ({} entries, top-level {}/)",
        archive.path.display(),
        rootfs.len(),
        archive.top_level_name
    );
    Ok(())
}

fn cmd_flatten(a: &FlattenArgs) -> Result<()> {
    let (manifest, store) = image::open_image(&a.input, Some(&a.format), a.reference.as_deref())?;
    let mut rootfs = image::flatten(&manifest, store.as_ref())?;
    rootfs.insert_image_config(&manifest.config())?;
    pack_tree(&rootfs, a.name.as_deref(), &a.output, a.level)
}

fn cmd_pack(a: &PackArgs) -> Result<()> {
    let formats = image::formats();
    if let Ok(format) = image::select_format(&formats, &a.rootfs, None) {
        log::info!("{} is a {} image; flattening", a.rootfs.display(), format.name());
        let manifest = format.parse(&a.rootfs, None)?;
        let store = format.open_store(&a.rootfs)?;
        let mut rootfs = image::flatten(&manifest, store.as_ref())?;
        rootfs.insert_image_config(&manifest.config())?;
        return pack_tree(&rootfs, a.name.as_deref(), &a.output, a.level);
    }
    if !a.rootfs.is_dir() {
        bail!("{} is not a directory", a.rootfs.display());
    }
    let rootfs = FlattenedRootfs::from_dir(&a.rootfs).with_context(|| format!("reading {}", a.rootfs.display()))?;
    pack_tree(&rootfs, a.name.as_deref(), &a.output, a.level)
}

fn cmd_unpack(a: &UnpackArgs) -> Result<()> {
    let archive = RootfsArchive::open(&a.archive)?;
    let target = archive::unpack(&archive, &a.dest, a.overwrite)?;
    println!("{}", target.display());
    Ok(())
}

fn parse_binds(binds: &[String]) -> Result<Vec<Bind>> {
    Ok(binds.iter().map(|b| Bind::parse(b)).collect::<Result<_, _>>()?)
}

fn exit_code(status: ExitStatus) -> i32 {
    match (status.code(), status.signal()) {
        (Some(c), _) => c,
        (None, Some(sig)) => 128 + sig,
        _ => EXIT_FAILURE,
    }
}

fn cmd_run(a: &RunArgs, cfg: &GlobalConfig) -> i32 {
    let setup = || -> Result<Container> {
        let policy = match &a.env_policy {
            Some(p) => p.parse::<EnvPolicy>()?,
            None => cfg.default_env_policy,
        };
        let mut spec = ContainerSpec::new(&a.rootfs, a.command.clone())
            .writable(a.writable)
            .env_policy(policy)
            .default_binds(!a.no_default_binds)
            .site_binds(cfg.site_bind_dirs.clone());
        spec.binds = parse_binds(&a.bind)?;
        spec.workdir = a.workdir.clone();
        Ok(Container::prepare(&spec)?)
    };
    match setup().and_then(|mut c| Ok(c.status()?)) {
        Ok(status) => exit_code(status),
        Err(e) => {
            eprintln!("airlift: error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let plan = LaunchPlan {
        nodes: a.nodes,
        ranks_per_node: a.ranks_per_node,
        physical_cores_per_node: a.cores,
        threads_per_core: a.smt,
        container: a.container.clone(),
        command: a.command.clone(),
        job_name: a.job_name.clone(),
        walltime: a.time.parse::<Walltime>()?,
    };
    let template = LaunchTemplate {
        runtime_bin: a.runtime.clone(),
        mpirun_bin: a.mpirun.clone(),
        mpirun_flags: a.mpirun_args.clone(),
        thread_env_var: a.thread_var.clone(),
        module_line: (!a.module.is_empty()).then(|| a.module.clone()),
        extra_directives: a.sbatch.clone(),
    };
    let text = launcher::emit(&a.emit, &plan, &template)?;
    write_out(a.output.as_deref(), &text)
}

fn cmd_measure(a: &MeasureArgs, cfg: &GlobalConfig) -> Result<()> {
    let mut opts = MeasureOptions::new(&a.pattern, a.reps)?;
    opts.benchmark = a.name.clone();
    let mut spec = ContainerSpec::new(&a.rootfs, a.workload.clone())
        .env_policy(cfg.default_env_policy)
        .site_binds(cfg.site_bind_dirs.clone());
    spec.binds = parse_binds(&a.bind)?;
    let record = bench::measure_pair(&a.workload, &spec, &opts)?;
    let report = bench::overhead_report(&[record], a.threshold)?;
    eprint!("{}", report.summary());
    write_out(a.output.as_deref(), &bench::emit(&a.format, &Report::Overhead(report))?)
}

fn cmd_overhead(a: &OverheadArgs) -> Result<()> {
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let records = bench::read_overhead_csv(file)?;
    let report = bench::overhead_report(&records, a.threshold)?;
    eprint!("{}", report.summary());
    write_out(a.output.as_deref(), &bench::emit(&a.format, &Report::Overhead(report))?)
}

fn cmd_scale(a: &ScaleArgs) -> Result<()> {
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let series = bench::read_scaling_csv(file)?;
    let report = bench::scaling_report(&series, a.baseline)?;
    if let Some(p) = &a.plot {
        fs::write(p, bench::plot_data(&report)).with_context(|| format!("writing {}", p.display()))?;
    }
    write_out(a.output.as_deref(), &bench::emit(&a.format, &Report::Scaling(report))?)
}

fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    let report = runtime::probe_support();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .parse_default_env()
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let vars: BTreeMap<String, String> = std::env::vars().collect();
    let flags = Layer {
        site_bind_dirs: (!cli.site_bind.is_empty()).then(|| cli.site_bind.clone()),
        default_env_policy: None,
        verbosity: (cli.verbose > 0).then_some(cli.verbose),
    };
    if let Some(rel) = cli.site_bind.iter().find(|d| !d.is_absolute()) {
        eprintln!("airlift: error: --site-bind {} is not an absolute path", rel.display());
        return EXIT_USAGE;
    }
    let cfg = match GlobalConfig::load(&flags, cli.config.as_deref(), &vars) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("airlift: error: {e:#}");
            return EXIT_FAILURE;
        }
    };
    init_logging(cfg.verbosity);

    let result = match &cli.command {
        Command::Run(a) => return cmd_run(a, &cfg),
        Command::Flatten(a) => cmd_flatten(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Unpack(a) => cmd_unpack(a),
        Command::Launch(LaunchCommand::Plan(a)) => cmd_plan(a),
        Command::Bench(BenchCommand::Measure(a)) => cmd_measure(a, &cfg),
        Command::Bench(BenchCommand::Overhead(a)) => cmd_overhead(a),
        Command::ScaleReport(a) => cmd_scale(a),
        Command::Probe(a) => cmd_probe(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("airlift: error: {e:#}");
            EXIT_FAILURE
        }
    }
}
