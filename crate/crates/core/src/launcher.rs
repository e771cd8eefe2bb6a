//! Launch lines and Slurm batch scripts for hybrid MPI + threads jobs.
//!
//! The MPI launcher always wraps the container runtime (`mpirun ... airlift
//! run IMAGE -- CMD`), never the other way around: each rank is its own
//! container, started by the launcher's process slots.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::{Named, Registry};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LaunchError {
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid walltime {0:?}: expected [D-]HH:MM:SS, MM:SS or minutes")]
    BadWalltime(String),
    #[error("unknown emitter {0:?}")]
    NoSuchEmitter(String),
}

pub type Result<T, E = LaunchError> = std::result::Result<T, E>;

/// A job time limit, in whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Walltime(pub u64);

impl Walltime {
    pub fn from_hms(h: u64, m: u64, s: u64) -> Self {
        Walltime(h * 3600 + m * 60 + s)
    }
}

impl FromStr for Walltime {
    type Err = LaunchError;

    /// Accepts the Slurm forms `M`, `M:S`, `H:M:S`, `D-H`, `D-H:M`, `D-H:M:S`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LaunchError::BadWalltime(s.to_string());
        let num = |p: &str| -> Result<u64> {
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            p.parse().map_err(|_| bad())
        };
        let (days, rest) = match s.split_once('-') {
            Some((d, rest)) => (Some(num(d)?), rest),
            None => (None, s),
        };
        let parts = rest.split(':').map(num).collect::<Result<Vec<_>>>()?;
        let secs = match (days, parts.as_slice()) {
            (None, [m]) => m * 60,
            (None, [m, s]) => m * 60 + s,
            (None, [h, m, s]) | (Some(_), [h, m, s]) => h * 3600 + m * 60 + s,
            (Some(_), [h]) => h * 3600,
            (Some(_), [h, m]) => h * 3600 + m * 60,
            _ => return Err(bad()),
        };
        let total = days.unwrap_or(0) * 86_400 + secs;
        if total == 0 {
            return Err(bad());
        }
        Ok(Walltime(total))
    }
}

impl fmt::Display for Walltime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, rem) = (self.0 / 86_400, self.0 % 86_400);
        let (h, m, s) = (rem / 3600, rem % 3600 / 60, rem % 60);
        if d > 0 {
            write!(f, "{d}-{h:02}:{m:02}:{s:02}")
        } else {
            write!(f, "{h:02}:{m:02}:{s:02}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchPlan {
    pub nodes: u32,
    pub ranks_per_node: u32,
    pub physical_cores_per_node: u32,
    pub threads_per_core: u32,
    pub container: PathBuf,
    pub command: Vec<String>,
    pub job_name: String,
    pub walltime: Walltime,
}

impl LaunchPlan {
    /// A one-rank-per-node plan with one thread per core and a one-hour limit.
    pub fn new(nodes: u32, container: impl Into<PathBuf>, command: Vec<String>) -> Self {
        LaunchPlan {
            nodes,
            ranks_per_node: 1,
            physical_cores_per_node: 1,
            threads_per_core: 1,
            container: container.into(),
            command,
            job_name: "airlift".to_string(),
            walltime: Walltime::from_hms(1, 0, 0),
        }
    }

    pub fn cores(mut self, physical: u32, threads_per_core: u32) -> Self {
        self.physical_cores_per_node = physical;
        self.threads_per_core = threads_per_core;
        self
    }

    pub fn ranks_per_node(mut self, r: u32) -> Self {
        self.ranks_per_node = r;
        self
    }

    pub fn total_ranks(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.ranks_per_node)
    }

    /// Hardware threads per node split evenly across its ranks.
    pub fn threads_per_rank(&self) -> Result<u32> {
        self.validate()?;
        let hw = u64::from(self.physical_cores_per_node) * u64::from(self.threads_per_core);
        let r = u64::from(self.ranks_per_node);
        if hw % r != 0 {
            return Err(LaunchError::PlanMismatch(format!(
                "{hw} hardware threads per node do not divide evenly among {r} ranks"
            )));
        }
        u32::try_from(hw / r).map_err(|_| LaunchError::InvalidPlan("thread count overflows".into()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nodes", self.nodes),
            ("ranks per node", self.ranks_per_node),
            ("physical cores per node", self.physical_cores_per_node),
            ("threads per core", self.threads_per_core),
        ] {
            if v == 0 {
                return Err(LaunchError::InvalidPlan(format!("{name} must be positive")));
            }
        }
        if self.command.is_empty() {
            return Err(LaunchError::InvalidPlan("no command given".into()));
        }
        if self.job_name.is_empty() || self.job_name.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(LaunchError::InvalidPlan(format!(
                "job name {:?} must be non-empty without whitespace",
                self.job_name
            )));
        }
        Ok(())
    }
}

/// Site-specific pieces of the generated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchTemplate {
    pub runtime_bin: String,
    pub mpirun_bin: String,
    /// Inserted after `-n N`.
    pub mpirun_flags: Vec<String>,
    pub thread_env_var: String,
    /// e.g. `module load airlift`; omitted when None.
    pub module_line: Option<String>,
    /// Extra `#SBATCH` arguments such as `--partition=general`.
    pub extra_directives: Vec<String>,
}

impl Default for LaunchTemplate {
    fn default() -> Self {
        LaunchTemplate {
            runtime_bin: "airlift".to_string(),
            mpirun_bin: "mpirun".to_string(),
            mpirun_flags: Vec::new(),
            thread_env_var: "OMP_NUM_THREADS".to_string(),
            module_line: Some("module load airlift".to_string()),
            extra_directives: Vec::new(),
        }
    }
}

fn quote(word: &str) -> String {
    // NUL is the only byte shlex cannot quote; plans never legitimately hold one
    shlex::try_quote(word)
        .map(|c| c.into_owned())
        .unwrap_or_else(|_| word.replace('\0', ""))
}

fn join(words: impl IntoIterator<Item = impl AsRef<str>>) -> String {
    words
        .into_iter()
        .map(|w| quote(w.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn runtime_invocation(plan: &LaunchPlan, t: &LaunchTemplate) -> String {
    let mut words = vec![
        t.runtime_bin.clone(),
        "run".to_string(),
        plan.container.to_string_lossy().into_owned(),
        "--".to_string(),
    ];
    words.extend(plan.command.iter().cloned());
    join(words)
}

/// `VAR=threads airlift run CONTAINER -- CMD...` for a single-rank job.
pub fn render_single_node(plan: &LaunchPlan, t: &LaunchTemplate) -> Result<String> {
    let threads = plan.threads_per_rank()?;
    if plan.nodes != 1 {
        return Err(LaunchError::PlanMismatch(format!(
            "single-node launch requested for {} nodes",
            plan.nodes
        )));
    }
    if plan.ranks_per_node != 1 {
        return Err(LaunchError::PlanMismatch(format!(
            "single-node launch runs one process, plan has {} ranks",
            plan.ranks_per_node
        )));
    }
    Ok(format!(
        "{}={threads} {}",
        t.thread_env_var,
        runtime_invocation(plan, t)
    ))
}

/// `mpirun -n RANKS [FLAGS] airlift run CONTAINER -- CMD...`.
pub fn render_mpi(plan: &LaunchPlan, t: &LaunchTemplate) -> Result<String> {
    plan.threads_per_rank()?;
    let mut words = vec![t.mpirun_bin.clone(), "-n".to_string(), plan.total_ranks().to_string()];
    words.extend(t.mpirun_flags.iter().cloned());
    Ok(format!("{} {}", join(words), runtime_invocation(plan, t)))
}

/// A Slurm batch script; single-rank plans launch without MPI.
pub fn render_slurm(plan: &LaunchPlan, t: &LaunchTemplate) -> Result<String> {
    let threads = plan.threads_per_rank()?;
    let launch = if plan.total_ranks() == 1 {
        render_single_node(plan, t)?
    } else {
        render_mpi(plan, t)?
    };
    let mut s = String::from("#!/bin/bash\n");
    s += &format!("#SBATCH --job-name={}\n", plan.job_name);
    s += &format!("#SBATCH --nodes={}\n", plan.nodes);
    s += &format!("#SBATCH --ntasks-per-node={}\n", plan.ranks_per_node);
    s += &format!("#SBATCH --cpus-per-task={threads}\n");
    s += &format!("#SBATCH --time={}\n", plan.walltime);
    for d in &t.extra_directives {
        s += &format!("#SBATCH {d}\n");
    }
    s.push('\n');
    if let Some(m) = &t.module_line {
        s += m;
        s.push('\n');
    }
    s += &format!("export {}={threads}\n\n", t.thread_env_var);
    s += &launch;
    s.push('\n');
    Ok(s)
}

/// Output format of `launch plan --emit NAME`.
pub trait LaunchEmitter: Named + Send + Sync {
    fn emit(&self, plan: &LaunchPlan, template: &LaunchTemplate) -> Result<String>;
}

/// A single command line: plain runtime invocation for one rank, mpirun otherwise.
pub struct CommandLine;

impl Named for CommandLine {
    fn name(&self) -> &'static str {
        "cmdline"
    }
}

impl LaunchEmitter for CommandLine {
    fn emit(&self, plan: &LaunchPlan, t: &LaunchTemplate) -> Result<String> {
        let line = if plan.total_ranks() == 1 {
            render_single_node(plan, t)?
        } else {
            render_mpi(plan, t)?
        };
        Ok(line + "\n")
    }
}

pub struct SlurmScript;

impl Named for SlurmScript {
    fn name(&self) -> &'static str {
        "slurm"
    }
}

impl LaunchEmitter for SlurmScript {
    fn emit(&self, plan: &LaunchPlan, t: &LaunchTemplate) -> Result<String> {
        render_slurm(plan, t)
    }
}

pub fn emitters() -> Registry<dyn LaunchEmitter> {
    let mut reg: Registry<dyn LaunchEmitter> = Registry::new();
    reg.register(Box::new(CommandLine)).register(Box::new(SlurmScript));
    reg
}

pub fn emit(name: &str, plan: &LaunchPlan, template: &LaunchTemplate) -> Result<String> {
    emitters()
        .get(name)
        .ok_or_else(|| LaunchError::NoSuchEmitter(name.to_string()))?
        .emit(plan, template)
}
