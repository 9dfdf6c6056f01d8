//! Command-line front end: `bench`, `align` and `gradcheck`.

mod bench;
mod config;
mod format;

pub use bench::{
    bench_to, mean_std, run_bench, Aggregate, BenchSpec, ResultTable, Row, TableFormat, BENCH_KEYS, DEFAULT_METHODS,
    HEADER,
};
pub use config::{normalize_key, Settings};
pub use format::{format_sig, g6};

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{alignment_study, gradcheck_suite, AlignmentReport, FdScheme, GRADCHECK_SCHEME};
use crate::error::{Error, Result};
use crate::train::{InputDist, TaskKind, TaskSpec};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "onelora", version, about = "Very-low-rank adapter benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train every method on every task and seed; emit a result table.
    Bench(BenchArgs),
    /// PCA alignment of a full fine-tuning update with compression vectors.
    Align(AlignArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

/// Every option can also come from `--config FILE` (`key = value` lines,
/// keys as the long flag names); flags override the file.
#[derive(Debug, Args, Default)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated task names.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated seeds (default 0,1,2,3).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `csv` or `markdown`.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// `gaussian` or `relu_gaussian`.
    #[arg(long)]
    pub input_dist: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `adamw` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub wd: Option<f64>,
    /// Mini-batch size (0 = full batch).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Comma-separated subset of biases,gamma,norms.
    #[arg(long)]
    pub unfreeze: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Measure wall time per run (runs then execute sequentially).
    #[arg(long)]
    pub timing: bool,
}

impl BenchArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        let mut put = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                s.set(key, v);
            }
        };
        let show = |v: &dyn ToString| v.to_string();
        put("methods", self.methods.clone());
        put("task", self.task.clone());
        put("k", self.k.map(|v| show(&v)));
        put("d", self.d.map(|v| show(&v)));
        put("hidden", self.hidden.map(|v| show(&v)));
        put("steps", self.steps.map(|v| show(&v)));
        put("seeds", self.seeds.clone());
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("format", self.format.clone());
        put("n_train", self.n_train.map(|v| show(&v)));
        put("n_val", self.n_val.map(|v| show(&v)));
        put("noise", self.noise.map(|v| show(&v)));
        put("input_dist", self.input_dist.clone());
        put("lr", self.lr.map(|v| show(&v)));
        put("optimizer", self.optimizer.clone());
        put("wd", self.wd.map(|v| show(&v)));
        put("batch", self.batch.map(|v| show(&v)));
        put("unfreeze", self.unfreeze.clone());
        put("rank", self.rank.map(|v| show(&v)));
        put("eval_every", self.eval_every.map(|v| show(&v)));
        if self.timing {
            s.set("timing", "true");
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long, default_value = "teacher_rank1_sum")]
    pub task: String,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value = "gaussian")]
    pub input_dist: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check every method and the full network.
    #[arg(long)]
    pub all: bool,
    /// Restrict to one method (single layer and network).
    #[arg(long)]
    pub method: Option<String>,
    /// Random states per target.
    #[arg(long, default_value_t = 20)]
    pub states: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plain central differences at this step instead of the extrapolated default.
    #[arg(long)]
    pub central: Option<f64>,
}

fn write_out<F>(path: Option<&PathBuf>, stdout: &mut dyn Write, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            let mut w = std::io::BufWriter::new(file);
            f(&mut w)?;
            w.flush().map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })
        }
        None => f(stdout),
    }
}

/// Runs one command. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Bench(args) => {
            let spec = BenchSpec::from_settings(&args.settings()?)?;
            bench_to(&spec, stdout)?;
            Ok(true)
        }
        Command::Align(args) => {
            let kind: TaskKind = args.task.parse()?;
            if kind.is_classification() {
                return Err(Error::arg("alignment needs a regression task"));
            }
            let task = TaskSpec::new(kind, args.k, args.d)
                .with_samples(args.n_train, 16)
                .with_inputs(args.input_dist.parse::<InputDist>()?)
                .with_seed(args.seed);
            let reports = alignment_study(&task, args.steps, args.lr)?;
            write_out(args.out.as_ref(), stdout, |w| AlignmentReport::write_csv(&reports, w))?;
            Ok(true)
        }
        Command::Gradcheck(args) => {
            if !args.all && args.method.is_none() {
                return Err(Error::arg("gradcheck needs --all or --method"));
            }
            let only = args
                .method
                .as_deref()
                .map(str::parse::<crate::adapters::Method>)
                .transpose()?;
            let scheme = args.central.map_or(GRADCHECK_SCHEME, |h| FdScheme::Central { h });
            let rows = gradcheck_suite(args.states, args.seed, scheme)?;
            let io = |source| Error::Io {
                path: "<stdout>".into(),
                source,
            };
            let mut ok = true;
            writeln!(stdout, "target,k,d,max_rel_error,status").map_err(io)?;
            for r in rows {
                if let Some(m) = only {
                    if r.target.trim_start_matches("net:") != m.name() {
                        continue;
                    }
                }
                let pass = r.max_rel_error <= GRADCHECK_TOLERANCE;
                ok &= pass;
                writeln!(
                    stdout,
                    "{},{},{},{},{}",
                    r.target,
                    r.k,
                    r.d,
                    g6(r.max_rel_error),
                    if pass { "pass" } else { "fail" }
                )
                .map_err(io)?;
            }
            Ok(ok)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("onelora").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# sweep\nmethods = ilora,lora\nk = 4\nd = 3\nsteps = 5\nseeds = 0\n",
        )
        .unwrap();
        let cli = parse(&[
            "bench",
            "--config",
            path.to_str().unwrap(),
            "--k",
            "5",
            "--methods",
            "bitfit",
        ]);
        let Command::Bench(args) = cli.command else { panic!() };
        let spec = BenchSpec::from_settings(&args.settings().unwrap()).unwrap();
        assert_eq!(spec.tasks[0].k, 5);
        assert_eq!(spec.tasks[0].d, 3);
        assert_eq!(spec.methods.len(), 1);
        assert_eq!(spec.template.steps, 5);
    }

    #[test]
    fn bench_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        let cli = parse(&[
            "bench",
            "--methods",
            "ilora,all",
            "--k",
            "4",
            "--d",
            "4",
            "--steps",
            "10",
            "--seeds",
            "0,1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(run(cli, &mut Vec::new()).unwrap());
        let text = std::fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 2);
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let cli = parse(&[
            "bench",
            "--methods",
            "ilora",
            "--k",
            "2",
            "--d",
            "2",
            "--steps",
            "1",
            "--seeds",
            "0",
            "--out",
            "/nonexistent/dir/x.csv",
        ]);
        assert!(matches!(run(cli, &mut Vec::new()), Err(Error::Io { .. })));
    }

    #[test]
    fn align_emits_csv() {
        let cli = parse(&["align", "--k", "4", "--d", "3", "--n-train", "16", "--steps", "50"]);
        let mut buf = Vec::new();
        assert!(run(cli, &mut buf).unwrap());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,pc_index,singular_value,candidate,abs_cosine\n"));
        // 3 PCs × (ones, random, learned)
        assert_eq!(text.lines().count(), 1 + 9);
    }

    #[test]
    fn gradcheck_single_method() {
        let cli = parse(&["gradcheck", "--method", "ilora", "--states", "2"]);
        let mut buf = Vec::new();
        assert!(run(cli, &mut buf).unwrap());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("net:ilora"));
        assert!(!text.lines().any(|l| l.starts_with("lora,")));
        assert!(text.lines().skip(1).all(|l| l.contains("ilora")));
    }

    #[test]
    fn gradcheck_requires_a_target() {
        assert!(run(parse(&["gradcheck"]), &mut Vec::new()).is_err());
    }
}
