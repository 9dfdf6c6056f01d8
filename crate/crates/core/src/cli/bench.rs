//! Method sweeps and result tables.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::Settings;
use super::format::g6;
use crate::adapters::{AdapterKind, FlopCount, Method};
use crate::error::{Error, Result};
use crate::model::Unfreeze;
use crate::train::{train_run, InputDist, OptimizerKind, RunResult, RunStatus, TaskKind, TaskSpec, TrainConfig};

pub const HEADER: [&str; 11] = [
    "method",
    "task",
    "seed",
    "params",
    "flops_mult",
    "flops_add",
    "final_train_loss",
    "final_val_loss",
    "best_val_loss",
    "wall_ms",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::arg(format!("unknown format `{other}`"))),
        }
    }
}

/// A run matrix: every method × task × seed. `template` carries the shared
/// training settings; its task and method are replaced per run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub methods: Vec<AdapterKind>,
    pub tasks: Vec<TaskSpec>,
    pub seeds: Vec<u64>,
    pub template: TrainConfig,
    pub out: Option<PathBuf>,
    pub format: TableFormat,
}

pub const BENCH_KEYS: [&str; 21] = [
    "methods",
    "task",
    "k",
    "d",
    "hidden",
    "steps",
    "seeds",
    "out",
    "format",
    "n_train",
    "n_val",
    "noise",
    "input_dist",
    "lr",
    "optimizer",
    "wd",
    "batch",
    "unfreeze",
    "rank",
    "eval_every",
    "timing",
];

pub const DEFAULT_METHODS: &str = "ilora,lora,dora,vera,mora1,mora6,bitfit,difffit,all";

impl BenchSpec {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        s.check_keys(&BENCH_KEYS)?;
        let rank: usize = s.parsed_or("rank", 1)?;
        let methods = s
            .list("methods")
            .unwrap_or_else(|| DEFAULT_METHODS.split(',').map(String::from).collect())
            .iter()
            .map(|m| Ok(AdapterKind::new(m.parse::<Method>()?).with_rank(rank)))
            .collect::<Result<Vec<_>>>()?;
        let task_kinds = s
            .list("task")
            .unwrap_or_else(|| vec![TaskKind::Rank1Sum.name().to_string()])
            .iter()
            .map(|t| t.parse::<TaskKind>())
            .collect::<Result<Vec<_>>>()?;
        let seeds = s
            .list("seeds")
            .unwrap_or_else(|| ["0", "1", "2", "3"].map(String::from).to_vec())
            .iter()
            .map(|v| v.parse::<u64>().map_err(|_| Error::arg(format!("invalid seed `{v}`"))))
            .collect::<Result<Vec<_>>>()?;

        let k = s.parsed_or("k", 32)?;
        let d = s.parsed_or("d", 32)?;
        let tasks = task_kinds
            .into_iter()
            .map(|kind| {
                let mut t = TaskSpec::new(kind, k, d);
                t.n_train = s.parsed_or("n_train", t.n_train)?;
                t.n_val = s.parsed_or("n_val", t.n_val)?;
                t.noise_std = s.parsed_or("noise", 0.0)?;
                t.hidden = s.parsed_or("hidden", t.hidden)?;
                t.input_dist = s.parsed_or("input_dist", InputDist::Gaussian)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut template = TrainConfig::new(
            tasks
                .first()
                .cloned()
                .unwrap_or_else(|| TaskSpec::new(TaskKind::Rank1Sum, k, d)),
            Method::OneLora,
        );
        template.steps = s.parsed_or("steps", 2000)?;
        template.lr = s.parsed_or("lr", template.lr)?;
        template.optimizer = s.parsed_or("optimizer", OptimizerKind::AdamW)?;
        template.weight_decay = s.parsed_or("wd", 0.0)?;
        template.batch = s.parsed_or("batch", 0)?;
        template.eval_every = s.parsed_or("eval_every", 0)?;
        template.unfreeze = s.parsed_or("unfreeze", Unfreeze::NONE)?;
        template.timing = s.flag("timing")?;

        let spec = Self {
            methods,
            tasks,
            seeds,
            template,
            out: s.get("out").map(PathBuf::from),
            format: s.parsed_or("format", TableFormat::Csv)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(Error::arg("bench needs at least one method, task and seed"));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        for m in &self.methods {
            m.validate()?;
        }
        let mut probe = self.template.clone();
        probe.task = self.tasks[0].clone();
        probe.validate()
    }

    /// Run configurations in table order (method, task, seed).
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut methods = self.methods.clone();
        methods.sort_by_key(|m| m.method.name());
        methods.dedup();
        let mut tasks = self.tasks.clone();
        tasks.sort_by_key(|t| t.kind.name());
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = Vec::new();
        for m in &methods {
            for t in &tasks {
                for &seed in &seeds {
                    let mut cfg = self.template.clone();
                    cfg.method = *m;
                    cfg.task = t.clone().with_seed(seed);
                    cfg.seed = seed;
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub task: String,
    pub runs: usize,
    pub params: usize,
    pub flops: FlopCount,
    pub final_train_loss: (f64, f64),
    pub final_val_loss: (f64, f64),
    pub best_val_loss: (f64, f64),
    pub wall_ms: (f64, f64),
    pub status: RunStatus,
}

impl Aggregate {
    fn of(group: &[RunResult]) -> Self {
        let col = |f: fn(&RunResult) -> f64| mean_std(&group.iter().map(f).collect::<Vec<_>>());
        let first = &group[0];
        Self {
            method: first.method,
            task: first.task.clone(),
            runs: group.len(),
            params: first.params,
            flops: first.flops,
            final_train_loss: col(|r| r.final_train_loss),
            final_val_loss: col(|r| r.final_val_loss),
            best_val_loss: col(|r| r.best_val_loss),
            wall_ms: col(|r| r.wall_ms),
            status: if group.iter().all(|r| r.status == RunStatus::Ok) {
                RunStatus::Ok
            } else {
                RunStatus::Diverged
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Row {
    Run(RunResult),
    Aggregate(Aggregate),
}

impl Row {
    pub fn cells(&self) -> Vec<String> {
        let pm = |(m, s): (f64, f64)| format!("{}±{}", g6(m), g6(s));
        match self {
            Row::Run(r) => vec![
                r.method.name().to_string(),
                r.task.clone(),
                r.seed.to_string(),
                r.params.to_string(),
                r.flops.mults.to_string(),
                r.flops.adds.to_string(),
                g6(r.final_train_loss),
                g6(r.final_val_loss),
                g6(r.best_val_loss),
                g6(r.wall_ms),
                r.status.to_string(),
            ],
            Row::Aggregate(a) => vec![
                a.method.name().to_string(),
                a.task.clone(),
                "agg".to_string(),
                a.params.to_string(),
                a.flops.mults.to_string(),
                a.flops.adds.to_string(),
                pm(a.final_train_loss),
                pm(a.final_val_loss),
                pm(a.best_val_loss),
                pm(a.wall_ms),
                a.status.to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<Row>,
}

impl ResultTable {
    /// Groups results already in (method, task, seed) order and appends one
    /// aggregate row after each group.
    pub fn from_results(results: Vec<RunResult>) -> Self {
        let mut rows = Vec::with_capacity(results.len() + 1);
        let mut group: Vec<RunResult> = Vec::new();
        for r in results {
            if group.first().is_some_and(|g| g.method != r.method || g.task != r.task) {
                rows.push(Row::Aggregate(Aggregate::of(&group)));
                group.clear();
            }
            rows.push(Row::Run(r.clone()));
            group.push(r);
        }
        if !group.is_empty() {
            rows.push(Row::Aggregate(Aggregate::of(&group)));
        }
        Self { rows }
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunResult> {
        self.rows.iter().filter_map(|r| match r {
            Row::Run(r) => Some(r),
            Row::Aggregate(_) => None,
        })
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &Aggregate> {
        self.rows.iter().filter_map(|r| match r {
            Row::Aggregate(a) => Some(a),
            Row::Run(_) => None,
        })
    }

    pub fn write<W: Write>(&self, format: TableFormat, out: W) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::arg("refusing to emit an empty table"));
        }
        match format {
            TableFormat::Csv => self.write_csv(out),
            TableFormat::Markdown => self.write_markdown(out),
        }
    }

    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io {
            path: "<table>".into(),
            source: e.into(),
        };
        w.write_record(HEADER).map_err(err)?;
        for row in &self.rows {
            w.write_record(row.cells()).map_err(err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<table>".into(),
            source,
        })
    }

    fn write_markdown<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |source| Error::Io {
            path: "<table>".into(),
            source,
        };
        writeln!(out, "| {} |", HEADER.join(" | ")).map_err(io)?;
        writeln!(out, "|{}", "---|".repeat(HEADER.len())).map_err(io)?;
        for row in &self.rows {
            writeln!(out, "| {} |", row.cells().join(" | ")).map_err(io)?;
        }
        Ok(())
    }

    pub fn to_string(&self, format: TableFormat) -> Result<String> {
        let mut buf = Vec::new();
        self.write(format, &mut buf)?;
        Ok(String::from_utf8(buf).expect("tables are UTF-8"))
    }
}

impl fmt::Display for ResultTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_string(TableFormat::Csv).map_err(|_| fmt::Error)?)
    }
}

/// Executes the matrix. Untimed runs go in parallel; timed runs are
/// sequential so they do not compete for cores. Row order never depends on
/// scheduling.
pub fn run_bench(spec: &BenchSpec) -> Result<ResultTable> {
    spec.validate()?;
    let configs = spec.configs();
    let results: Vec<RunResult> = if spec.template.timing {
        configs.iter().map(train_run).collect::<Result<_>>()?
    } else {
        configs.par_iter().map(train_run).collect::<Result<_>>()?
    };
    Ok(ResultTable::from_results(results))
}

/// Runs the bench and writes the table to `spec.out` (or `stdout`).
pub fn bench_to<W: Write>(spec: &BenchSpec, stdout: W) -> Result<ResultTable> {
    let table = run_bench(spec)?;
    match &spec.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            table.write(spec.format, std::io::BufWriter::new(file))?;
        }
        None => table.write(spec.format, stdout)?,
    }
    Ok(table)
}
