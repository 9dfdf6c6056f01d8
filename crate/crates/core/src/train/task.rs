//! Synthetic teacher-student tasks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Stream, Vector};
use crate::model::{Activation, FrozenLinear, ToyNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    /// `ΔW* = b* 1ᵀ`, `b* ~ N(0, 1)^d`.
    Rank1Sum,
    /// `ΔW* = b* a*ᵀ` with `a*` a random unit vector.
    Rank1Random,
    /// Dense `ΔW* ~ N(0, 1/k)`.
    FullRank,
    /// Gaussian blobs, one class per output.
    Blobs,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Rank1Sum,
        TaskKind::Rank1Random,
        TaskKind::FullRank,
        TaskKind::Blobs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Rank1Sum => "teacher_rank1_sum",
            TaskKind::Rank1Random => "teacher_rank1_random",
            TaskKind::FullRank => "teacher_fullrank",
            TaskKind::Blobs => "blobs_classification",
        }
    }

    pub fn is_classification(self) -> bool {
        self == TaskKind::Blobs
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == key || t.name().split_once('_').is_some_and(|(_, short)| short == key))
            .or(match key.as_str() {
                "blobs" => Some(TaskKind::Blobs),
                _ => None,
            })
            .ok_or_else(|| Error::arg(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputDist {
    #[default]
    Gaussian,
    /// `max(0, z)` entrywise; every feature is non-negative.
    ReluGaussian,
}

impl InputDist {
    pub fn name(self) -> &'static str {
        match self {
            InputDist::Gaussian => "gaussian",
            InputDist::ReluGaussian => "relu_gaussian",
        }
    }
}

impl FromStr for InputDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(InputDist::Gaussian),
            "relu_gaussian" | "relu" => Ok(InputDist::ReluGaussian),
            other => Err(Error::arg(format!("unknown input distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub k: usize,
    /// Output width; the number of classes for classification.
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub input_dist: InputDist,
    /// Target noise for regression; unused by classification.
    pub noise_std: f64,
    /// Hidden width of the classification MLP.
    pub hidden: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, k: usize, d: usize) -> Self {
        Self {
            kind,
            k,
            d,
            n_train: 64,
            n_val: 64,
            input_dist: InputDist::Gaussian,
            noise_std: 0.0,
            hidden: 16,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_samples(mut self, n_train: usize, n_val: usize) -> Self {
        self.n_train = n_train;
        self.n_val = n_val;
        self
    }

    pub fn with_inputs(mut self, dist: InputDist) -> Self {
        self.input_dist = dist;
        self
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::arg("task widths must be >= 1"));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::arg("n_train and n_val must be >= 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::arg("noise_std must be finite and >= 0"));
        }
        if self.kind.is_classification() && (self.d < 2 || self.hidden == 0) {
            return Err(Error::arg("classification needs d >= 2 classes and hidden >= 1"));
        }
        Ok(())
    }
}

/// Samples stored as rows: `x` is `n × k`, `y` is `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    /// Class indices for classification (`y` then holds one-hot rows).
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample feature sums `1ᵀx`.
    pub fn sums(&self) -> Vector {
        Vector::new((0..self.len()).map(|i| self.x.row(i).iter().sum()).collect())
    }
}

/// Regression teacher `y = W* x + β*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub w: Matrix,
    pub beta: Vector,
    pub delta: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    /// Frozen network the student adapts.
    pub base: ToyNet,
    pub train: Dataset,
    pub val: Dataset,
    pub teacher: Option<Teacher>,
}

impl Task {
    /// `W₀` of a single-layer regression base.
    pub fn base_weight(&self) -> &Matrix {
        self.base.layers()[0].base.w0()
    }
}

fn sample_inputs(rng: &mut Rng, n: usize, k: usize, dist: InputDist) -> Matrix {
    let mut x = rng.normal_matrix(n, k, 1.0);
    if dist == InputDist::ReluGaussian {
        for i in 0..n {
            x.row_mut(i).iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    x
}

/// Builds the frozen base, teacher and datasets. Regression tasks use a
/// single layer with `W₀ ~ N(0, 1/k)` and zero biases (`β₀ = β* = 0`), so
/// the residual `Y − XW₀ᵀ` is exactly the teacher shift plus noise.
pub fn gen_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut teacher_rng = Rng::new(spec.seed, Stream::Teacher);
    let mut data_rng = Rng::new(spec.seed, Stream::Data);
    let (k, d) = (spec.k, spec.d);

    if spec.kind.is_classification() {
        return gen_blobs(spec, &mut teacher_rng, &mut data_rng);
    }

    let w0 = teacher_rng.normal_matrix(d, k, 1.0 / (k as f64).sqrt());
    let delta = match spec.kind {
        TaskKind::Rank1Sum => {
            let b = Vector::new(teacher_rng.normal_vec(d));
            Matrix::outer(&b, &Vector::ones(k))
        }
        TaskKind::Rank1Random => {
            let b = Vector::new(teacher_rng.normal_vec(d));
            let a = teacher_rng.unit_vector(k);
            Matrix::outer(&b, &a)
        }
        TaskKind::FullRank => teacher_rng.normal_matrix(d, k, 1.0 / (k as f64).sqrt()),
        TaskKind::Blobs => unreachable!(),
    };
    let w = w0.add(&delta)?;
    let teacher = Teacher {
        w,
        beta: Vector::zeros(d),
        delta,
    };

    let mut make = |n: usize| -> Result<Dataset> {
        let x = sample_inputs(&mut data_rng, n, k, spec.input_dist);
        let mut y = x.matmul(&teacher.w.transpose())?;
        if spec.noise_std > 0.0 {
            for i in 0..n {
                y.row_mut(i)
                    .iter_mut()
                    .for_each(|v| *v += spec.noise_std * data_rng.normal());
            }
        }
        Ok(Dataset { x, y, labels: None })
    };
    let train = make(spec.n_train)?;
    let val = make(spec.n_val)?;
    Ok(Task {
        spec: spec.clone(),
        base: ToyNet::single(FrozenLinear::without_bias(w0)?),
        train,
        val,
        teacher: Some(teacher),
    })
}

/// Class centers `μ_c ~ N(0, 4/k)` per feature scale, samples `μ_y + N(0, 1)`;
/// the base is a random frozen GELU MLP `k → hidden → d`.
fn gen_blobs(spec: &TaskSpec, teacher_rng: &mut Rng, data_rng: &mut Rng) -> Result<Task> {
    let (k, d) = (spec.k, spec.d);
    let centers = teacher_rng.normal_matrix(d, k, 2.0);
    let base = ToyNet::random_mlp(k, spec.hidden, d, Activation::Gelu, false, teacher_rng)?;
    let mut make = |n: usize| -> Result<Dataset> {
        let mut x = Matrix::zeros(n, k);
        let mut y = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (data_rng.next_u64() % d as u64) as usize;
            for j in 0..k {
                let v = centers[(c, j)] + data_rng.normal();
                x.row_mut(i)[j] = match spec.input_dist {
                    InputDist::Gaussian => v,
                    InputDist::ReluGaussian => v.max(0.0),
                };
            }
            y.row_mut(i)[c] = 1.0;
            labels.push(c);
        }
        Ok(Dataset {
            x,
            y,
            labels: Some(labels),
        })
    };
    let train = make(spec.n_train)?;
    let val = make(spec.n_val)?;
    Ok(Task {
        spec: spec.clone(),
        base,
        train,
        val,
        teacher: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    fn residual(task: &Task) -> Matrix {
        let pred = task.train.x.matmul(&task.base_weight().transpose()).unwrap();
        task.train.y.sub(&pred).unwrap()
    }

    #[test]
    fn rank1_sum_residual_is_ones_aligned() {
        let task = gen_task(&TaskSpec::new(TaskKind::Rank1Sum, 6, 4).with_seed(3)).unwrap();
        // R = X ΔWᵀ = s b*ᵀ: rank one, and ΔW's right vector is 1/√k
        let r = residual(&task);
        let sv = svd(&r).unwrap();
        assert!(sv.s[1] < 1e-10 * sv.s[0]);
        let dsv = svd(&task.teacher.unwrap().delta).unwrap();
        let ones = 1.0 / 6f64.sqrt();
        assert!(dsv.v.column(0).iter().all(|v| (v - ones).abs() < 1e-12));
    }

    #[test]
    fn zero_teacher_shift_matches_base() {
        let task = gen_task(&TaskSpec::new(TaskKind::Rank1Random, 5, 3).with_seed(1)).unwrap();
        let t = task.teacher.as_ref().unwrap();
        let pred = task.train.x.matmul(&t.w.transpose()).unwrap();
        assert_eq!(pred, task.train.y);
    }

    #[test]
    fn relu_inputs_are_nonnegative() {
        let task = gen_task(
            &TaskSpec::new(TaskKind::FullRank, 8, 3)
                .with_inputs(InputDist::ReluGaussian)
                .with_seed(2),
        )
        .unwrap();
        assert!(task.train.x.as_slice().iter().all(|v| *v >= 0.0));
        assert!(task.train.sums().iter().all(|s| *s > 0.0));
    }

    #[test]
    fn deterministic_generation() {
        let spec = TaskSpec::new(TaskKind::Blobs, 4, 3).with_seed(9).with_noise(0.1);
        assert_eq!(gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
        let other = gen_task(&spec.clone().with_seed(10)).unwrap();
        assert_ne!(gen_task(&spec).unwrap().train, other.train);
    }

    #[test]
    fn blobs_are_one_hot() {
        let task = gen_task(&TaskSpec::new(TaskKind::Blobs, 4, 3)).unwrap();
        let labels = task.train.labels.as_ref().unwrap();
        for (i, c) in labels.iter().enumerate() {
            assert_eq!(task.train.y.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(task.train.y[(i, *c)], 1.0);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_task(&TaskSpec::new(TaskKind::Rank1Sum, 3, 3).with_samples(0, 1)).is_err());
        assert!(gen_task(&TaskSpec::new(TaskKind::Rank1Sum, 3, 3).with_noise(-1.0)).is_err());
        assert!(gen_task(&TaskSpec::new(TaskKind::Blobs, 3, 1)).is_err());
    }

    #[test]
    fn task_names_parse() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert_eq!("rank1_sum".parse::<TaskKind>().unwrap(), TaskKind::Rank1Sum);
        assert!("mnist".parse::<TaskKind>().is_err());
    }
}
