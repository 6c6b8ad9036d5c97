use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub d: usize,
    pub classes: usize,
    pub domain: String,
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if n != y.len() {
            return Err(Error::shape(format!("{n} rows but {} labels", y.len())));
        }
        if d != meta.d {
            return Err(Error::shape(format!("data width {d} but meta says {}", meta.d)));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= meta.classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{}", meta.classes)));
        }
        Ok(Self { x, y, meta })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.d
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Contiguous slice of rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Parameters of the synthetic source task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub seed: u64,
    pub d: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Norm of each class-mean offset.
    pub separation: f64,
    /// Norm of the offset shared by all classes.
    pub global_offset: f64,
    /// Per-feature noise scales are drawn uniformly from `[lo, hi]`.
    pub noise_scale: (f64, f64),
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 32,
            classes: 10,
            n_train: 4000,
            n_test: 2000,
            separation: 3.0,
            global_offset: 10.0,
            noise_scale: (0.6, 1.4),
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let k = if n > 0.0 { norm / n } else { 0.0 };
    v.iter_mut().for_each(|a| *a *= k);
    v
}

/// Gaussian class clusters `b + u_c + s ⊙ n` with class means `u_c` on a sphere of
/// radius `separation`, a shared offset `b` and a diagonal covariance shared by all
/// classes. Labels cycle through the classes; train rows are drawn before test rows.
pub fn make_source_task_with(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.d < 2 || spec.classes < 2 {
        return Err(Error::invalid(format!(
            "need d >= 2 and at least 2 classes, got d = {}, C = {}",
            spec.d, spec.classes
        )));
    }
    let (lo, hi) = spec.noise_scale;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::invalid(format!("bad noise scale range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let offset = random_direction(&mut rng, d, spec.global_offset);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| random_direction(&mut rng, d, spec.separation))
        .collect();
    let scale_dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::invalid(e.to_string()))?;
    let scales: Vec<f64> = (0..d).map(|_| scale_dist.sample(&mut rng)).collect();

    let mut draw = |n: usize, domain: &str| -> Result<Dataset> {
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                x.push(offset[j] + means[c][j] + scales[j] * e);
            }
            y.push(c);
        }
        let meta = DatasetMeta {
            seed: spec.seed,
            d,
            classes: spec.classes,
            domain: domain.to_string(),
            severity: 0,
        };
        Dataset::new(Tensor::new(vec![n, d], x)?, y, meta)
    };
    let train = draw(spec.n_train, "source-train")?;
    let test = draw(spec.n_test, "source-test")?;
    Ok((train, test))
}

pub fn make_source_task(seed: u64, d: usize, classes: usize, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    make_source_task_with(&TaskSpec { seed, d, classes, n_train, n_test, ..TaskSpec::default() })
}
