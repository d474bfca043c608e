//! Synthetic class-incremental benchmark and its binary file format.
//!
//! Every class owns a template sequence; samples are the template plus
//! spherical Gaussian noise. Each random draw comes from its own ChaCha
//! stream keyed by class (or task) id, so growing the benchmark leaves the
//! existing data untouched.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ssm::SequenceBatch;

pub const DATASET_MAGIC: &[u8; 7] = b"SSMCL1\0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seq_len: usize,
    pub d_raw: usize,
    pub template_scale: f64,
    pub noise_scale: f64,
    /// When set, templates of a task lie in a random subspace of this
    /// dimension (shared by the task's classes) instead of filling `d_raw`.
    pub task_subspace_dim: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            classes_per_task: 4,
            train_per_class: 100,
            test_per_class: 50,
            seq_len: 16,
            d_raw: 32,
            template_scale: 1.0,
            noise_scale: 0.1,
            task_subspace_dim: Some(8),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("seq_len", self.seq_len),
            ("d_raw", self.d_raw),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("bench.{name} must be at least 1")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("bench.noise_scale must be finite and >= 0"));
        }
        if !self.template_scale.is_finite() {
            return Err(Error::config("bench.template_scale must be finite"));
        }
        if self.task_subspace_dim == Some(0) {
            return Err(Error::config("bench.task_subspace_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Train and test split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: SequenceBatch,
    pub test: SequenceBatch,
}

const STREAM_TEMPLATE: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_BASIS: u64 = 4;

fn stream(seed: u64, kind: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Template of class `c`, `L × D_raw`.
pub fn class_template(spec: &BenchSpec, class: usize) -> Matrix {
    let task = class / spec.classes_per_task;
    let mut rng = stream(spec.seed, STREAM_TEMPLATE, class as u64);
    match spec.task_subspace_dim {
        Some(k) if k < spec.d_raw => {
            let mut brng = stream(spec.seed, STREAM_BASIS, task as u64);
            let basis = gaussian(&mut brng, k, spec.d_raw, 1.0 / (k as f64).sqrt());
            let coeff = gaussian(&mut rng, spec.seq_len, k, spec.template_scale);
            coeff.matmul(&basis).expect("conformable by construction")
        }
        _ => gaussian(&mut rng, spec.seq_len, spec.d_raw, spec.template_scale),
    }
}

fn samples(spec: &BenchSpec, class: usize, template: &Matrix, kind: u64, n: usize) -> Vec<Matrix> {
    let mut rng = stream(spec.seed, kind, class as u64);
    (0..n)
        .map(|_| {
            let noise = gaussian(&mut rng, spec.seq_len, spec.d_raw, spec.noise_scale);
            template.add(&noise).expect("same shape")
        })
        .collect()
}

/// Generates every task; class ids run `t·K .. (t+1)·K` for task `t`.
pub fn generate(spec: &BenchSpec) -> Result<Vec<TaskSplit>> {
    spec.validate()?;
    let k = spec.classes_per_task;
    (0..spec.tasks)
        .map(|t| {
            let (mut tx, mut tl, mut vx, mut vl) = (vec![], vec![], vec![], vec![]);
            for class in t * k..(t + 1) * k {
                let template = class_template(spec, class);
                tx.extend(samples(spec, class, &template, STREAM_TRAIN, spec.train_per_class));
                tl.extend(std::iter::repeat_n(class, spec.train_per_class));
                vx.extend(samples(spec, class, &template, STREAM_TEST, spec.test_per_class));
                vl.extend(std::iter::repeat_n(class, spec.test_per_class));
            }
            Ok(TaskSplit {
                train: SequenceBatch::new(tx, tl)?,
                test: SequenceBatch::new(vx, vl)?,
            })
        })
        .collect()
}

fn distinct_labels(batch: &SequenceBatch) -> Vec<usize> {
    let mut v = batch.labels.clone();
    v.sort_unstable();
    v.dedup();
    v
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} = {v} does not fit in u32")))
}

/// Serializes tasks to the dataset byte format.
pub fn encode_dataset(tasks: &[TaskSplit]) -> Result<Vec<u8>> {
    let (l, d) = tasks
        .iter()
        .flat_map(|t| [&t.train, &t.test])
        .find(|b| !b.is_empty())
        .map_or((0, 0), |b| (b.seq_len(), b.d_raw()));
    for t in tasks {
        for b in [&t.train, &t.test] {
            if !b.is_empty() && (b.seq_len(), b.d_raw()) != (l, d) {
                return Err(Error::shape(format!(
                    "all samples must be {l}x{d}, found {}x{}",
                    b.seq_len(),
                    b.d_raw()
                )));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&to_u32(tasks.len(), "task count")?.to_le_bytes());
    for t in tasks {
        let classes = distinct_labels(&t.train).len().max(distinct_labels(&t.test).len());
        for v in [classes, t.train.len(), t.test.len()] {
            out.extend_from_slice(&to_u32(v, "task header field")?.to_le_bytes());
        }
    }
    out.extend_from_slice(&to_u32(l, "L")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d, "D_raw")?.to_le_bytes());
    for t in tasks {
        for b in [&t.train, &t.test] {
            for m in &b.x {
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    for t in tasks {
        for b in [&t.train, &t.test] {
            for &lab in &b.labels {
                out.extend_from_slice(&to_u32(lab, "label")?.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses the dataset byte format. Any inconsistency is a format error
/// carrying the byte offset where it was detected.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TaskSplit>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(DATASET_MAGIC.len(), "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset file"));
    }
    let n_tasks = cur.u32("task count")?;
    let mut heads = Vec::with_capacity(n_tasks.min(1 << 16));
    for _ in 0..n_tasks {
        let at = cur.pos as u64;
        let classes = cur.u32("class count")?;
        let train = cur.u32("train count")?;
        let test = cur.u32("test count")?;
        heads.push((at, classes, train, test));
    }
    let dims_at = cur.pos as u64;
    let l = cur.u32("L")?;
    let d = cur.u32("D_raw")?;
    let total: usize = heads.iter().map(|h| h.2 + h.3).sum();
    if total > 0 && l * d == 0 {
        return Err(Error::format(dims_at, "zero-sized samples"));
    }
    let need = total
        .checked_mul(l * d * 8 + 4)
        .ok_or_else(|| Error::format(dims_at, "sample counts overflow"))?;
    if bytes.len() - cur.pos < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated: {need} payload bytes declared, {} present", bytes.len() - cur.pos),
        ));
    }

    let mut xs = Vec::with_capacity(n_tasks);
    for &(_, _, train, test) in &heads {
        let mut pair = Vec::with_capacity(2);
        for n in [train, test] {
            let mut mats = Vec::with_capacity(n);
            for _ in 0..n {
                let mut data = Vec::with_capacity(l * d);
                for _ in 0..l * d {
                    data.push(cur.f64("sample payload")?);
                }
                mats.push(Matrix::from_vec(l, d, data)?);
            }
            pair.push(mats);
        }
        xs.push(pair);
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for ((at, classes, train, test), mut pair) in heads.into_iter().zip(xs) {
        let mut labels = Vec::with_capacity(2);
        for n in [train, test] {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(cur.u32("label")?);
            }
            labels.push(v);
        }
        let test_l = labels.pop().unwrap();
        let train_l = labels.pop().unwrap();
        let test_x = pair.pop().unwrap();
        let train_x = pair.pop().unwrap();
        let split = TaskSplit {
            train: SequenceBatch::new(train_x, train_l)?,
            test: SequenceBatch::new(test_x, test_l)?,
        };
        let found = distinct_labels(&split.train).len().max(distinct_labels(&split.test).len());
        if found != classes {
            return Err(Error::format(
                at,
                format!("header declares {classes} classes, labels contain {found}"),
            ));
        }
        tasks.push(split);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    Ok(tasks)
}

pub fn save_dataset(path: &Path, tasks: &[TaskSplit]) -> Result<()> {
    let bytes = encode_dataset(tasks)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskSplit>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
