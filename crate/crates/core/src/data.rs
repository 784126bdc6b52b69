//! Dataset ingestion, synthetic toy datasets, and seeded batching.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::binfmt::{Reader, Writer};
use crate::error::{PandError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

/// A sample's input: an in-memory tensor, or a file an adapter must decode.
#[derive(Debug, Clone, PartialEq)]
pub enum Input<T> {
    Vector(Vec<T>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: Input<T>,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    samples: Vec<Sample<T>>,
    classes: Vec<String>,
    split: SplitName,
    /// Non-fatal ingestion notes (e.g. classes without samples).
    warnings: Vec<String>,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn new(samples: Vec<Sample<T>>, classes: Vec<String>, split: SplitName) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &samples {
            if s.label >= classes.len() {
                return Err(PandError::Index {
                    what: "sample label",
                    index: s.label,
                    len: classes.len(),
                });
            }
            if !ids.insert(s.id.as_str()) {
                return Err(PandError::Config(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Self {
            samples,
            classes,
            split,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self) -> SplitName {
        self.split
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Stack the listed samples' vectors into a batch matrix.
    pub fn batch_inputs(&self, indices: &[usize]) -> Result<Matrix<T>> {
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or(PandError::Index {
                what: "sample index",
                index: i,
                len: self.samples.len(),
            })?;
            match &s.input {
                Input::Vector(v) => rows.push(v.clone()),
                Input::File(p) => {
                    return Err(PandError::Ingestion {
                        path: p.clone(),
                        detail: "sample is not decoded; run an input decoder first".into(),
                    })
                }
            }
        }
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.input_dim().unwrap_or(0)));
        }
        Matrix::from_rows(&rows)
    }

    pub fn all_inputs(&self) -> Result<Matrix<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch_inputs(&idx)
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.iter().find_map(|s| match &s.input {
            Input::Vector(v) => Some(v.len()),
            Input::File(_) => None,
        })
    }

    /// Replace file inputs with decoded vectors.
    pub fn decode_files<F>(mut self, mut decode: F) -> Result<Self>
    where
        F: FnMut(&Path) -> Result<Vec<T>>,
    {
        for s in &mut self.samples {
            if let Input::File(p) = &s.input {
                let v = decode(p)?;
                s.input = Input::Vector(v);
            }
        }
        Ok(self)
    }
}

/// Decoder for whitespace-separated float text files (`*.vec`).
pub fn decode_vector_file<T: Scalar>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| PandError::io(path, e))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map(T::lit)
                .map_err(|e| PandError::Ingestion {
                    path: path.to_path_buf(),
                    detail: format!("bad float {tok:?}: {e}"),
                })
        })
        .collect()
}

/// Load a class-per-directory dataset through a split file.
///
/// The vocabulary is the sorted list of subdirectory names; samples keep the
/// split file's order. Split file lines are `relative/path class_name`.
pub fn load_image_folder<T: Scalar>(
    root: impl AsRef<Path>,
    split_file: impl AsRef<Path>,
    split: SplitName,
) -> Result<DatasetSplit<T>> {
    let root = root.as_ref();
    let split_path = split_file.as_ref();
    let split_path = if split_path.is_absolute() {
        split_path.to_path_buf()
    } else {
        root.join(split_path)
    };

    let mut classes = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| PandError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| PandError::io(root, e))?;
        if entry
            .file_type()
            .map_err(|e| PandError::io(entry.path(), e))?
            .is_dir()
        {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let text = fs::read_to_string(&split_path).map_err(|e| PandError::io(&split_path, e))?;
    let mut samples = Vec::new();
    let mut counts = vec![0usize; classes.len()];
    for (lineno, line) in text.split('\n').enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, class) = line.rsplit_once(' ').ok_or_else(|| PandError::Ingestion {
            path: split_path.clone(),
            detail: format!("line {}: expected `path class`", lineno + 1),
        })?;
        let full = root.join(rel);
        let label = *class_index.get(class).ok_or_else(|| PandError::Ingestion {
            path: full.clone(),
            detail: format!("unknown class directory {class:?}"),
        })?;
        if !full.is_file() {
            return Err(PandError::Ingestion {
                path: full,
                detail: "file listed in split does not exist".into(),
            });
        }
        counts[label] += 1;
        samples.push(Sample {
            input: Input::File(full),
            label,
            id: rel.to_string(),
        });
    }
    let warnings = classes
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n == 0)
        .map(|(c, _)| format!("class {c:?} has no samples in {}", split.as_str()))
        .collect();
    let mut ds = DatasetSplit::new(samples, classes, split)?;
    ds.warnings = warnings;
    Ok(ds)
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Minimum angle between class means, radians.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(classes: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            n_per_class,
            dim,
            separation,
            noise: 0.15,
            seed,
        }
    }
}

/// Largest angle `c` unit vectors in `dim` dimensions can all keep pairwise
/// when they fit a regular simplex.
fn simplex_angle(c: usize) -> f64 {
    (-1.0 / (c as f64 - 1.0)).acos()
}

fn random_orthonormal(rows: usize, dim: usize, rng: &mut rng::SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = rng::gaussian_vec(rng, dim, 1.0);
        for b in &basis {
            let p = tensor::dot(&v, b);
            tensor::axpy(&mut v, -p, b);
        }
        if let Some(u) = tensor::l2_normalize(&v) {
            basis.push(u);
        }
    }
    basis
}

/// Unit class means with every pairwise angle ≥ `separation`.
pub fn class_means(spec: &ToySpec) -> Result<Vec<Vec<f64>>> {
    let (c, dim, sep) = (spec.classes, spec.dim, spec.separation);
    let mut rng = rng::derived(spec.seed, "toy-means");
    if c <= dim && sep <= std::f64::consts::FRAC_PI_2 {
        return Ok(random_orthonormal(c, dim, &mut rng));
    }
    if c <= dim + 1 {
        if sep > simplex_angle(c) + 1e-12 {
            return Err(PandError::Config(format!(
                "separation {sep} rad infeasible for {c} classes (max {:.6})",
                simplex_angle(c)
            )));
        }
        // Regular simplex: centered basis vectors of R^c, expressed in an
        // orthonormal basis of the sum-zero subspace, then randomly rotated.
        let centered: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / c as f64)
                    .collect()
            })
            .collect();
        let mut sub: Vec<Vec<f64>> = Vec::new();
        for v in centered.iter().take(c - 1) {
            let mut w = v.clone();
            for b in &sub {
                let p = tensor::dot(&w, b);
                tensor::axpy(&mut w, -p, b);
            }
            sub.push(tensor::l2_normalize(&w).expect("independent simplex direction"));
        }
        let rot = random_orthonormal(c - 1, dim, &mut rng);
        return Ok(centered
            .iter()
            .map(|v| {
                let mut out = vec![0.0; dim];
                for (b, r) in sub.iter().zip(&rot) {
                    tensor::axpy(&mut out, tensor::dot(v, b), r);
                }
                tensor::l2_normalize(&out).expect("nonzero simplex vertex")
            })
            .collect());
    }
    // More classes than a simplex holds: rejection sampling.
    let max_cos = sep.cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0usize;
    while means.len() < c {
        attempts += 1;
        if attempts > 200_000 {
            return Err(PandError::Config(format!(
                "separation {sep} rad infeasible for {c} classes in {dim} dimensions"
            )));
        }
        let v = tensor::l2_normalize(&rng::gaussian_vec::<f64>(&mut rng, dim, 1.0));
        if let Some(v) = v {
            if means.iter().all(|m| tensor::dot(m, &v) <= max_cos) {
                means.push(v);
            }
        }
    }
    Ok(means)
}

/// Seeded Gaussian clusters around well-separated unit means, split 80/20
/// per class into train and test.
pub fn make_toy<T: Scalar>(spec: &ToySpec) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    if spec.classes < 2 {
        return Err(PandError::Config(format!(
            "toy data needs c ≥ 2, got {}",
            spec.classes
        )));
    }
    if spec.dim < 2 {
        return Err(PandError::Config(format!(
            "toy data needs dim ≥ 2, got {}",
            spec.dim
        )));
    }
    if !(spec.separation > 0.0) {
        return Err(PandError::Config(format!(
            "separation must be positive, got {}",
            spec.separation
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(PandError::Config(format!(
            "noise must be non-negative, got {}",
            spec.noise
        )));
    }
    if spec.n_per_class < 2 {
        return Err(PandError::Config(
            "toy data needs at least 2 samples per class".into(),
        ));
    }
    let means = class_means(spec)?;
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("class_{c:02}")).collect();
    let n_train = ((spec.n_per_class as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, spec.n_per_class - 1);
    let mut rng = rng::derived(spec.seed, "toy-samples");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mean) in means.iter().enumerate() {
        for j in 0..spec.n_per_class {
            let x: Vec<T> = mean
                .iter()
                .map(|&m| T::lit(m) + rng::gaussian::<T>(&mut rng, spec.noise))
                .collect();
            let sample = Sample {
                input: Input::Vector(x),
                label,
                id: format!("c{label:02}_{j:04}"),
            };
            if j < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok((
        DatasetSplit::new(train, classes.clone(), SplitName::Train)?,
        DatasetSplit::new(test, classes, SplitName::Test)?,
    ))
}

/// Per-epoch mini-batches in a seeded shuffled order; the last batch may be
/// short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derived(seed, &format!("epoch-{epoch}"));
    rng::shuffle(&mut rng, &mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub const DATASET_MAGIC: &[u8; 8] = b"PANDDSET";
pub const DATASET_VERSION: u32 = 1;

/// Dataset container: magic | version | split name | C | names | N | dim |
/// N × (id, label u32, dim f32). Vector inputs only.
pub fn write_split<T: Scalar>(split: &DatasetSplit<T>) -> Result<Vec<u8>> {
    let dim = split.input_dim().unwrap_or(0);
    let mut w = Writer::default();
    w.magic(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.str(split.split.as_str());
    w.u32(split.classes.len() as u32);
    for c in &split.classes {
        w.str(c);
    }
    w.u32(split.len() as u32);
    w.u32(dim as u32);
    for s in &split.samples {
        let Input::Vector(v) = &s.input else {
            return Err(PandError::Format(format!(
                "sample {:?} has no vector input",
                s.id
            )));
        };
        if v.len() != dim {
            return Err(PandError::Shape {
                context: "sample input dimension",
                expected: dim,
                got: v.len(),
            });
        }
        w.str(&s.id);
        w.u32(s.label as u32);
        for &x in v {
            w.f32(x.as_f32());
        }
    }
    Ok(w.buf)
}

pub fn read_split<T: Scalar>(bytes: &[u8]) -> Result<DatasetSplit<T>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let split = match r.str("split name")?.as_str() {
        "train" => SplitName::Train,
        "test" => SplitName::Test,
        other => return Err(PandError::Format(format!("unknown split name {other:?}"))),
    };
    let c = r.u32("class count")? as usize;
    let classes = (0..c)
        .map(|i| r.str(&format!("class name {i}")))
        .collect::<Result<Vec<_>>>()?;
    let n = r.u32("sample count")? as usize;
    let dim = r.u32("input dimension")? as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let id = r.str(&format!("sample {i} id"))?;
        let label = r.u32(&format!("sample {i} label"))? as usize;
        let v = r.f32s(dim, &format!("sample {i} payload"))?;
        samples.push(Sample {
            input: Input::Vector(
                v.into_iter()
                    .map(|x| T::from_f32(x).expect("f32 widens"))
                    .collect(),
            ),
            label,
            id,
        });
    }
    r.finish("samples")?;
    DatasetSplit::new(samples, classes, split)
}

pub fn save_split<T: Scalar>(split: &DatasetSplit<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_split(split)?).map_err(|e| PandError::io(path, e))
}

pub fn load_split<T: Scalar>(path: impl AsRef<Path>) -> Result<DatasetSplit<T>> {
    let path = path.as_ref();
    read_split(&fs::read(path).map_err(|e| PandError::io(path, e))?)
}
