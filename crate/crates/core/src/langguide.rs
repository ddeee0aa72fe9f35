//! Text prompts, frozen text embeddings and the cosine triplet losses that
//! pull pool keys toward task text and classification features toward
//! class text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::numcore::{cosine, Tensor};

const PREFIX: &str = "A photo of ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Task,
    Class,
}

/// Unit-norm text embedding. Always a constant in the autodiff graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageFeature {
    vector: Vec<f64>,
    pub kind: FeatureKind,
    pub source_text: String,
}

impl LanguageFeature {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.vector)
    }
}

/// Lowercases and turns underscores into spaces, e.g. `Fire_Truck` -> `fire truck`.
pub fn normalize_class_name(name: &str) -> String {
    name.to_lowercase().replace('_', " ")
}

/// `"A photo of " + names joined by " or "`.
pub fn task_prompt_text<S: AsRef<str>>(class_names: &[S]) -> Result<String> {
    if class_names.is_empty() {
        return Err(LabError::invalid("task prompt needs at least one class name"));
    }
    let joined = class_names
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" or ");
    Ok(format!("{PREFIX}{joined}"))
}

pub fn class_prompt_text(name: &str) -> Result<String> {
    if name.is_empty() {
        return Err(LabError::invalid("class prompt needs a non-empty class name"));
    }
    Ok(format!("{PREFIX}{name}"))
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(LabError::ZeroNorm(what.to_owned()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Fixed `[dim, raw_dim]` map with orthonormal rows (`raw_dim >= dim`) or
/// orthonormal columns (`raw_dim < dim`); the identity when the sizes agree.
fn orthonormal_projection(raw_dim: usize, dim: usize, seed: u64) -> Vec<f64> {
    if raw_dim == dim {
        let mut eye = vec![0.0; dim * dim];
        (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
        return eye;
    }
    let (count, len) = (raw_dim.min(dim), raw_dim.max(dim));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut p = vec![0.0; dim * raw_dim];
    for i in 0..dim {
        for j in 0..raw_dim {
            p[i * raw_dim + j] = if raw_dim > dim { basis[i][j] } else { basis[j][i] };
        }
    }
    p
}

enum Source {
    Synthetic {
        seed: u64,
    },
    FileBacked {
        table: HashMap<String, Vec<f64>>,
        raw_dim: usize,
        projection: Vec<f64>,
    },
}

/// Maps prompt texts to unit vectors of the backbone's embedding size.
///
/// Results are cached, so the same text always yields the same vector.
/// [`EmbeddingProvider::call_count`] counts every `encode` call.
pub struct EmbeddingProvider {
    dim: usize,
    source: Source,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    calls: AtomicUsize,
}

impl std::fmt::Debug for EmbeddingProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let variant = match &self.source {
            Source::Synthetic { seed } => format!("synthetic(seed={seed})"),
            Source::FileBacked { table, raw_dim, .. } => {
                format!("file_backed({} texts, raw_dim={raw_dim})", table.len())
            }
        };
        f.debug_struct("EmbeddingProvider")
            .field("dim", &self.dim)
            .field("source", &variant)
            .finish()
    }
}

/// On-disk embedding table: `{"dim": D, "embeddings": {"<prompt text>": [..D floats..]}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub embeddings: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingProvider {
    /// Pseudo-random unit vectors derived from a hash of `(seed, text)`.
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            source: Source::Synthetic { seed },
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_table(
        table: HashMap<String, Vec<f64>>,
        raw_dim: usize,
        dim: usize,
        projection_seed: u64,
    ) -> Result<Self> {
        if raw_dim == 0 || dim == 0 {
            return Err(LabError::invalid("embedding dimensions must be positive"));
        }
        if let Some((text, v)) = table.iter().find(|(_, v)| v.len() != raw_dim) {
            return Err(LabError::invalid(format!(
                "embedding for {text:?} has length {}, expected {raw_dim}",
                v.len()
            )));
        }
        Ok(Self {
            dim,
            source: Source::FileBacked {
                table,
                raw_dim,
                projection: orthonormal_projection(raw_dim, dim, projection_seed),
            },
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_file(path: &Path, dim: usize, projection_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::file(path, e.to_string()))?;
        let file: EmbeddingFile =
            serde_json::from_str(&text).map_err(|e| LabError::file(path, e.to_string()))?;
        let table = file
            .embeddings
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
            .collect();
        Self::from_table(table, file.dim, dim, projection_seed).map_err(|e| LabError::file(path, e.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn raw_vector(&self, text: &str) -> Result<Vec<f64>> {
        match &self.source {
            Source::Synthetic { seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(text.as_bytes());
                let digest: [u8; 32] = h.finalize().into();
                let mut rng = ChaCha8Rng::from_seed(digest);
                Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            }
            Source::FileBacked {
                table,
                raw_dim,
                projection,
            } => {
                let raw = table
                    .get(text)
                    .ok_or_else(|| LabError::EmbeddingMiss(text.to_owned()))?;
                Ok((0..self.dim)
                    .map(|i| {
                        (0..*raw_dim)
                            .map(|j| projection[i * raw_dim + j] * raw[j])
                            .sum()
                    })
                    .collect())
            }
        }
    }

    pub fn encode(&self, text: &str, kind: FeatureKind) -> Result<LanguageFeature> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(v) = self.cache.lock().get(text) {
            return Ok(LanguageFeature {
                vector: v.clone(),
                kind,
                source_text: text.to_owned(),
            });
        }
        let v = normalize(self.raw_vector(text)?, &format!("embedding of {text:?}"))?;
        self.cache.lock().insert(text.to_owned(), v.clone());
        Ok(LanguageFeature {
            vector: v,
            kind,
            source_text: text.to_owned(),
        })
    }
}

/// Text of a task, from its class names after normalization.
pub fn task_text<S: AsRef<str>>(class_names: &[S]) -> Result<String> {
    let names: Vec<String> = class_names.iter().map(|n| normalize_class_name(n.as_ref())).collect();
    task_prompt_text(&names)
}

pub fn class_text(name: &str) -> Result<String> {
    class_prompt_text(&normalize_class_name(name))
}

/// Cosine similarity; differentiable in `a`, `b` taken as given.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    cosine(a, b)
}

fn check_distinct(pos: &LanguageFeature, neg: &LanguageFeature) -> Result<()> {
    if pos.vector == neg.vector {
        return Err(LabError::invalid(format!(
            "positive and negative text features coincide ({:?})",
            pos.source_text
        )));
    }
    Ok(())
}

fn triplet_term(x: &Tensor, pos: &Tensor, neg: &Tensor, what: &str) -> Result<Tensor> {
    let zero = |e: LabError| match e {
        LabError::ZeroNorm(_) => LabError::ZeroNorm(what.to_owned()),
        other => other,
    };
    let sp = cosine(x, pos).map_err(zero)?;
    let sn = cosine(x, neg).map_err(zero)?;
    Ok(sn.sub(&sp)?.add_scalar(1.0))
}

/// Mean over the rows of `selected_keys` (`[N, E]`) of
/// `1 - cos(k, positive) + cos(k, negative)`.
pub fn task_triplet_loss(
    selected_keys: &Tensor,
    positive: &LanguageFeature,
    negative: &LanguageFeature,
) -> Result<Tensor> {
    check_distinct(positive, negative)?;
    if selected_keys.rank() != 2 || selected_keys.shape()[0] == 0 {
        return Err(LabError::invalid(format!(
            "selected keys must be a non-empty [N, E], got {:?}",
            selected_keys.shape()
        )));
    }
    let (n, e) = (selected_keys.shape()[0], selected_keys.shape()[1]);
    let (pos, neg) = (positive.to_tensor(), negative.to_tensor());
    let mut terms = Vec::with_capacity(n);
    for r in 0..n {
        let k = selected_keys.slice(0, r, r + 1)?.reshape(&[e])?;
        terms.push(triplet_term(&k, &pos, &neg, &format!("selected key {r}"))?);
    }
    Ok(crate::backbone::sum_all(&terms)?.scale(1.0 / n as f64))
}

/// `1 - cos(x_o, positive) + cos(x_o, negative)`.
pub fn class_triplet_loss(
    x_o: &Tensor,
    positive: &LanguageFeature,
    negative: &LanguageFeature,
) -> Result<Tensor> {
    check_distinct(positive, negative)?;
    triplet_term(x_o, &positive.to_tensor(), &negative.to_tensor(), "x_o")
}

/// Uniform draw among the features of tasks `0..current_task`.
pub fn sample_negative_task<'a, R: Rng + ?Sized>(
    current_task: usize,
    history: &'a [LanguageFeature],
    rng: &mut R,
) -> Result<&'a LanguageFeature> {
    if current_task == 0 {
        return Err(LabError::invalid("task 0 has no previous task to sample a negative from"));
    }
    if history.len() < current_task {
        return Err(LabError::invalid(format!(
            "task history holds {} features, need {current_task}",
            history.len()
        )));
    }
    Ok(&history[rng.random_range(0..current_task)])
}

/// Uniform draw among previously seen classes. Returns the class id and its feature.
pub fn sample_negative_class<'a, R: Rng + ?Sized>(
    label: usize,
    previous_class_ids: &[usize],
    features: &'a BTreeMap<usize, LanguageFeature>,
    rng: &mut R,
) -> Result<(usize, &'a LanguageFeature)> {
    if previous_class_ids.is_empty() {
        return Err(LabError::invalid("no previous classes to sample a negative from"));
    }
    if previous_class_ids.contains(&label) {
        return Err(LabError::invalid(format!(
            "label {label} is itself among the previous classes"
        )));
    }
    let id = previous_class_ids[rng.random_range(0..previous_class_ids.len())];
    let f = features
        .get(&id)
        .ok_or_else(|| LabError::invalid(format!("no text feature for class {id}")))?;
    Ok((id, f))
}
