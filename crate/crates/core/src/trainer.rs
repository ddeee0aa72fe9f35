//! Class-incremental training and evaluation.
//!
//! A [`Learner`] owns everything that trains: the prompt pool, the optional
//! shared general prefix and the classifier head. The backbone stays frozen
//! and is passed in by reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{argmax, bootstrap_pretrain, sum_all, Backbone, BootstrapReport, BootstrapSettings, LayerPrefix, PrefixSet, PretextSet};
use crate::config::{DatasetConfig, ExperimentConfig, LossWeights, ProviderConfig};
use crate::data::{generate_synthetic, load_dataset_dir, split_tasks, Dataset, Sample, SyntheticSpec, TaskLoader, TaskSpec};
use crate::error::{LabError, Result};
use crate::langguide::{
    class_text, class_triplet_loss, sample_negative_class, sample_negative_task, task_text, task_triplet_loss,
    EmbeddingProvider, FeatureKind, LanguageFeature,
};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::numcore::{adam_step, io, no_grad, AdamState, Tensor};
use crate::promptpool::{pool_x_o, PooledInput, PromptMode, PromptPool, Selection};

/// Linear layer over all classes of the sequence; rows are indexed by
/// `class_id - first_class`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    weight: Tensor,
    bias: Tensor,
    first_class: usize,
}

impl ClassifierHead {
    pub fn init(num_classes: usize, embed_dim: usize, first_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 0.02).expect("positive std");
        let w = (0..num_classes * embed_dim).map(|_| d.sample(&mut rng)).collect();
        Ok(Self {
            weight: Tensor::param("head.weight", w, &[num_classes, embed_dim])?,
            bias: Tensor::param("head.bias", vec![0.0; num_classes], &[num_classes])?,
            first_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn row(&self, class_id: usize) -> Result<usize> {
        class_id
            .checked_sub(self.first_class)
            .filter(|&r| r < self.num_classes())
            .ok_or_else(|| LabError::invalid(format!("class {class_id} has no head row")))
    }

    /// Logits for every class, `[C]`.
    pub fn logits(&self, x_o: &Tensor) -> Result<Tensor> {
        let e = self.weight.shape()[1];
        self.weight
            .matmul(&x_o.reshape(&[e, 1])?)?
            .reshape(&[self.num_classes()])?
            .add(&self.bias)
    }
}

/// Learnable parameter counts; the backbone count is reported for reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub prompts: usize,
    pub keys: usize,
    pub head: usize,
}

/// Prompt pool, general prefix and head.
#[derive(Debug, Clone)]
pub struct Learner {
    mode: PromptMode,
    pool: PromptPool,
    /// Prefix mode only: `[general_layers.len() * general_len, E]`.
    general: Option<Tensor>,
    expert_len: usize,
    general_len: usize,
    expert_layers: Vec<usize>,
    general_layers: Vec<usize>,
    head: ClassifierHead,
}

impl Learner {
    pub fn init(cfg: &ExperimentConfig, num_classes: usize, first_class: usize, seed: u64) -> Result<Self> {
        let e = cfg.backbone.embed_dim;
        let p = &cfg.pool;
        let prompt_len = match cfg.mode {
            PromptMode::PromptTuning => p.prompt_len,
            PromptMode::PrefixTuning => p.expert_len * p.expert_layers.len(),
        };
        let pool = PromptPool::init(p.size, prompt_len, e, p.select, seed ^ 0x0B0B_0001)?;
        let general = match cfg.mode {
            PromptMode::PrefixTuning if p.general_len > 0 && !p.general_layers.is_empty() => {
                let rows = p.general_len * p.general_layers.len();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0B0B_0002);
                let u = rand_distr::Uniform::new(-1.0, 1.0).expect("valid range");
                let data = (0..rows * e).map(|_| u.sample(&mut rng)).collect();
                Some(Tensor::param("general.prompts", data, &[rows, e])?)
            }
            _ => None,
        };
        Ok(Self {
            mode: cfg.mode,
            pool,
            general,
            expert_len: p.expert_len,
            general_len: p.general_len,
            expert_layers: p.expert_layers.clone(),
            general_layers: if general_is_used(cfg) { p.general_layers.clone() } else { vec![] },
            head: ClassifierHead::init(num_classes, e, first_class, seed ^ 0x0B0B_0003)?,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn pool(&self) -> &PromptPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut PromptPool {
        &mut self.pool
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn general(&self) -> Option<&Tensor> {
        self.general.as_ref()
    }

    /// Everything the optimizer updates.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut v = self.pool.trainable();
        v.extend(self.general.iter().cloned());
        v.extend([self.head.weight.clone(), self.head.bias.clone()]);
        v
    }

    pub fn param_counts(&self, backbone: &Backbone) -> ParamCounts {
        ParamCounts {
            backbone: backbone.param_count(),
            prompts: self.pool.prompts().numel() + self.general.as_ref().map_or(0, Tensor::numel),
            keys: if self.pool.keys_frozen() { 0 } else { self.pool.keys().numel() },
            head: self.head.weight.numel() + self.head.bias.numel(),
        }
    }

    fn prefix_layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.expert_layers.iter().chain(&self.general_layers).copied().collect();
        l.sort_unstable();
        l
    }

    fn prefixes(&self, sel: &Selection) -> Result<PrefixSet> {
        let gathered = self.pool.gather_prompts(sel)?;
        let per_prompt = self.pool.prompt_len();
        let half = self.expert_len / 2;
        let mut entries = Vec::new();
        for (li, &layer) in self.expert_layers.iter().enumerate() {
            let mut keys = Vec::with_capacity(sel.indices.len());
            let mut values = Vec::with_capacity(sel.indices.len());
            for n in 0..sel.indices.len() {
                let start = n * per_prompt + li * self.expert_len;
                keys.push(gathered.slice(0, start, start + half)?);
                values.push(gathered.slice(0, start + half, start + self.expert_len)?);
            }
            entries.push(LayerPrefix {
                layer,
                key: Tensor::concat(&keys, 0)?,
                value: Tensor::concat(&values, 0)?,
            });
        }
        if let Some(g) = &self.general {
            let half = self.general_len / 2;
            for (gi, &layer) in self.general_layers.iter().enumerate() {
                let start = gi * self.general_len;
                entries.push(LayerPrefix {
                    layer,
                    key: g.slice(0, start, start + half)?,
                    value: g.slice(0, start + half, start + self.general_len)?,
                });
            }
        }
        PrefixSet::from_pairs(entries)
    }

    /// Classification feature `x_o` for one image and its selection.
    pub fn x_o(&self, backbone: &Backbone, image: &Tensor, sel: &Selection) -> Result<Tensor> {
        match self.mode {
            PromptMode::PromptTuning => {
                let prompts = self.pool.gather_prompts(sel)?;
                let out = backbone.forward_prompt_tuning(image, &prompts)?;
                pool_x_o(self.mode, &PooledInput::PromptTokens(out.prompt_tokens))
            }
            PromptMode::PrefixTuning => {
                let prefixes = self.prefixes(sel)?;
                let cls = backbone.forward_prefix_tuning(image, &prefixes, &self.prefix_layers())?;
                pool_x_o(self.mode, &PooledInput::Cls(cls))
            }
        }
    }

    /// Predicted class id among `seen` (head rows), without task identity.
    pub fn predict(&self, backbone: &Backbone, image: &Tensor, seen: &[usize]) -> Result<usize> {
        no_grad(|| {
            let q = backbone.query_feature(image)?;
            let sel = self.pool.lookup(&q.data())?;
            let logits = self.head.logits(&self.x_o(backbone, image, &sel)?)?;
            let all = logits.data();
            let restricted: Vec<f64> = seen.iter().map(|&r| all[r]).collect();
            Ok(seen[argmax(&restricted)] + self.head.first_class)
        })
    }

    /// Writes `<stem>.tnsr` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut records = vec![
            ("pool.prompts".to_owned(), self.pool.prompts().clone()),
            ("pool.keys".to_owned(), self.pool.keys().clone()),
        ];
        if let Some(g) = &self.general {
            records.push(("general.prompts".into(), g.clone()));
        }
        records.push(("head.weight".into(), self.head.weight.clone()));
        records.push(("head.bias".into(), self.head.bias.clone()));
        let entries = io::write_bundle(&dir.join(format!("{stem}.tnsr")), &records)?;
        let manifest = LearnerManifest {
            mode: self.mode,
            m: self.pool.size(),
            l_p: self.pool.prompt_len(),
            n: self.pool.select_count(),
            keys_frozen: self.pool.keys_frozen(),
            expert_len: self.expert_len,
            general_len: self.general_len,
            expert_layers: self.expert_layers.clone(),
            general_layers: self.general_layers.clone(),
            first_class: self.head.first_class,
            records: entries,
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| LabError::file(&path, e.to_string()))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::file(&path, e.to_string()))?;
        let m: LearnerManifest = serde_json::from_str(&text).map_err(|e| LabError::file(&path, e.to_string()))?;
        let records: BTreeMap<String, Tensor> = io::read_bundle(&dir.join(format!("{stem}.tnsr")), &m.records)?
            .into_iter()
            .collect();
        let get = |name: &str| {
            records
                .get(name)
                .cloned()
                .ok_or_else(|| LabError::file(&path, format!("missing record `{name}`")))
        };
        let pool = PromptPool::from_parts(get("pool.prompts")?, get("pool.keys")?, m.n, m.keys_frozen)?;
        if pool.size() != m.m || pool.prompt_len() != m.l_p {
            return Err(LabError::file(&path, "pool records disagree with M / L_p"));
        }
        let general = match records.get("general.prompts") {
            Some(g) => Some(g.to_param("general.prompts")),
            None => None,
        };
        let weight = get("head.weight")?.to_param("head.weight");
        let bias = get("head.bias")?.to_param("head.bias");
        Ok(Self {
            mode: m.mode,
            pool,
            general,
            expert_len: m.expert_len,
            general_len: m.general_len,
            expert_layers: m.expert_layers,
            general_layers: m.general_layers,
            head: ClassifierHead {
                weight,
                bias,
                first_class: m.first_class,
            },
        })
    }
}

fn general_is_used(cfg: &ExperimentConfig) -> bool {
    cfg.mode == PromptMode::PrefixTuning && cfg.pool.general_len > 0 && !cfg.pool.general_layers.is_empty()
}

#[derive(Debug, Serialize, Deserialize)]
struct LearnerManifest {
    mode: PromptMode,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "L_p")]
    l_p: usize,
    #[serde(rename = "N")]
    n: usize,
    keys_frozen: bool,
    expert_len: usize,
    general_len: usize,
    expert_layers: Vec<usize>,
    general_layers: Vec<usize>,
    first_class: usize,
    records: Vec<io::RecordEntry>,
}

/// Text features seen so far; task features are indexed by task id.
#[derive(Debug, Default, Clone)]
pub struct LanguageMemory {
    pub tasks: Vec<LanguageFeature>,
    pub classes: BTreeMap<usize, LanguageFeature>,
}

impl LanguageMemory {
    /// Encodes the texts of `spec` and records them.
    pub fn learn_task(&mut self, spec: &TaskSpec, provider: &EmbeddingProvider) -> Result<()> {
        if spec.task_id != self.tasks.len() {
            return Err(LabError::invalid(format!(
                "task {} registered out of order (have {})",
                spec.task_id,
                self.tasks.len()
            )));
        }
        self.tasks.push(provider.encode(&task_text(&spec.class_names)?, FeatureKind::Task)?);
        for (&id, name) in spec.class_ids.iter().zip(&spec.class_names) {
            self.classes.insert(id, provider.encode(&class_text(name)?, FeatureKind::Class)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub key_pull: f64,
    pub task_loss: f64,
    pub class_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task_id: usize,
    pub epochs: Vec<EpochLog>,
    /// Mean cosine between selected keys and this task's text feature, over
    /// the task's training images, before and after training on it.
    pub key_text_cosine_start: f64,
    pub key_text_cosine_end: f64,
}

/// Query features of a task's training images; fixed because the backbone is frozen.
fn cache_queries(backbone: &Backbone, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| backbone.query_feature(&s.image)).collect()
}

fn key_text_cosine(pool: &PromptPool, queries: &[Tensor], text: &LanguageFeature) -> Result<f64> {
    let e = pool.embed_dim();
    let target = text.vector();
    let keys = pool.keys().to_vec();
    let mut total = 0.0;
    for q in queries {
        let sel = pool.lookup(&q.data())?;
        let mut s = 0.0;
        for &i in &sel.indices {
            let k = &keys[i * e..(i + 1) * e];
            let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            s += k.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / kn;
        }
        total += s / sel.indices.len() as f64;
    }
    Ok(total / queries.len().max(1) as f64)
}

/// Trains on one task. `memory` must already hold the features of tasks
/// `0..=t`; only `loader`'s samples are read.
pub fn train_task(
    learner: &mut Learner,
    backbone: &Backbone,
    loader: &TaskLoader,
    memory: &LanguageMemory,
    settings: &TrainSettings,
) -> Result<TaskLog> {
    let spec = loader.spec();
    let t = spec.task_id;
    if memory.tasks.len() <= t {
        return Err(LabError::invalid(format!("no text feature registered for task {t}")));
    }
    let own_text = &memory.tasks[t];
    let queries = cache_queries(backbone, loader.samples())?;
    let start_cos = key_text_cosine(&learner.pool, &queries, own_text)?;

    let mut allowed = vec![false; learner.head.num_classes()];
    for &c in &spec.class_ids {
        allowed[learner.head.row(c)?] = true;
    }
    let mask: Vec<bool> = allowed.iter().map(|a| !a).collect();
    let previous_classes: Vec<usize> = memory
        .classes
        .keys()
        .copied()
        .filter(|c| !spec.contains(*c))
        .collect();

    let w = settings.loss;
    let keys_train = !learner.pool.keys_frozen();
    let use_key = keys_train && w.lambda_key > 0.0;
    let use_task = t >= 1 && keys_train && w.lambda_task > 0.0;
    let use_class = t >= 1 && w.lambda_class > 0.0 && !previous_classes.is_empty();

    let params = learner.trainable();
    let mut adam = AdamState::new(settings.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ (t as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let mut epochs = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let mut log = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        let order = loader.epoch_order(epoch);
        for chunk in order.chunks(settings.batch_size.max(1)) {
            params.iter().for_each(Tensor::zero_grad);
            let task_negative = if use_task {
                Some(sample_negative_task(t, &memory.tasks, &mut rng)?)
            } else {
                None
            };
            let mut per_sample = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &loader.samples()[i];
                let q = &queries[i];
                let sel = learner.pool.lookup(&q.data())?;
                let x_o = learner.x_o(backbone, &sample.image, &sel)?;
                let row = learner.head.row(sample.label)?;
                let lp = learner
                    .head
                    .logits(&x_o)?
                    .masked_fill(&mask, f64::NEG_INFINITY)?
                    .log_softmax(0)?;
                let ce = lp.slice(0, row, row + 1)?.reshape(&[])?.neg();
                log.cross_entropy += ce.item();
                let mut terms = vec![ce];
                if use_key {
                    let k = learner.pool.key_pull_loss(q, &sel)?;
                    log.key_pull += k.item();
                    terms.push(k.scale(w.lambda_key));
                }
                if let Some(neg) = task_negative {
                    let keys = learner.pool.gather_keys(&sel)?;
                    let l = task_triplet_loss(&keys, own_text, neg)?;
                    log.task_loss += l.item();
                    terms.push(l.scale(w.lambda_task));
                }
                if use_class {
                    let (_, neg) = sample_negative_class(sample.label, &previous_classes, &memory.classes, &mut rng)?;
                    let pos = memory
                        .classes
                        .get(&sample.label)
                        .ok_or_else(|| LabError::invalid(format!("no text feature for class {}", sample.label)))?;
                    let l = class_triplet_loss(&x_o, pos, neg)?;
                    log.class_loss += l.item();
                    terms.push(l.scale(w.lambda_class));
                }
                per_sample.push(sum_all(&terms)?);
            }
            let loss = sum_all(&per_sample)?.scale(1.0 / chunk.len() as f64);
            log.total += loss.item() * chunk.len() as f64;
            loss.backward()?;
            adam_step(&params, &mut adam)?;
        }
        let n = loader.len().max(1) as f64;
        log.cross_entropy /= n;
        log.key_pull /= n;
        log.task_loss /= n;
        log.class_loss /= n;
        log.total /= n;
        log::info!(
            "task {t} epoch {epoch}: total {:.4} ce {:.4} key {:.4} task {:.4} class {:.4}",
            log.total,
            log.cross_entropy,
            log.key_pull,
            log.task_loss,
            log.class_loss
        );
        epochs.push(log);
    }
    let end_cos = key_text_cosine(&learner.pool, &queries, own_text)?;
    log::info!("task {t}: key/text cosine {start_cos:.4} -> {end_cos:.4}");
    Ok(TaskLog {
        task_id: t,
        epochs,
        key_text_cosine_start: start_cos,
        key_text_cosine_end: end_cos,
    })
}

/// Evaluation threads from `LGCL_LAB_THREADS`, default 1.
pub fn eval_threads_from_env() -> usize {
    std::env::var("LGCL_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Row `t` of the accuracy matrix: accuracy on each of `tests` (tasks
/// `0..=t`), predicting among all classes of those tasks.
pub fn evaluate_after_task(
    learner: &Learner,
    backbone: &Backbone,
    tasks: &[TaskSpec],
    tests: &[&[Sample]],
    threads: usize,
) -> Result<Vec<f64>> {
    if tests.len() != tasks.len() {
        return Err(LabError::invalid(format!(
            "{} tasks but {} test splits",
            tasks.len(),
            tests.len()
        )));
    }
    if let Some(i) = tests.iter().position(|t| t.is_empty()) {
        return Err(LabError::invalid(format!("test split for task {i} is missing or empty")));
    }
    let mut seen = Vec::new();
    for t in tasks {
        for &c in &t.class_ids {
            seen.push(learner.head.row(c)?);
        }
    }
    let jobs: Vec<(usize, &Sample)> = tests
        .iter()
        .enumerate()
        .flat_map(|(ti, set)| set.iter().map(move |s| (ti, s)))
        .collect();
    let threads = threads.clamp(1, jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads);
    let results: Vec<Result<Vec<(usize, bool)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let seen = &seen;
                scope.spawn(move || {
                    part.iter()
                        .map(|&(ti, s)| Ok((ti, learner.predict(backbone, &s.image, seen)? == s.label)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut correct = vec![0usize; tests.len()];
    for part in results {
        for (ti, ok) in part? {
            correct[ti] += usize::from(ok);
        }
    }
    Ok(correct
        .iter()
        .zip(tests)
        .map(|(&c, set)| c as f64 / set.len() as f64)
        .collect())
}

/// Report written as `report.json`. Metric values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset_signature: String,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub avg_accuracy: Vec<f64>,
    pub forgetting: Vec<Option<f64>>,
    pub wall_time_s: Option<f64>,
    pub param_counts: ParamCounts,
    pub backbone_checksum: String,
    pub bootstrap: Option<BootstrapReport>,
    pub tasks: Vec<TaskLog>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::file(path, e.to_string()))?;
        let report: Self = serde_json::from_str(&text).map_err(|e| LabError::file(path, e.to_string()))?;
        let t = report.accuracy_matrix.len();
        if t == 0 || report.avg_accuracy.len() != t || report.forgetting.len() != t {
            return Err(LabError::file(path, "report rows are missing or inconsistent"));
        }
        Ok(report)
    }

    /// `task,avg_accuracy,forgetting` rows; forgetting is empty where undefined.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("task,avg_accuracy,forgetting\n");
        for (t, (a, f)) in self.avg_accuracy.iter().zip(&self.forgetting).enumerate() {
            let f = f.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{t},{a},{f}\n"));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.avg_accuracy.last().expect("validated non-empty")
    }

    pub fn final_forgetting(&self) -> Option<f64> {
        *self.forgetting.last().expect("validated non-empty")
    }
}

/// Everything a run produces, including state for invariant checks.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub matrix: AccuracyMatrix,
    pub learner: Learner,
    pub backbone: Backbone,
    pub checksum_before: String,
    pub checksum_after: String,
    /// Provider `encode` calls made inside evaluation; always expected to be 0.
    pub eval_provider_calls: usize,
}

/// Hash over class names, image shape, task count and every sample. The
/// experiment seed is not part of it.
pub fn dataset_signature(dataset: &Dataset, num_tasks: usize) -> String {
    let mut h = Sha256::new();
    h.update((dataset.first_class as u64).to_le_bytes());
    h.update((num_tasks as u64).to_le_bytes());
    for name in &dataset.class_names {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for d in dataset.image_shape {
        h.update((d as u64).to_le_bytes());
    }
    for (tag, set) in [(b'r', &dataset.train), (b'e', &dataset.test)] {
        h.update([tag]);
        for s in set {
            h.update((s.label as u64).to_le_bytes());
            for v in s.image.data().iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => generate_synthetic(spec),
        DatasetConfig::Dir { path } => {
            let loaded = load_dataset_dir(path)?;
            for w in &loaded.warnings {
                log::warn!("{}: {w}", path.display());
            }
            Ok(loaded.dataset)
        }
    }
}

pub fn build_provider(cfg: &ExperimentConfig) -> Result<EmbeddingProvider> {
    match &cfg.provider {
        ProviderConfig::Synthetic { seed } => Ok(EmbeddingProvider::synthetic(cfg.backbone.embed_dim, *seed)),
        ProviderConfig::File { path, projection_seed } => {
            EmbeddingProvider::from_file(path, cfg.backbone.embed_dim, *projection_seed)
        }
    }
}

fn bootstrap_key(cfg: &ExperimentConfig) -> String {
    let mut b = cfg.bootstrap.clone();
    b.cache_dir = None;
    b.checkpoint = None;
    let json = serde_json::to_vec(&(&cfg.backbone, &b)).expect("plain data serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Loads the configured checkpoint, reuses a cached bootstrap, or runs the
/// bootstrap (and caches it when a cache directory is set).
pub fn prepare_backbone(cfg: &ExperimentConfig, task_classes: &[usize]) -> Result<(Backbone, Option<BootstrapReport>)> {
    if let Some(stem) = &cfg.bootstrap.checkpoint {
        let (dir, name) = split_stem(stem)?;
        let bb = Backbone::load(&dir, &name)?;
        if *bb.config() != cfg.backbone {
            return Err(LabError::file(stem, "checkpoint ViT configuration differs from [backbone]"));
        }
        return Ok((bb, None));
    }
    let key = format!("backbone-{}", bootstrap_key(cfg));
    if let Some(cache) = &cfg.bootstrap.cache_dir {
        let report_path = cache.join(format!("{key}.bootstrap.json"));
        if report_path.exists() {
            let bb = Backbone::load(cache, &key)?;
            let text = std::fs::read_to_string(&report_path).map_err(|e| LabError::file(&report_path, e.to_string()))?;
            let report = serde_json::from_str(&text).map_err(|e| LabError::file(&report_path, e.to_string()))?;
            log::info!("reusing bootstrapped backbone {}", cache.join(&key).display());
            return Ok((bb, Some(report)));
        }
    }
    let b = &cfg.bootstrap;
    let pretext = generate_synthetic(&SyntheticSpec {
        num_classes: b.num_classes,
        first_class: b.first_class,
        train_per_class: b.train_per_class,
        test_per_class: b.val_per_class,
        image_size: cfg.backbone.image_size,
        channels: cfg.backbone.num_channels,
        noise_std: b.noise_std,
        seed: b.seed,
    })?;
    let set = PretextSet {
        classes: pretext.class_ids(),
        train: pretext.train,
        val: pretext.test,
    };
    let settings = BootstrapSettings {
        epochs: b.epochs,
        batch_size: b.batch_size,
        learning_rate: b.learning_rate,
        seed: b.seed,
    };
    let (bb, report) = bootstrap_pretrain(cfg.backbone, &set, task_classes, &settings)?;
    log::info!(
        "bootstrap: val accuracy {:.3} over {} pretext classes",
        report.val_accuracy,
        report.num_classes
    );
    if let Some(cache) = &cfg.bootstrap.cache_dir {
        std::fs::create_dir_all(cache).map_err(|e| LabError::file(cache, e.to_string()))?;
        bb.save(cache, &key)?;
        let report_path = cache.join(format!("{key}.bootstrap.json"));
        std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
            .map_err(|e| LabError::file(&report_path, e.to_string()))?;
    }
    Ok((bb, Some(report)))
}

fn split_stem(stem: &Path) -> Result<(PathBuf, String)> {
    let name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| LabError::file(stem, "checkpoint path has no file name"))?;
    let name = name.strip_suffix(".json").unwrap_or(name).to_owned();
    let dir = stem.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name))
}

/// Controls that do not belong in the experiment's identity.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub eval_threads: usize,
    pub record_wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_threads: eval_threads_from_env(),
            record_wall_time: false,
        }
    }
}

/// Full protocol: data, backbone, then train and evaluate task by task.
/// Writes outputs when `cfg.output.dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let (backbone, boot) = prepare_backbone(cfg, &dataset.class_ids())?;
    run_with_backbone(cfg, &dataset, backbone, boot, opts)
}

/// [`run_experiment`] with data and a frozen backbone supplied by the caller.
pub fn run_with_backbone(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    backbone: Backbone,
    bootstrap: Option<BootstrapReport>,
    opts: &RunOptions,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    if !backbone.is_frozen() {
        return Err(LabError::invalid("the backbone must be frozen before continual training"));
    }
    if dataset.image_shape != cfg.backbone.image_shape() {
        return Err(LabError::invalid(format!(
            "dataset images {:?} do not match the backbone input {:?}",
            dataset.image_shape,
            cfg.backbone.image_shape()
        )));
    }
    let checksum_before = backbone.checksum();
    let provider = build_provider(cfg)?;
    let splits = split_tasks(dataset, cfg.tasks, cfg.seed)?;
    let mut learner = Learner::init(cfg, dataset.num_classes(), dataset.first_class, cfg.seed)?;

    if cfg.pool.keys_frozen {
        let mut all = LanguageMemory::default();
        for s in &splits {
            all.learn_task(s.spec(), &provider)?;
        }
        let rows: Vec<Vec<f64>> = (0..learner.pool.size())
            .map(|j| all.tasks[j % all.tasks.len()].vector().to_vec())
            .collect();
        learner.pool.freeze_keys_to(&rows)?;
    }

    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        loss: cfg.effective_loss(),
        seed: cfg.seed,
    };
    let mut memory = LanguageMemory::default();
    let mut matrix = AccuracyMatrix::new();
    let mut logs = Vec::with_capacity(splits.len());
    let mut eval_calls = 0;
    for (t, split) in splits.iter().enumerate() {
        memory.learn_task(split.spec(), &provider)?;
        logs.push(train_task(&mut learner, &backbone, &split.loader, &memory, &settings)?);
        let specs: Vec<TaskSpec> = splits[..=t].iter().map(|s| s.spec().clone()).collect();
        let tests: Vec<&[Sample]> = splits[..=t].iter().map(|s| s.test.as_slice()).collect();
        let calls = provider.call_count();
        let row = evaluate_after_task(&learner, &backbone, &specs, &tests, opts.eval_threads)?;
        eval_calls += provider.call_count() - calls;
        log::info!(
            "after task {t}: {}",
            row.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join(" ")
        );
        matrix.push_row(row)?;
    }

    let pct = |v: f64| 100.0 * v;
    let n = matrix.num_rows();
    let avg_accuracy = (0..n).map(|t| average_accuracy(&matrix, t).map(pct)).collect::<Result<Vec<_>>>()?;
    let forgetting = (0..n)
        .map(|t| forgetting(&matrix, t).map(|f| f.map(pct)))
        .collect::<Result<Vec<_>>>()?;
    let mut echo = cfg.clone();
    echo.output.dir = None;
    echo.bootstrap.cache_dir = None;
    let checksum_after = backbone.checksum();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        config: echo,
        seed: cfg.seed,
        dataset_signature: dataset_signature(dataset, cfg.tasks),
        accuracy_matrix: matrix.rows().iter().map(|r| r.iter().map(|&v| pct(v)).collect()).collect(),
        avg_accuracy,
        forgetting,
        wall_time_s: opts.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        param_counts: learner.param_counts(&backbone),
        backbone_checksum: checksum_after.clone(),
        bootstrap,
        tasks: logs,
    };
    let outcome = ExperimentOutcome {
        report,
        matrix,
        learner,
        backbone,
        checksum_before,
        checksum_after,
        eval_provider_calls: eval_calls,
    };
    if let Some(dir) = &cfg.output.dir {
        write_outputs(&outcome, dir, cfg.output.checkpoints)?;
    }
    Ok(outcome)
}

/// `report.json`, `metrics.csv` and optionally the backbone and learner checkpoints.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path, checkpoints: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e.to_string()))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| LabError::file(&p, e.to_string()))
    };
    write("report.json", outcome.report.to_json()?)?;
    write("metrics.csv", outcome.report.metrics_csv())?;
    if checkpoints {
        outcome.backbone.save(dir, "backbone")?;
        outcome.learner.save(dir, "learner")?;
    }
    Ok(())
}
