//! Synthetic grating datasets, the on-disk dataset directory format and
//! class-incremental task splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numcore::{io, Tensor};

/// One labeled image, `[C, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Global id of `class_names[0]`; ids are contiguous from here.
    pub first_class: usize,
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        (self.first_class..self.first_class + self.num_classes()).collect()
    }

    pub fn class_name(&self, id: usize) -> Option<&str> {
        id.checked_sub(self.first_class)
            .and_then(|i| self.class_names.get(i))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    #[serde(default)]
    pub first_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The default 20-class benchmark, split into 5 tasks by the trainer.
    pub fn synth_20() -> Self {
        Self {
            num_classes: 20,
            first_class: 0,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 32,
            channels: 3,
            noise_std: 0.15,
            seed: 2023,
        }
    }
}

/// Grating parameters for one class.
struct Grating {
    angle: f64,
    freq: f64,
    phase: f64,
    amp: Vec<f64>,
}

fn class_grating(class_id: usize, channels: usize, seed: u64) -> Grating {
    const GOLDEN: f64 = 0.618_033_988_749_894_8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let angle = std::f64::consts::PI * ((class_id as f64 * GOLDEN).fract());
    let freq = 1.0 + (class_id % 4) as f64 + rng.random_range(0.0..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = (0..channels)
        .map(|_| {
            let a: f64 = rng.random_range(0.3..1.0);
            if rng.random_bool(0.5) {
                a
            } else {
                -a
            }
        })
        .collect();
    Grating {
        angle,
        freq,
        phase,
        amp,
    }
}

/// Noise-free class pattern, values in `[0.05, 0.95]`.
pub fn class_template(class_id: usize, channels: usize, size: usize, seed: u64) -> Vec<f64> {
    let g = class_grating(class_id, channels, seed);
    let (c, s) = (g.angle.cos(), g.angle.sin());
    let mut out = Vec::with_capacity(channels * size * size);
    for amp in &g.amp {
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * c + y as f64 * s) / size as f64;
                let v = (std::f64::consts::TAU * g.freq * u + g.phase).sin();
                out.push(0.5 + 0.45 * amp * v);
            }
        }
    }
    out
}

/// Per-class gratings plus Gaussian pixel noise, clamped to `[0, 1]` and
/// rounded to `f32` precision so that saving and reloading is exact.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0
        || spec.train_per_class == 0
        || spec.test_per_class == 0
        || spec.image_size == 0
        || spec.channels == 0
    {
        return Err(LabError::invalid(format!(
            "synthetic dataset sizes must be positive: {spec:?}"
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(LabError::invalid(format!(
            "noise_std must be a finite non-negative number, got {}",
            spec.noise_std
        )));
    }
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| LabError::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..spec.num_classes {
        let id = spec.first_class + k;
        let template = class_template(id, spec.channels, spec.image_size, spec.seed);
        for i in 0..spec.train_per_class + spec.test_per_class {
            let data: Vec<f64> = template
                .iter()
                .map(|&v| {
                    let n = if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    ((v + n).clamp(0.0, 1.0) as f32) as f64
                })
                .collect();
            let sample = Sample {
                image: Tensor::new(data, &shape)?,
                label: id,
            };
            if i < spec.train_per_class {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset {
        first_class: spec.first_class,
        class_names: (0..spec.num_classes)
            .map(|k| format!("class_{}", spec.first_class + k))
            .collect(),
        image_shape: shape,
        train,
        test,
    })
}

/// One task of a class-incremental sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
}

impl TaskSpec {
    pub fn contains(&self, class_id: usize) -> bool {
        self.class_ids.contains(&class_id)
    }
}

/// Training samples of exactly one task, reshuffled each epoch.
#[derive(Debug, Clone)]
pub struct TaskLoader {
    spec: TaskSpec,
    samples: Vec<Sample>,
    seed: u64,
}

impl TaskLoader {
    pub fn new(spec: TaskSpec, samples: Vec<Sample>, seed: u64) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| !spec.contains(s.label)) {
            return Err(LabError::invalid(format!(
                "task {} loader got label {} outside its classes {:?}",
                spec.task_id, bad.label, spec.class_ids
            )));
        }
        Ok(Self {
            spec,
            samples,
            seed,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffled index order for `epoch`; identical for identical seeds.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mix = self.seed
            ^ (self.spec.task_id as u64).wrapping_mul(0xA24B_AED4_963E_E407)
            ^ (epoch as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
        idx
    }

    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<&Sample>> {
        self.epoch_order(epoch)
            .chunks(batch_size.max(1))
            .map(|c| c.iter().map(|&i| &self.samples[i]).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub loader: TaskLoader,
    pub test: Vec<Sample>,
}

impl TaskSplit {
    pub fn spec(&self) -> &TaskSpec {
        self.loader.spec()
    }
}

/// Contiguous disjoint class blocks, one per task.
pub fn split_tasks(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<Vec<TaskSplit>> {
    let n = dataset.num_classes();
    if num_tasks == 0 || n % num_tasks != 0 {
        return Err(LabError::invalid(format!(
            "cannot split {n} classes into {num_tasks} equal tasks"
        )));
    }
    let per = n / num_tasks;
    let mut out = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let ids: Vec<usize> = (0..per).map(|k| dataset.first_class + t * per + k).collect();
        let spec = TaskSpec {
            task_id: t,
            class_names: ids
                .iter()
                .map(|&id| dataset.class_name(id).unwrap_or_default().to_owned())
                .collect(),
            class_ids: ids,
        };
        let pick = |set: &[Sample]| -> Vec<Sample> {
            set.iter().filter(|s| spec.contains(s.label)).cloned().collect()
        };
        let train = pick(&dataset.train);
        let test = pick(&dataset.test);
        out.push(TaskSplit {
            loader: TaskLoader::new(spec, train, seed)?,
            test,
        });
    }
    assert_disjoint(out.iter().map(TaskSplit::spec))?;
    Ok(out)
}

/// Errors if any class id appears in more than one task.
pub fn assert_disjoint<'a>(tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        for &c in &t.class_ids {
            if !seen.insert(c) {
                return Err(LabError::invalid(format!(
                    "class {c} appears in more than one task"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    classes: Vec<String>,
    image_shape: [usize; 3],
    train: Vec<SampleEntry>,
    test: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "is_zero")]
    first_class: usize,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// Writes `manifest.json` plus one TNSR file per sample.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    for split in ["train", "test"] {
        std::fs::create_dir_all(dir.join(split)).map_err(|e| LabError::file(dir, e.to_string()))?;
    }
    let entries = |split: &str, samples: &[Sample]| -> Result<Vec<SampleEntry>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = format!("{split}/{i:06}.tnsr");
                io::save_file(&dir.join(&file), &s.image)?;
                Ok(SampleEntry {
                    file,
                    label: s.label,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        classes: dataset.class_names.clone(),
        image_shape: dataset.image_shape,
        train: entries("train", &dataset.train)?,
        test: entries("test", &dataset.test)?,
        first_class: dataset.first_class,
        extra: BTreeMap::new(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| LabError::file(&path, e.to_string()))
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Non-fatal problems, such as unrecognized manifest fields.
    pub warnings: Vec<String>,
}

/// Loads a dataset directory. Images with values above 1 are treated as
/// 8-bit and rescaled by 1/255; everything is clamped to `[0, 1]`.
pub fn load_dataset_dir(dir: &Path) -> Result<LoadedDataset> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| LabError::file(&mpath, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LabError::file(&mpath, e.to_string()))?;
    let mut warnings = Vec::new();
    for key in manifest.extra.keys() {
        let w = format!("{}: ignoring unknown field `{key}`", mpath.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    let shape = manifest.image_shape;
    let first = manifest.first_class;
    let n_classes = manifest.classes.len();
    let load = |entries: &[SampleEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                let path: PathBuf = dir.join(&e.file);
                let t = io::load_file(&path)?;
                if t.shape() != shape {
                    return Err(LabError::file(
                        &path,
                        format!("image shape {:?} does not match manifest {shape:?}", t.shape()),
                    ));
                }
                if e.label < first || e.label >= first + n_classes {
                    return Err(LabError::file(
                        &path,
                        format!("label {} outside the manifest's {n_classes} classes", e.label),
                    ));
                }
                let image = if t.data().iter().any(|&v| v > 1.0) {
                    let scaled = t.data().iter().map(|v| (v / 255.0).clamp(0.0, 1.0)).collect();
                    Tensor::new(scaled, &shape)?
                } else if t.data().iter().any(|&v| v < 0.0) {
                    let clamped = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
                    Tensor::new(clamped, &shape)?
                } else {
                    t
                };
                Ok(Sample {
                    image,
                    label: e.label,
                })
            })
            .collect()
    };
    let dataset = Dataset {
        first_class: first,
        image_shape: shape,
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
        class_names: manifest.classes,
    };
    Ok(LoadedDataset { dataset, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 8,
            first_class: 0,
            train_per_class: 6,
            test_per_class: 3,
            image_size: 8,
            channels: 3,
            noise_std: noise,
            seed: 11,
        }
    }

    fn nearest_template(ds: &Dataset, spec: &SyntheticSpec, s: &Sample) -> usize {
        let data = s.image.data();
        ds.class_ids()
            .into_iter()
            .min_by(|&a, &b| {
                let d = |c| {
                    class_template(c, spec.channels, spec.image_size, spec.seed)
                        .iter()
                        .zip(data.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                };
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap()
    }

    #[test]
    fn noiseless_classes_are_separable_by_nearest_template() {
        let spec = small(0.0);
        let ds = generate_synthetic(&spec).unwrap();
        let correct = ds
            .test
            .iter()
            .filter(|s| nearest_template(&ds, &spec, s) == s.label)
            .count();
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn generation_is_deterministic_and_clamped() {
        let spec = small(0.4);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(io::encode(&x.image), io::encode(&y.image));
            assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a.class_names[3], "class_3");
    }

    #[test]
    fn nonpositive_sizes_are_rejected() {
        let mut spec = small(0.1);
        spec.train_per_class = 0;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn split_is_a_disjoint_partition() {
        let mut spec = small(0.1);
        spec.num_classes = 20;
        let ds = generate_synthetic(&spec).unwrap();
        let tasks = split_tasks(&ds, 5, 3).unwrap();
        assert_eq!(tasks[1].spec().class_ids, vec![4, 5, 6, 7]);
        let total: usize = tasks.iter().map(|t| t.loader.len()).sum();
        assert_eq!(total, ds.train.len());
        for t in &tasks {
            assert!(t.loader.samples().iter().all(|s| t.spec().contains(s.label)));
            assert!(t.test.iter().all(|s| t.spec().contains(s.label)));
            for b in t.loader.batches(2, 4) {
                assert!(b.iter().all(|s| t.spec().contains(s.label)));
            }
        }
        assert!(split_tasks(&ds, 3, 3).is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let ds = generate_synthetic(&small(0.1)).unwrap();
        let tasks = split_tasks(&ds, 2, 9).unwrap();
        let l = &tasks[0].loader;
        let mut o = l.epoch_order(0);
        assert_eq!(o, l.epoch_order(0));
        assert_ne!(o, l.epoch_order(1));
        o.sort();
        assert_eq!(o, (0..l.len()).collect::<Vec<_>>());
    }

    #[test]
    fn loader_rejects_foreign_labels() {
        let ds = generate_synthetic(&small(0.1)).unwrap();
        let spec = TaskSpec {
            task_id: 0,
            class_ids: vec![0],
            class_names: vec!["class_0".into()],
        };
        assert!(TaskLoader::new(spec, ds.train.clone(), 0).is_err());
    }

    #[test]
    fn dataset_dir_round_trip_is_bit_identical() {
        let ds = generate_synthetic(&small(0.2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&ds, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert!(loaded.warnings.is_empty());
        let back = loaded.dataset;
        assert_eq!(back.class_names, ds.class_names);
        for (a, b) in ds.train.iter().chain(&ds.test).zip(back.train.iter().chain(&back.test)) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.to_vec(), b.image.to_vec());
        }
    }

    #[test]
    fn unknown_manifest_field_is_a_warning() {
        let ds = generate_synthetic(&small(0.2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&ds, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        v["license"] = "cc-by".into();
        std::fs::write(&mpath, v.to_string()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("license"));
    }

    #[test]
    fn corrupt_sample_names_the_file() {
        let ds = generate_synthetic(&small(0.2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&ds, dir.path()).unwrap();
        let bad = dir.path().join("test/000002.tnsr");
        let mut bytes = std::fs::read(&bad).unwrap();
        bytes[..4].copy_from_slice(b"JUNK");
        std::fs::write(&bad, bytes).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000002.tnsr"), "{err}");
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn missing_manifest_is_an_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest.json"), "{err}");
    }
}
