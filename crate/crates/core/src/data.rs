//! Builders that turn labeled datasets into disjoint-class task streams.
//!
//! A [`TaskStream`] owns each task's training data exactly once: training
//! consumes it via [`TaskStream::take_train`], in stream order, after which
//! the data is gone — re-reading a past task's training set is impossible by
//! construction, not by convention. Test sets stay readable for evaluation.
//!
//! Two sources are supported: a synthetic Gaussian-blob generator (fast,
//! deterministic, separability controlled by one knob) and an image-folder
//! layout `root/<split>/<class_name>/*.png`. Nothing here touches the
//! network.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::error::{Error, Result};

/// Parameters of the synthetic Gaussian task source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Latent dimension of the class blobs.
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Length of each class's mean vector; 0 makes classes
    /// indistinguishable, large values make a linear probe near-perfect.
    pub separation: f64,
    pub image_size: usize,
    pub in_channels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            separation: 10.0,
            image_size: 16,
            in_channels: 1,
        }
    }
}

/// Where the stream's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    ImageFolder {
        root: PathBuf,
        image_size: usize,
        in_channels: usize,
    },
    /// Image-folder layout at a conventional local path
    /// (`data/builtin-small` unless overridden).
    BuiltinSmall {
        root: Option<PathBuf>,
        image_size: usize,
        in_channels: usize,
    },
}

/// How a labeled dataset is partitioned into a disjoint-class task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Seed for the class-to-task permutation and the sampling RNG.
    pub shuffle_seed: u64,
    pub source: DataSource,
}

impl Default for SplitSpec {
    /// 5 tasks of 2 synthetic classes each; a full experiment runs in
    /// minutes on a laptop.
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            shuffle_seed: 0,
            source: DataSource::Synthetic(SyntheticSpec::default()),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config(
                "num_tasks and classes_per_task must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Build the stream from the configured source.
    pub fn build(&self) -> Result<TaskStream> {
        self.validate()?;
        match &self.source {
            DataSource::Synthetic(syn) => synthetic_gaussian_tasks(
                self.num_tasks,
                self.classes_per_task,
                syn,
                self.shuffle_seed,
            ),
            DataSource::ImageFolder {
                root,
                image_size,
                in_channels,
            } => {
                let dataset = load_image_folder(root, *image_size, *in_channels)?;
                split_classes(dataset, self)
            }
            DataSource::BuiltinSmall {
                root,
                image_size,
                in_channels,
            } => {
                let root = root
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("data/builtin-small"));
                let dataset = load_image_folder(&root, *image_size, *in_channels)?;
                split_classes(dataset, self)
            }
        }
    }
}

/// A set of labeled images with optional source paths.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    /// `[n, H, W, C]`.
    pub images: ImageBatch,
    /// Global class ids.
    pub labels: Vec<usize>,
    /// Source file per sample, when the set came from disk.
    pub paths: Option<Vec<String>>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> LabeledSet {
        let shape = self.images.dim();
        let mut images = ImageBatch::zeros((idx.len(), shape.1, shape.2, shape.3));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        let paths = self
            .paths
            .as_ref()
            .map(|ps| idx.iter().map(|&i| ps[i].clone()).collect());
        LabeledSet {
            images,
            labels,
            paths,
        }
    }
}

/// An unsplit source dataset with its own train/test division.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
}

/// One task of the stream. Training data is private; it leaves through
/// [`TaskStream::take_train`] exactly once.
#[derive(Debug)]
pub struct TaskData {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    train: Option<LabeledSet>,
    pub test: LabeledSet,
}

impl TaskData {
    pub fn train_available(&self) -> bool {
        self.train.is_some()
    }
}

/// Ordered disjoint-class tasks.
#[derive(Debug)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    next_train: usize,
    pub total_classes: usize,
}

impl TaskStream {
    fn new(tasks: Vec<TaskData>, total_classes: usize) -> Result<Self> {
        // Class disjointness is asserted on every stream.
        let mut seen = BTreeSet::new();
        for t in &tasks {
            for &c in &t.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Data(format!(
                        "class {c} assigned to more than one task"
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            next_train: 0,
            total_classes,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_id: usize) -> &TaskData {
        &self.tasks[task_id]
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    /// Global class ids introduced by tasks `0..=task_id`.
    pub fn classes_seen_by(&self, task_id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for t in &self.tasks[..=task_id] {
            out.extend(t.class_ids.iter().copied());
        }
        out
    }

    /// Move task `task_id`'s training data out of the stream. Tasks must be
    /// consumed strictly in order, each exactly once; afterwards the data no
    /// longer exists anywhere in the stream.
    pub fn take_train(&mut self, task_id: usize) -> Result<LabeledSet> {
        if task_id >= self.tasks.len() {
            return Err(Error::Protocol(format!(
                "task {task_id} out of range ({} tasks)",
                self.tasks.len()
            )));
        }
        if task_id != self.next_train {
            return Err(Error::Protocol(format!(
                "training data requested for task {task_id}, but the stream is at task {}",
                self.next_train
            )));
        }
        let set = self.tasks[task_id]
            .train
            .take()
            .ok_or_else(|| Error::Protocol(format!("task {task_id} training data already consumed")))?;
        self.next_train += 1;
        Ok(set)
    }

    /// Write the per-sample manifest `path,label,task_id` for sources that
    /// carry file paths. Synthetic streams have none and produce only the
    /// header.
    pub fn write_manifest<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path,label,task_id")?;
        for t in &self.tasks {
            for set in t.train.iter().chain(std::iter::once(&t.test)) {
                if let Some(paths) = &set.paths {
                    for (p, l) in paths.iter().zip(&set.labels) {
                        writeln!(w, "{p},{l},{}", t.task_id)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Partition a dataset's classes into `spec.num_tasks` disjoint groups of
/// `spec.classes_per_task`, deterministically under `spec.shuffle_seed`.
/// Per-class train/test membership is preserved from the source.
pub fn split_classes(dataset: SourceDataset, spec: &SplitSpec) -> Result<TaskStream> {
    spec.validate()?;
    let needed = spec.total_classes();
    if dataset.num_classes < needed {
        return Err(Error::Data(format!(
            "dataset has {} classes, split needs {}",
            dataset.num_classes, needed
        )));
    }
    let mut class_ids: Vec<usize> = (0..dataset.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    class_ids.shuffle(&mut rng);
    class_ids.truncate(needed);

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for task_id in 0..spec.num_tasks {
        let classes: Vec<usize> = class_ids
            [task_id * spec.classes_per_task..(task_id + 1) * spec.classes_per_task]
            .to_vec();
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        let pick = |set: &LabeledSet| -> Vec<usize> {
            set.labels
                .iter()
                .enumerate()
                .filter(|(_, l)| wanted.contains(l))
                .map(|(i, _)| i)
                .collect()
        };
        let train_idx = pick(&dataset.train);
        let test_idx = pick(&dataset.test);
        tasks.push(TaskData {
            task_id,
            class_ids: classes,
            train: Some(dataset.train.select(&train_idx)),
            test: dataset.test.select(&test_idx),
        });
    }
    TaskStream::new(tasks, dataset.num_classes)
}

/// Synthetic source: each class is an isotropic Gaussian blob around a
/// random unit direction scaled by `separation`, rendered to image tensors
/// through one fixed random linear embedding so the patch pipeline is
/// exercised. Bitwise deterministic under `seed`.
pub fn synthetic_gaussian_tasks(
    num_tasks: usize,
    classes_per_task: usize,
    syn: &SyntheticSpec,
    seed: u64,
) -> Result<TaskStream> {
    if syn.separation < 0.0 {
        return Err(Error::Config("separation must be >= 0".into()));
    }
    if syn.dim == 0 || syn.image_size == 0 || syn.in_channels == 0 {
        return Err(Error::Config("synthetic dims must be positive".into()));
    }
    let total_classes = num_tasks * classes_per_task;
    let pixels = syn.image_size * syn.image_size * syn.in_channels;

    // Fixed embedding and class means on one RNG stream, sampling on
    // another, so changing sample counts never changes the geometry.
    let mut geom_rng = ChaCha8Rng::seed_from_u64(seed);
    geom_rng.set_stream(1);
    let embedding = Array2::from_shape_fn((syn.dim, pixels), |_| {
        let v: f64 = geom_rng.sample(StandardNormal);
        v / (syn.dim as f64).sqrt()
    });
    let means: Vec<Array1<f64>> = (0..total_classes)
        .map(|_| {
            let mut v = Array1::from_shape_fn(syn.dim, |_| {
                geom_rng.sample::<f64, _>(StandardNormal)
            });
            let norm = v.dot(&v).sqrt().max(1e-12);
            v.mapv_inplace(|x| x / norm * syn.separation);
            v
        })
        .collect();

    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rng.set_stream(2);
    let render = |class: usize, n: usize, rng: &mut ChaCha8Rng| -> LabeledSet {
        let mut images = ImageBatch::zeros((n, syn.image_size, syn.image_size, syn.in_channels));
        for s in 0..n {
            let z = Array1::from_shape_fn(syn.dim, |_| {
                rng.sample::<f64, _>(StandardNormal)
            }) + &means[class];
            let flat = z.dot(&embedding);
            let mut view = images.index_axis_mut(Axis(0), s);
            for (i, v) in flat.iter().enumerate() {
                let ch = i % syn.in_channels;
                let col = (i / syn.in_channels) % syn.image_size;
                let row = i / (syn.in_channels * syn.image_size);
                view[[row, col, ch]] = *v;
            }
        }
        LabeledSet {
            images,
            labels: vec![class; n],
            paths: None,
        }
    };

    let mut train_sets = Vec::with_capacity(total_classes);
    let mut test_sets = Vec::with_capacity(total_classes);
    for class in 0..total_classes {
        train_sets.push(render(class, syn.train_per_class, &mut sample_rng));
        test_sets.push(render(class, syn.test_per_class, &mut sample_rng));
    }

    let dataset = SourceDataset {
        train: concat_sets(train_sets),
        test: concat_sets(test_sets),
        num_classes: total_classes,
    };
    let spec = SplitSpec {
        num_tasks,
        classes_per_task,
        shuffle_seed: seed,
        source: DataSource::Synthetic(syn.clone()),
    };
    split_classes(dataset, &spec)
}

fn concat_sets(sets: Vec<LabeledSet>) -> LabeledSet {
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let shape = sets[0].images.dim();
    let mut images = ImageBatch::zeros((total, shape.1, shape.2, shape.3));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for s in &sets {
        for i in 0..s.len() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&s.images.index_axis(Axis(0), i));
            row += 1;
        }
        labels.extend_from_slice(&s.labels);
    }
    LabeledSet {
        images,
        labels,
        paths: None,
    }
}

/// Load an image-folder dataset: `root/{train,test}/<class_name>/*.{png,jpg}`.
/// Class names are sorted; their position is the global class id. Pixels are
/// resized to `image_size` and normalized to `[-1, 1]`.
pub fn load_image_folder(
    root: &Path,
    image_size: usize,
    in_channels: usize,
) -> Result<SourceDataset> {
    if !(in_channels == 1 || in_channels == 3) {
        return Err(Error::Config(format!(
            "image-folder supports 1 or 3 channels, got {in_channels}"
        )));
    }
    let class_names = {
        let train_dir = root.join("train");
        let mut names: Vec<String> = std::fs::read_dir(&train_dir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", train_dir.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    };
    if class_names.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}/train",
            root.display()
        )));
    }

    let load_split = |split: &str| -> Result<LabeledSet> {
        let mut entries: Vec<(String, usize)> = Vec::new();
        for (class_id, name) in class_names.iter().enumerate() {
            let dir = root.join(split).join(name);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|s| s.to_str()),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .map(|p| p.to_string_lossy().into_owned())
                .collect();
            files.sort();
            entries.extend(files.into_iter().map(|f| (f, class_id)));
        }
        let mut images =
            ImageBatch::zeros((entries.len(), image_size, image_size, in_channels));
        let mut labels = Vec::with_capacity(entries.len());
        let mut paths = Vec::with_capacity(entries.len());
        for (row, (path, class_id)) in entries.iter().enumerate() {
            let img = image::open(path)
                .map_err(|e| Error::Data(format!("cannot open {path}: {e}")))?
                .resize_exact(
                    image_size as u32,
                    image_size as u32,
                    image::imageops::FilterType::Triangle,
                );
            let mut view = images.index_axis_mut(Axis(0), row);
            match in_channels {
                1 => {
                    let gray = img.to_luma8();
                    for (x, y, p) in gray.enumerate_pixels() {
                        view[[y as usize, x as usize, 0]] = p.0[0] as f64 / 127.5 - 1.0;
                    }
                }
                _ => {
                    let rgb = img.to_rgb8();
                    for (x, y, p) in rgb.enumerate_pixels() {
                        for ch in 0..3 {
                            view[[y as usize, x as usize, ch]] = p.0[ch] as f64 / 127.5 - 1.0;
                        }
                    }
                }
            }
            labels.push(*class_id);
            paths.push(path.clone());
        }
        Ok(LabeledSet {
            images,
            labels,
            paths: Some(paths),
        })
    };

    Ok(SourceDataset {
        train: load_split("train")?,
        test: load_split("test")?,
        num_classes: class_names.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_dataset(num_classes: usize, per_class: usize) -> SourceDataset {
        let n = num_classes * per_class;
        let mut train_images = ImageBatch::zeros((n, 4, 4, 1));
        let mut labels = Vec::new();
        for c in 0..num_classes {
            for s in 0..per_class {
                let row = c * per_class + s;
                train_images[[row, 0, 0, 0]] = c as f64;
                labels.push(c);
            }
        }
        let test = LabeledSet {
            images: train_images.clone(),
            labels: labels.clone(),
            paths: None,
        };
        SourceDataset {
            train: LabeledSet {
                images: train_images,
                labels,
                paths: None,
            },
            test,
            num_classes,
        }
    }

    fn spec(num_tasks: usize, classes_per_task: usize, seed: u64) -> SplitSpec {
        SplitSpec {
            num_tasks,
            classes_per_task,
            shuffle_seed: seed,
            source: DataSource::Synthetic(SyntheticSpec::default()),
        }
    }

    #[test]
    fn split_partitions_all_classes_disjointly() {
        let stream = split_classes(dummy_dataset(10, 3), &spec(5, 2, 7)).unwrap();
        assert_eq!(stream.num_tasks(), 5);
        let mut seen = BTreeSet::new();
        for t in stream.tasks() {
            assert_eq!(t.class_ids.len(), 2);
            for &c in &t.class_ids {
                assert!(seen.insert(c));
            }
            // Every train/test sample belongs to this task's classes.
            for l in &t.test.labels {
                assert!(t.class_ids.contains(l));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let a = split_classes(dummy_dataset(10, 2), &spec(5, 2, 42)).unwrap();
        let b = split_classes(dummy_dataset(10, 2), &spec(5, 2, 42)).unwrap();
        for (ta, tb) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(ta.class_ids, tb.class_ids);
            assert_eq!(ta.test.labels, tb.test.labels);
        }
        let c = split_classes(dummy_dataset(10, 2), &spec(5, 2, 43)).unwrap();
        let differs = a
            .tasks()
            .iter()
            .zip(c.tasks())
            .any(|(x, y)| x.class_ids != y.class_ids);
        assert!(differs, "different seeds should permute classes differently");
    }

    #[test]
    fn paper_scale_split_shape() {
        // 200 classes into 10 tasks of 20.
        let stream = split_classes(dummy_dataset(200, 1), &spec(10, 20, 0)).unwrap();
        assert_eq!(stream.num_tasks(), 10);
        for t in stream.tasks() {
            assert_eq!(t.class_ids.len(), 20);
        }
    }

    #[test]
    fn insufficient_classes_rejected() {
        assert!(matches!(
            split_classes(dummy_dataset(9, 1), &spec(5, 2, 0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn take_train_enforces_order_and_single_use() {
        let mut stream = split_classes(dummy_dataset(4, 2), &spec(2, 2, 1)).unwrap();
        // Out of order.
        assert!(matches!(stream.take_train(1), Err(Error::Protocol(_))));
        let t0 = stream.take_train(0).unwrap();
        assert!(!t0.is_empty());
        assert!(!stream.task(0).train_available());
        // Re-take is a protocol error.
        assert!(matches!(stream.take_train(0), Err(Error::Protocol(_))));
        stream.take_train(1).unwrap();
        assert!(matches!(stream.take_train(2), Err(Error::Protocol(_))));
    }

    #[test]
    fn synthetic_stream_is_deterministic_and_disjoint() {
        let syn = SyntheticSpec {
            train_per_class: 5,
            test_per_class: 3,
            ..SyntheticSpec::default()
        };
        let a = synthetic_gaussian_tasks(3, 2, &syn, 9).unwrap();
        let b = synthetic_gaussian_tasks(3, 2, &syn, 9).unwrap();
        for (ta, tb) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(ta.class_ids, tb.class_ids);
            assert_eq!(ta.test.images, tb.test.images);
        }
        // Train and test draws differ within each task.
        for t in a.tasks() {
            assert_eq!(t.test.labels.len(), 2 * 3);
            assert!(t.train_available());
        }
    }

    #[test]
    fn zero_separation_is_chance_level_for_a_probe() {
        // With separation 0 every class is N(0, I): a centroid classifier
        // cannot beat chance by a wide margin.
        let syn = SyntheticSpec {
            separation: 0.0,
            train_per_class: 150,
            test_per_class: 100,
            ..SyntheticSpec::default()
        };
        let acc = centroid_probe_accuracy(&syn, 2, 11);
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn high_separation_is_near_perfect_for_a_probe() {
        let syn = SyntheticSpec {
            separation: 10.0,
            train_per_class: 150,
            test_per_class: 100,
            ..SyntheticSpec::default()
        };
        let acc = centroid_probe_accuracy(&syn, 2, 12);
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    /// Nearest-centroid probe on raw pixels over a 1-task stream.
    fn centroid_probe_accuracy(syn: &SyntheticSpec, classes: usize, seed: u64) -> f64 {
        let mut stream = synthetic_gaussian_tasks(1, classes, syn, seed).unwrap();
        let train = stream.take_train(0).unwrap();
        let test = &stream.task(0).test;
        let class_ids = stream.task(0).class_ids.clone();

        let pixels = syn.image_size * syn.image_size * syn.in_channels;
        let flat = |set: &LabeledSet, i: usize| -> Vec<f64> {
            set.images
                .index_axis(Axis(0), i)
                .iter()
                .copied()
                .collect()
        };
        let mut centroids: Vec<Vec<f64>> = vec![vec![0.0; pixels]; classes];
        let mut counts = vec![0usize; classes];
        for i in 0..train.len() {
            let c = class_ids.iter().position(|&x| x == train.labels[i]).unwrap();
            counts[c] += 1;
            for (acc, v) in centroids[c].iter_mut().zip(flat(&train, i)) {
                *acc += v;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            for v in centroids[c].iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let x = flat(test, i);
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = centroid
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            if class_ids[best.0] == test.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn manifest_contains_only_sourced_paths() {
        let stream = split_classes(dummy_dataset(4, 1), &spec(2, 2, 3)).unwrap();
        let mut buf = Vec::new();
        stream.write_manifest(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("path,label,task_id"));
        assert_eq!(text.lines().count(), 1); // dummy data has no paths
    }
}
