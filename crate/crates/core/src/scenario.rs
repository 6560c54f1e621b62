//! Class-incremental task streams.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{self, Stream};

/// Fraction of each class's training samples held out for model selection.
pub const DEV_FRACTION: f64 = 0.1;

/// Flat feature vectors with original class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || samples.len() != labels.len() * feature_dim {
            return Err(contract(format!(
                "{} values cannot hold {} samples of dimension {feature_dim}",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(contract(format!("label {bad} with {class_count} classes")));
        }
        let mut seen = vec![false; class_count];
        labels.iter().for_each(|&y| seen[y] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(contract(format!("class {missing} has no samples")));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }
}

/// Training and held-out test data over the same classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.class_count != test.class_count || train.feature_dim != test.feature_dim {
            return Err(contract(
                "train and test splits disagree on classes or feature size",
            ));
        }
        Ok(Self { train, test })
    }
}

/// Parameters of a synthetic Gaussian-cluster dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian clusters whose means lie on the unit sphere, with isotropic
/// standard deviation `spread`. Produces `per_class` training and
/// `per_class / 5` test samples per class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    let SyntheticSpec {
        classes,
        per_class,
        feature_dim,
        spread,
        seed,
    } = *spec;
    if classes < 4 || per_class < 20 || feature_dim < 2 || !(spread > 0.0 && spread.is_finite()) {
        return Err(contract(format!(
            "synthetic data needs >= 4 classes, >= 20 samples per class, dimension >= 2 and positive spread; got {spec:?}"
        )));
    }
    let mut r = rng::stream(seed, Stream::Synthetic);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..feature_dim).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(classes * n * feature_dim);
        let mut labels = Vec::with_capacity(classes * n);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n {
                samples.extend(
                    mean.iter()
                        .map(|m| m + spread * r.sample::<f64, _>(StandardNormal)),
                );
                labels.push(c);
            }
        }
        Dataset::new(samples, labels, classes, feature_dim)
    };
    let train = draw(per_class)?;
    let test = draw(per_class / 5)?;
    SplitDataset::new(train, test)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES:#010x}"
        )));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let dim = rows * cols;
    let body = &images[16..];
    if body.len() != count * dim {
        return Err(Error::Format(format!(
            "image file holds {} pixel bytes, header promises {count} x {rows} x {cols}",
            body.len()
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS:#010x}"
        )));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != label_count {
        return Err(Error::Format(format!(
            "label file holds {} bytes, header promises {label_count}",
            lbody.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let ys: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    let class_count = ys.iter().max().map_or(0, |m| m + 1);
    let samples = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(samples, ys, class_count, dim).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_all(images_path.as_ref())?;
    let labels = read_all(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// 1-based.
    pub index: usize,
    /// Original class ids in remapping order.
    pub original_classes: Vec<usize>,
    pub remapped_start: usize,
    pub remapped_end: usize,
    /// Indices into the training set, excluding the dev hold-out.
    pub train: Vec<usize>,
    /// Indices into the training set.
    pub dev: Vec<usize>,
    /// Indices into the test set.
    pub test: Vec<usize>,
}

impl Task {
    pub fn class_range(&self) -> Range<usize> {
        self.remapped_start..self.remapped_end
    }

    pub fn class_count(&self) -> usize {
        self.remapped_end - self.remapped_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A batch of features with remapped labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: &Batch) {
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    data: SplitDataset,
    tasks: Vec<Task>,
    seed: u64,
    /// Original class id -> global remapped label.
    remap: Vec<usize>,
}

/// Shuffles classes with `seed`, splits them into `task_count` equal groups
/// in shuffled order and relabels them sequentially from zero.
pub fn build_scenario(data: &SplitDataset, task_count: usize, seed: u64) -> Result<Scenario> {
    let classes = data.train.class_count;
    if task_count == 0 || !classes.is_multiple_of(task_count) {
        return Err(contract(format!(
            "{classes} classes cannot be split into {task_count} equal tasks"
        )));
    }
    let per_task = classes / task_count;
    if per_task < 2 {
        return Err(contract(format!(
            "tasks need at least 2 classes, got {per_task}"
        )));
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng::stream(seed, Stream::ClassOrder));
    let mut remap = vec![0; classes];
    for (new, &orig) in order.iter().enumerate() {
        remap[orig] = new;
    }

    let mut dev_rng = rng::stream(seed, Stream::DevSplit);
    let train_by = data.train.indices_by_class();
    let test_by = data.test.indices_by_class();
    let mut tasks = Vec::with_capacity(task_count);
    for (k, group) in order.chunks(per_task).enumerate() {
        let mut train = Vec::new();
        let mut dev = Vec::new();
        let mut test = Vec::new();
        for &c in group {
            let mut idx = train_by[c].clone();
            idx.shuffle(&mut dev_rng);
            let n_dev = (idx.len() as f64 * DEV_FRACTION).round() as usize;
            let n_dev = n_dev.min(idx.len().saturating_sub(1));
            let (d, t) = idx.split_at(n_dev);
            let mut d = d.to_vec();
            let mut t = t.to_vec();
            d.sort_unstable();
            t.sort_unstable();
            dev.extend(d);
            train.extend(t);
            test.extend_from_slice(&test_by[c]);
        }
        train.sort_unstable();
        dev.sort_unstable();
        test.sort_unstable();
        tasks.push(Task {
            index: k + 1,
            original_classes: group.to_vec(),
            remapped_start: k * per_task,
            remapped_end: (k + 1) * per_task,
            train,
            dev,
            test,
        });
    }
    Ok(Scenario {
        data: data.clone(),
        tasks,
        seed,
        remap,
    })
}

impl Scenario {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, index: usize) -> &Task {
        &self.tasks[index - 1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_classes(&self) -> usize {
        self.data.train.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.data.train.feature_dim
    }

    pub fn remapped_label(&self, original: usize) -> usize {
        self.remap[original]
    }

    /// Class ids in remapped order, i.e. the grouping produced by the seed.
    pub fn class_order(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.original_classes.iter().copied())
            .collect()
    }

    fn dataset(&self, split: Split) -> &Dataset {
        match split {
            Split::Train | Split::Dev => &self.data.train,
            Split::Test => &self.data.test,
        }
    }

    pub fn indices(&self, task: usize, split: Split) -> &[usize] {
        let t = self.task(task);
        match split {
            Split::Train => &t.train,
            Split::Dev => &t.dev,
            Split::Test => &t.test,
        }
    }

    pub fn gather(&self, split: Split, indices: &[usize]) -> Batch {
        let ds = self.dataset(split);
        let mut b = Batch {
            features: Vec::with_capacity(indices.len() * ds.feature_dim),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            b.features.extend_from_slice(ds.sample(i));
            b.labels.push(self.remap[ds.labels[i]]);
        }
        b
    }

    pub fn split_batch(&self, task: usize, split: Split) -> Batch {
        self.gather(split, self.indices(task, split))
    }

    /// Compact description recorded alongside each run.
    pub fn descriptor(&self) -> ScenarioDescriptor {
        ScenarioDescriptor {
            seed: self.seed,
            task_count: self.tasks.len(),
            total_classes: self.total_classes(),
            feature_dim: self.feature_dim(),
            class_order: self.class_order(),
            train_sizes: self.tasks.iter().map(|t| t.train.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescriptor {
    pub seed: u64,
    pub task_count: usize,
    pub total_classes: usize,
    pub feature_dim: usize,
    pub class_order: Vec<usize>,
    pub train_sizes: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SplitDataset {
        generate_synthetic(&SyntheticSpec {
            classes: 10,
            per_class: 40,
            feature_dim: 4,
            spread: 0.2,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn synthetic_counts() {
        let d = toy();
        for c in 0..10 {
            assert_eq!(d.train.labels().iter().filter(|&&y| y == c).count(), 40);
            assert_eq!(d.test.labels().iter().filter(|&&y| y == c).count(), 8);
        }
        assert!(generate_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 40,
            feature_dim: 4,
            spread: 0.2,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn five_tasks_of_two() {
        let s = build_scenario(&toy(), 5, 0).unwrap();
        let ranges: Vec<_> = s.tasks().iter().map(|t| t.class_range()).collect();
        assert_eq!(ranges, vec![0..2, 2..4, 4..6, 6..8, 8..10]);
        let mut all = s.class_order();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in s.tasks() {
            let b = s.split_batch(t.index, Split::Train);
            assert!(b.labels.iter().all(|y| t.class_range().contains(y)));
        }
    }

    #[test]
    fn rejects_indivisible_class_count() {
        assert!(build_scenario(&toy(), 3, 0).is_err());
        assert!(build_scenario(&toy(), 10, 0).is_err());
    }

    #[test]
    fn dev_split_is_stratified() {
        let s = build_scenario(&toy(), 5, 2).unwrap();
        for t in s.tasks() {
            for &c in &t.original_classes {
                let n_dev = t
                    .dev
                    .iter()
                    .filter(|&&i| s.data.train.labels[i] == c)
                    .count();
                assert!((n_dev as f64 - 4.0).abs() <= 1.0);
            }
            assert!(t.dev.iter().all(|i| !t.train.contains(i)));
        }
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend(0x0803u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend(1u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend([0u8, 255, 51, 102]);
        let mut lab = Vec::new();
        lab.extend(0x0801u32.to_be_bytes());
        lab.extend(2u32.to_be_bytes());
        lab.extend([1u8, 0]);
        (img, lab)
    }

    #[test]
    fn idx_fixture_parses() {
        let (img, lab) = idx_fixture();
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.feature_dim(), 2);
        assert_eq!(d.sample(0), &[0.0, 1.0]);
        assert_eq!(d.sample(1), &[51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(d.labels(), &[1, 0]);
    }

    #[test]
    fn idx_errors() {
        let (mut img, lab) = idx_fixture();
        let good = img.clone();
        img[3] = 0x04;
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
        assert!(matches!(
            parse_idx(&good[..18], &lab),
            Err(Error::Format(_))
        ));
        let mut short = lab.clone();
        short[7] = 3;
        assert!(matches!(parse_idx(&good, &short), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&good[..6], &lab), Err(Error::Format(_))));
    }
}
