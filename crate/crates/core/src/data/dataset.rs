use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{load_image, save_image, Image};
use super::synth::SynthConfig;
use crate::error::{Error, Result};

/// Ordered, unique class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", names.len())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate class name `{dup}`")));
        }
        Ok(LabelSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: usize) -> &str {
        &self.names[label]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// Path relative to the dataset root, `<class>/<file>`.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic(SynthConfig),
    Directory(PathBuf),
    Split { seed: u64, train: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Sample>,
    labels: LabelSet,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(items: Vec<Sample>, labels: LabelSet, provenance: Provenance) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(bad) = items.iter().find(|s| s.label >= labels.len()) {
            return Err(Error::invalid(format!(
                "sample `{}` has label {} but only {} classes exist",
                bad.path,
                bad.label,
                labels.len()
            )));
        }
        Ok(Dataset {
            items,
            labels,
            provenance,
        })
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.items {
            counts[s.label] += 1;
        }
        counts
    }

    /// Returns a copy with every image passed through `f`.
    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Dataset> {
        let items = self
            .items
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: f(&s.image)?,
                    label: s.label,
                    path: s.path.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Dataset::new(items, self.labels.clone(), self.provenance.clone())
    }

    fn subset(&self, indices: &[usize], provenance: Provenance) -> Result<Dataset> {
        Dataset::new(
            indices.iter().map(|&i| self.items[i].clone()).collect(),
            self.labels.clone(),
            provenance,
        )
    }
}

/// Stratified random split: each class contributes
/// `round(fraction * n_class)` samples (at least one to each side) to the
/// training set.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.labels.len()];
    for (i, s) in dataset.items.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "class `{}` has {} samples; a split needs at least 2",
                dataset.labels.name(label),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        dataset.subset(&train, Provenance::Split { seed, train: true })?,
        dataset.subset(&test, Provenance::Split { seed, train: false })?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

pub const SPLITS_FILE: &str = "splits.txt";

/// Reads `<root>/splits.txt` (`<relative-path> train|test` per line), if present.
pub fn read_split_file(root: impl AsRef<Path>) -> Result<Option<HashMap<String, SplitSide>>> {
    let path = root.as_ref().join(SPLITS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = HashMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let (file, side) = trimmed.rsplit_once(char::is_whitespace).ok_or_else(|| Error::Parse {
                offset,
                reason: format!("expected `<path> train|test`, got `{trimmed}`"),
            })?;
            let side = match side {
                "train" => SplitSide::Train,
                "test" => SplitSide::Test,
                other => {
                    return Err(Error::Parse {
                        offset,
                        reason: format!("unknown split `{other}`"),
                    })
                }
            };
            map.insert(file.trim().to_string(), side);
        }
        offset += line.len();
    }
    Ok(Some(map))
}

pub fn split_by_assignment(dataset: &Dataset, assignment: &HashMap<String, SplitSide>) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in dataset.items.iter().enumerate() {
        match assignment.get(&s.path) {
            Some(SplitSide::Train) => train.push(i),
            Some(SplitSide::Test) => test.push(i),
            None => return Err(Error::invalid(format!("`{}` missing from {SPLITS_FILE}", s.path))),
        }
    }
    Ok((
        dataset.subset(&train, Provenance::Split { seed: 0, train: true })?,
        dataset.subset(&test, Provenance::Split { seed: 0, train: false })?,
    ))
}

/// Loads `root/<class>/*.{ppm,pgm}`; classes are ordered by directory name
/// and gray images are expanded to RGB.
pub fn load_dataset_dir(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut classes: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for f in fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
            let f = f.map_err(|e| Error::io(&path, e))?.path();
            if matches!(f.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")) {
                files.push(f);
            }
        }
        files.sort();
        classes.insert(name, files);
    }
    let labels = LabelSet::new(classes.keys().cloned().collect())?;
    let mut items = Vec::new();
    for (label, (name, files)) in classes.into_iter().enumerate() {
        for f in files {
            let file_name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            items.push(Sample {
                image: load_image(&f)?.to_rgb(),
                label,
                path: format!("{name}/{file_name}"),
            });
        }
    }
    Dataset::new(items, labels, Provenance::Directory(root.to_path_buf()))
}

/// Writes every sample to `root/<path>` (creating class directories).
pub fn save_dataset_dir(dataset: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for name in dataset.labels.names() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &dataset.items {
        save_image(&s.image, root.join(&s.path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: usize, classes: usize) -> Dataset {
        let labels = LabelSet::new((0..classes).map(|c| format!("c{c}")).collect()).unwrap();
        let items = (0..classes * per_class)
            .map(|i| Sample {
                image: Image::filled(2, 2, 3, ((i % 6) * 51) as f64 / 255.0),
                label: i / per_class,
                path: format!("c{}/{i:04}.ppm", i / per_class),
            })
            .collect();
        Dataset::new(items, labels, Provenance::Directory("toy".into())).unwrap()
    }

    #[test]
    fn label_set_rules() {
        assert!(LabelSet::new(vec!["a".into()]).is_err());
        assert!(LabelSet::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(LabelSet::new(vec!["a".into(), "b".into()]).unwrap().len(), 2);
    }

    #[test]
    fn half_split_is_stratified_and_disjoint() {
        let ds = toy(10, 3);
        let (train, test) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(train.class_counts(), vec![5, 5, 5]);
        assert_eq!(test.class_counts(), vec![5, 5, 5]);
        let train_paths: std::collections::HashSet<_> = train.items().iter().map(|s| &s.path).collect();
        assert!(test.items().iter().all(|s| !train_paths.contains(&s.path)));
        let (again, _) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(again, train);
        let (other, _) = split_dataset(&ds, 0.5, 8).unwrap();
        assert_ne!(other.items(), train.items());
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_fractions() {
        assert!(split_dataset(&toy(1, 2), 0.5, 0).is_err());
        assert!(split_dataset(&toy(4, 2), 1.0, 0).is_err());
        assert!(split_dataset(&toy(4, 2), 0.0, 0).is_err());
    }

    #[test]
    fn directory_round_trip_with_split_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(3, 2);
        save_dataset_dir(&ds, dir.path()).unwrap();
        fs::write(
            dir.path().join(SPLITS_FILE),
            "c0/0000.ppm train\nc0/0001.ppm test\nc0/0002.ppm train\nc1/0003.ppm train\nc1/0004.ppm test\nc1/0005.ppm test\n",
        )
        .unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.items(), ds.items());
        let assignment = read_split_file(dir.path()).unwrap().unwrap();
        let (train, test) = split_by_assignment(&loaded, &assignment).unwrap();
        assert_eq!((train.len(), test.len()), (3, 3));
    }

    #[test]
    fn bad_split_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(SPLITS_FILE), "a.ppm train\nb.ppm validate\n").unwrap();
        let err = read_split_file(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 12, .. }), "{err}");
    }
}
