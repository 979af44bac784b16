//! Indexing of datasets laid out as
//! `<root>/<class>/train/good/*.png`, `<root>/<class>/test/good/*.png` and
//! `<root>/<class>/test/<defect>/*.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    /// Contributes non-defective images to network training.
    Known,
    /// Seen only at evaluation time.
    Novel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub role: ClassRole,
    /// Non-defective images used for network training (empty for novel classes).
    pub train_good: Vec<PathBuf>,
    /// Non-defective images the class prototype is built from.
    pub prototype_good: Vec<PathBuf>,
    pub test_good: Vec<PathBuf>,
    pub test_defective: BTreeMap<String, Vec<PathBuf>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexOptions {
    /// Explicit known classes; `None` draws a random partition from `seed`.
    pub known_classes: Option<Vec<String>>,
    pub seed: u64,
}

/// Known-class count of the default partition: 11 of every 15 classes,
/// rounded up, so small datasets train on everything.
pub fn default_known_count(n_classes: usize) -> usize {
    (n_classes * 11).div_ceil(15)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Layout(path))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn index_dataset(root: &Path, opts: &IndexOptions) -> Result<DatasetIndex> {
    let root = require_dir(root.to_path_buf())?;
    let class_dirs = subdirs(&root)?;
    if class_dirs.is_empty() {
        return Err(Error::config(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let names: Vec<String> = class_dirs.iter().map(|d| file_name(d)).collect();

    let known: Vec<String> = match &opts.known_classes {
        Some(list) => {
            if let Some(missing) = list.iter().find(|k| !names.contains(k)) {
                return Err(Error::config(format!(
                    "known class {missing:?} not found in dataset"
                )));
            }
            list.clone()
        }
        None => {
            let mut shuffled = names.clone();
            shuffled.shuffle(&mut RngStream::new(opts.seed).substream("class-partition"));
            shuffled.truncate(default_known_count(names.len()));
            shuffled
        }
    };

    let stream = RngStream::new(opts.seed);
    let mut classes = Vec::with_capacity(names.len());
    for (dir, name) in class_dirs.iter().zip(&names) {
        let train_good = png_files(&require_dir(dir.join("train").join("good"))?)?;
        let test_dir = require_dir(dir.join("test"))?;
        let test_good = png_files(&require_dir(test_dir.join("good"))?)?;
        let mut test_defective = BTreeMap::new();
        for d in subdirs(&test_dir)? {
            let defect = file_name(&d);
            if defect == "good" {
                continue;
            }
            let files = png_files(&d)?;
            if !files.is_empty() {
                test_defective.insert(defect, files);
            }
        }

        let role = if known.contains(name) {
            ClassRole::Known
        } else {
            ClassRole::Novel
        };
        let (train, proto) = match role {
            ClassRole::Known => split_half(train_good, &stream, name),
            ClassRole::Novel => (Vec::new(), train_good),
        };
        classes.push(ClassEntry {
            name: name.clone(),
            role,
            train_good: train,
            prototype_good: proto,
            test_good,
            test_defective,
        });
    }
    Ok(DatasetIndex { root, classes })
}

/// Seeded shuffle, then the first `ceil(n/2)` go to training and the rest
/// are reserved. Both halves are returned sorted.
fn split_half(
    mut files: Vec<PathBuf>,
    stream: &RngStream,
    class: &str,
) -> (Vec<PathBuf>, Vec<PathBuf>) {
    files.shuffle(&mut stream.substream(&format!("split/{class}")));
    let reserved = files.split_off(files.len().div_ceil(2));
    let mut train = files;
    train.sort();
    let mut reserved = reserved;
    reserved.sort();
    (train, reserved)
}

impl DatasetIndex {
    pub fn class(&self, name: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn known(&self) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(|c| c.role == ClassRole::Known)
    }

    /// Every `(class name, defect type)` pair with at least one image.
    pub fn cells(&self) -> Vec<(String, String)> {
        self.classes
            .iter()
            .flat_map(|c| c.test_defective.keys().map(|d| (c.name.clone(), d.clone())))
            .collect()
    }

    pub fn training_image_count(&self) -> usize {
        self.known().map(|c| c.train_good.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"").unwrap();
    }

    fn layout(root: &Path, classes: usize, train: usize) {
        for c in 0..classes {
            let base = root.join(format!("class_{c:02}"));
            for i in 0..train {
                touch(&base.join(format!("train/good/{i:03}.png")));
            }
            touch(&base.join("test/good/000.png"));
            touch(&base.join("test/scratch/000.png"));
            if c % 2 == 0 {
                touch(&base.join("test/blob/000.png"));
            }
        }
    }

    #[test]
    fn eleven_of_fifteen_known_by_default() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 15, 6);
        let idx = index_dataset(
            dir.path(),
            &IndexOptions {
                known_classes: None,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(idx.known().count(), 11);
        for c in &idx.classes {
            match c.role {
                ClassRole::Known => {
                    assert_eq!(c.train_good.len(), 3);
                    assert_eq!(c.prototype_good.len(), 3);
                }
                ClassRole::Novel => {
                    assert!(c.train_good.is_empty());
                    assert_eq!(c.prototype_good.len(), 6);
                }
            }
        }
        assert_eq!(idx.cells().len(), 15 + 8);
        assert_eq!(default_known_count(2), 2);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 2, 9);
        let opts = IndexOptions {
            known_classes: Some(vec!["class_00".into()]),
            seed: 1,
        };
        let a = index_dataset(dir.path(), &opts).unwrap();
        assert_eq!(a, index_dataset(dir.path(), &opts).unwrap());
        let c = a.class("class_00").unwrap();
        assert_eq!(c.train_good.len(), 5);
        assert_eq!(c.prototype_good.len(), 4);
        let mut all: Vec<_> = c
            .train_good
            .iter()
            .chain(&c.prototype_good)
            .cloned()
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert_eq!(a.class("class_01").unwrap().role, ClassRole::Novel);
    }

    #[test]
    fn missing_layout_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("wood/train/good/0.png"));
        let err = index_dataset(dir.path(), &IndexOptions::default()).unwrap_err();
        match err {
            Error::Layout(p) => assert!(p.ends_with("wood/test")),
            other => panic!("unexpected {other:?}"),
        }
        let err = index_dataset(&dir.path().join("nope"), &IndexOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn unknown_known_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 2, 2);
        let opts = IndexOptions {
            known_classes: Some(vec!["zebra".into()]),
            seed: 0,
        };
        assert!(matches!(
            index_dataset(dir.path(), &opts),
            Err(Error::Config(_))
        ));
    }
}
