//! Manifest CSV: `path,label,split` with paths relative to the manifest.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{read_features, FeatureSequence, SequenceShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn shape(&self) -> Option<SequenceShape> {
        self.train.iter().chain(&self.test).next().map(FeatureSequence::shape)
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    label: String,
    split: String,
}

/// Parses the manifest and loads every referenced feature file.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<(Manifest, Dataset)> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            row: 1,
            message: format!("header must be path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut manifest = Manifest {
        records: Vec::new(),
        num_classes,
    };
    let mut dataset = Dataset::default();
    let mut reference: Option<(SequenceShape, PathBuf)> = None;

    for (n, row) in reader.deserialize::<Row>().enumerate() {
        let line = n + 2;
        let row = row?;
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            row: line,
            message,
        };
        let label: usize = row
            .label
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a class index", row.label)))?;
        if label >= num_classes {
            return Err(bad(format!("label {label} out of range for {num_classes} classes")));
        }
        let split = match row.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("split {other:?} is neither train nor test"))),
        };
        let file_path = base.join(&row.path);
        let seq = read_features(&file_path).map_err(|e| bad(e.to_string()))?;
        if seq.label != label {
            return Err(bad(format!(
                "file {} carries label {}, manifest says {label}",
                row.path, seq.label
            )));
        }
        let shape = seq.shape();
        match &reference {
            Some((expected, first)) if *expected != shape => {
                return Err(bad(format!(
                    "{} has shape {shape}, but {} has shape {expected}",
                    row.path,
                    first.display()
                )));
            }
            Some(_) => {}
            None => reference = Some((shape, PathBuf::from(&row.path))),
        }
        match split {
            Split::Train => dataset.train.push(seq),
            Split::Test => dataset.test.push(seq),
        }
        manifest.records.push(ManifestRecord {
            path: row.path.into(),
            label,
            split,
        });
    }

    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            row: 0,
            message: format!(
                "need at least one train and one test record, found {} and {}",
                dataset.train.len(),
                dataset.test.len()
            ),
        });
    }
    Ok((manifest, dataset))
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["path", "label", "split"])?;
    for r in records {
        writer.write_record([
            r.path.to_string_lossy().as_ref(),
            &r.label.to_string(),
            r.split.as_str(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, write_features};

    fn write_seq(dir: &Path, name: &str, class: usize, shape: SequenceShape) {
        let seq = generate_sequence(class, 5, shape).unwrap();
        write_features(&dir.join(name), &seq).unwrap();
    }

    #[test]
    fn counts_splits() {
        let dir = tempfile::tempdir().unwrap();
        let shape = SequenceShape::square(3, 3, 2);
        for (i, c) in [0, 1, 2, 0].into_iter().enumerate() {
            write_seq(dir.path(), &format!("s{i}.chamfeat"), c, shape);
        }
        std::fs::write(
            dir.path().join("m.csv"),
            "path,label,split\ns0.chamfeat,0,train\ns1.chamfeat,1,train\ns2.chamfeat,2,train\ns3.chamfeat,0,test\n",
        )
        .unwrap();
        let (m, d) = load_manifest(&dir.path().join("m.csv"), 3).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!((d.train.len(), d.test.len()), (3, 1));
        assert_eq!(d.shape(), Some(shape));
    }

    #[test]
    fn label_out_of_range_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let shape = SequenceShape::square(2, 3, 2);
        write_seq(dir.path(), "a.chamfeat", 0, shape);
        write_seq(dir.path(), "b.chamfeat", 2, shape);
        std::fs::write(
            dir.path().join("m.csv"),
            "path,label,split\na.chamfeat,0,train\nb.chamfeat,2,test\n",
        )
        .unwrap();
        let msg = load_manifest(&dir.path().join("m.csv"), 2).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("label 2 out of range"), "{msg}");
    }

    #[test]
    fn inconsistent_shapes_name_both() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), "a.chamfeat", 0, SequenceShape::square(2, 3, 2));
        write_seq(dir.path(), "b.chamfeat", 1, SequenceShape::square(2, 4, 2));
        std::fs::write(
            dir.path().join("m.csv"),
            "path,label,split\na.chamfeat,0,train\nb.chamfeat,1,test\n",
        )
        .unwrap();
        let msg = load_manifest(&dir.path().join("m.csv"), 2).unwrap_err().to_string();
        assert!(msg.contains("2x4x4x2") && msg.contains("2x3x3x2"), "{msg}");
    }

    #[test]
    fn missing_file_and_missing_split() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), "a.chamfeat", 0, SequenceShape::square(2, 3, 2));
        std::fs::write(
            dir.path().join("m.csv"),
            "path,label,split\na.chamfeat,0,train\nnope.chamfeat,0,test\n",
        )
        .unwrap();
        let msg = load_manifest(&dir.path().join("m.csv"), 2).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("nope.chamfeat"), "{msg}");

        std::fs::write(dir.path().join("m2.csv"), "path,label,split\na.chamfeat,0,train\n").unwrap();
        assert!(load_manifest(&dir.path().join("m2.csv"), 2).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let shape = SequenceShape::square(2, 3, 2);
        write_seq(dir.path(), "a.chamfeat", 0, shape);
        write_seq(dir.path(), "b.chamfeat", 1, shape);
        let records = vec![
            ManifestRecord { path: "a.chamfeat".into(), label: 0, split: Split::Train },
            ManifestRecord { path: "b.chamfeat".into(), label: 1, split: Split::Test },
        ];
        write_manifest(&dir.path().join("manifest.csv"), &records).unwrap();
        let (m, _) = load_manifest(&dir.path().join("manifest.csv"), 2).unwrap();
        assert_eq!(m.records, records);
    }
}
