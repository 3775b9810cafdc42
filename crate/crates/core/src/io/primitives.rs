//! Behaviour-primitive datasets: one `x,y` CSV per primitive.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::SoftmaxEncoder;
use crate::error::{CoreError, Result};
use crate::train::{TrainingSequence, TrainingSet};

/// Category names in classifier order.
pub const CATEGORIES: [&str; 7] = ["Eye", "Head", "Beak", "Neck", "Rwing", "Belly", "Lwing"];

pub const SAMPLING_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub label: String,
    /// Normalized workspace positions.
    pub rows: Vec<[f64; 2]>,
    pub sampling_ms: u64,
}

impl Primitive {
    /// Distance between the last and first rows.
    pub fn closure_gap(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSet {
    pub primitives: Vec<Primitive>,
}

impl PrimitiveSet {
    pub fn labels(&self) -> Vec<&str> {
        self.primitives.iter().map(|p| p.label.as_str()).collect()
    }

    pub fn get(&self, label: &str) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.label.eq_ignore_ascii_case(label))
    }

    /// Each primitive traversed `cycles` times in a row.
    pub fn tiled(&self, cycles: usize) -> PrimitiveSet {
        PrimitiveSet {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    rows: p.rows.repeat(cycles.max(1)),
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.primitives.iter().position(|p| p.label.eq_ignore_ascii_case(label))
    }
}

fn category_rank(label: &str) -> usize {
    CATEGORIES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(label))
        .unwrap_or(CATEGORIES.len())
}

/// Reads every `*.csv` in `dir`. Known category names come first in
/// classifier order, anything else follows alphabetically.
pub fn load_primitives(dir: &Path) -> Result<PrimitiveSet> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    if files.is_empty() {
        return Err(CoreError::Dataset(format!(
            "no primitive CSV files in {}",
            dir.display()
        )));
    }
    files.sort();
    let mut seen = HashSet::new();
    let mut primitives = Vec::with_capacity(files.len());
    for path in files {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CoreError::Dataset(format!("bad file name {}", path.display())))?
            .to_string();
        if !seen.insert(label.to_ascii_lowercase()) {
            return Err(CoreError::Dataset(format!("duplicate primitive label {label}")));
        }
        primitives.push(read_primitive(&path, label)?);
    }
    primitives.sort_by(|a, b| {
        category_rank(&a.label)
            .cmp(&category_rank(&b.label))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(PrimitiveSet { primitives })
}

fn read_primitive(path: &Path, label: String) -> Result<Primitive> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(CoreError::Data {
            path: path.to_path_buf(),
            row: 1,
            message: format!("header must be `x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Row numbers count the header as row 1.
        let row = i + 2;
        let err = |message: String| CoreError::Data {
            path: path.to_path_buf(),
            row,
            message,
        };
        if record.len() != 2 {
            return Err(err(format!("expected 2 columns, found {}", record.len())));
        }
        let mut xy = [0.0; 2];
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(format!("`{cell}` is not a number")))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(err(format!("value {v} outside the workspace [-1, 1]")));
            }
            xy[j] = v;
        }
        rows.push(xy);
    }
    if rows.is_empty() {
        return Err(CoreError::Data {
            path: path.to_path_buf(),
            row: 2,
            message: "no data rows".into(),
        });
    }
    Ok(Primitive {
        label,
        rows,
        sampling_ms: SAMPLING_MS,
    })
}

pub fn save_primitives(set: &PrimitiveSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for p in &set.primitives {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", p.label)))?;
        w.write_record(["x", "y"])?;
        for [x, y] in &p.rows {
            w.write_record([format!("{x}"), format!("{y}")])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Softmax-encodes every primitive.
pub fn encode_primitives(set: &PrimitiveSet, encoder: &SoftmaxEncoder) -> Result<TrainingSet> {
    let sequences = set
        .primitives
        .iter()
        .map(|p| {
            let frames = p
                .rows
                .iter()
                .map(|xy| encoder.encode(xy))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingSequence {
                label: p.label.clone(),
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::demo::macaw_primitives;

    #[test]
    fn demo_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let set = macaw_primitives();
        save_primitives(&set, dir.path()).unwrap();
        let loaded = load_primitives(dir.path()).unwrap();
        assert_eq!(loaded, set);
        assert_eq!(loaded.labels(), CATEGORIES.to_vec());
    }

    #[test]
    fn out_of_range_names_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Beak.csv"), "x,y\n0.1,0.2\n1.5,0.0\n").unwrap();
        let err = load_primitives(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Beak.csv") && msg.contains("row 3"), "{msg}");
    }

    #[test]
    fn wrong_column_count() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Neck.csv"), "x,y\n0.1,0.2,0.3\n").unwrap();
        assert!(matches!(
            load_primitives(dir.path()),
            Err(CoreError::Data { row: 2, .. })
        ));
        std::fs::write(dir.path().join("Neck.csv"), "x,y,z\n0.1,0.2,0.3\n").unwrap();
        assert!(load_primitives(dir.path()).is_err());
    }

    #[test]
    fn duplicate_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Eye.csv"), "x,y\n0,0\n").unwrap();
        std::fs::write(dir.path().join("eye.CSV"), "x,y\n0,0\n").unwrap();
        assert!(matches!(load_primitives(dir.path()), Err(CoreError::Dataset(_))));
    }

    #[test]
    fn empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_primitives(dir.path()).unwrap_err();
        assert!(matches!(err, CoreError::Dataset(_)));
    }

    #[test]
    fn encoding_roundtrips_positions() {
        let set = macaw_primitives();
        let enc = SoftmaxEncoder::new(10, 0.1, 2).unwrap();
        let training = encode_primitives(&set, &enc).unwrap();
        assert_eq!(training.sequences.len(), 7);
        for (seq, prim) in training.sequences.iter().zip(&set.primitives) {
            for (frame, xy) in seq.frames.iter().zip(&prim.rows) {
                let back = enc.decode(frame);
                assert!((back[0] - xy[0]).abs() < 0.01 && (back[1] - xy[1]).abs() < 0.01);
            }
        }
    }
}
