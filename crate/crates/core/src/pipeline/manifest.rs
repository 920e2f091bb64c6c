//! Line-oriented JSON dataset manifest.
//!
//! The first line is a header object; every following non-empty line is one
//! [`AnnotationRecord`]. Errors carry the 1-based line number.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::BoundingBox;
use crate::error::{invalid, Error, Result};
use crate::heatmap::{JointSet, Keypoint};

pub const MANIFEST_FORMAT: &str = "handpose-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Relative to the manifest's directory.
    pub image_path: String,
    /// `[width, height]`.
    pub resolution: [usize; 2],
    pub hand_present: bool,
    /// K joints when the hand is present, empty otherwise.
    pub joints2d: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl AnnotationRecord {
    pub fn joints(&self) -> JointSet {
        JointSet::new(self.joints2d.clone())
    }

    fn validate(&self, joint_count: usize) -> std::result::Result<(), String> {
        let [w, h] = self.resolution;
        if w == 0 || h == 0 {
            return Err(format!("resolution {w}x{h} is empty"));
        }
        if self.hand_present && self.joints2d.len() != joint_count {
            return Err(format!("expected {joint_count} joints, found {}", self.joints2d.len()));
        }
        if !self.hand_present && !self.joints2d.is_empty() {
            return Err("hand-absent record carries joints".into());
        }
        if self.joints2d.iter().any(|p| !p.is_finite()) {
            return Err("non-finite joint".into());
        }
        if let Some(j3) = &self.joints3d {
            if j3.len() != self.joints2d.len() {
                return Err(format!("{} 3D joints for {} 2D joints", j3.len(), self.joints2d.len()));
            }
        }
        if let Some(b) = &self.bbox {
            if b.x_min > b.x_max || b.y_min > b.y_max {
                return Err("bbox has min > max".into());
            }
            if !b.fits(w, h) {
                return Err(format!("bbox {b:?} outside {w}x{h} image"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    joint_count: usize,
    topology: String,
    records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub joint_count: usize,
    pub topology: String,
    pub records: Vec<AnnotationRecord>,
}

impl DatasetManifest {
    pub fn new(joint_count: usize, topology: impl Into<String>) -> Self {
        Self { joint_count, topology: topology.into(), records: Vec::new() }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Tags every record by a seeded shuffle. Counts are rounded for train
    /// and validation; test takes the remainder.
    pub fn assign_splits(&mut self, fractions: [f64; 3], seed: u64) -> Result<()> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
        }
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in order.iter().enumerate() {
            self.records[i].split = Some(if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            joint_count: self.joint_count,
            topology: self.topology.clone(),
            records: self.records.len(),
        };
        let json = |e: serde_json::Error| Error::Format(e.to_string());
        let mut out = serde_json::to_string(&header).map_err(json)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(json)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let parse = |line: usize, message: String| Error::Parse { line, message };
        let (n, first) = lines.next().ok_or_else(|| parse(1, "empty manifest: missing header".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| parse(n, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(parse(n, format!("unknown format {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(parse(n, format!("unsupported manifest version {}", header.version)));
        }
        if header.joint_count == 0 {
            return Err(parse(n, "joint count must be >= 1".into()));
        }
        let mut records = Vec::with_capacity(header.records);
        for (n, line) in lines {
            let rec: AnnotationRecord =
                serde_json::from_str(line).map_err(|e| parse(n, format!("record {}: {e}", records.len())))?;
            rec.validate(header.joint_count).map_err(|m| parse(n, format!("record {}: {m}", records.len())))?;
            records.push(rec);
        }
        if records.len() != header.records {
            return Err(parse(
                text.lines().count(),
                format!("header announces {} records, found {}", header.records, records.len()),
            ));
        }
        Ok(Self { joint_count: header.joint_count, topology: header.topology, records })
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest.to_text()?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: usize) -> AnnotationRecord {
        AnnotationRecord {
            image_path: "images/000.ppm".into(),
            resolution: [64, 48],
            hand_present: true,
            joints2d: (0..k).map(|i| Keypoint::new(i as f64 + 0.1, 47.0 - i as f64 / 3.0)).collect(),
            joints3d: Some((0..k).map(|i| [i as f64, -0.5, 1e-17]).collect()),
            bbox: Some(BoundingBox::new(0, 1, 63, 47).unwrap()),
            split: Some(Split::Val),
        }
    }

    #[test]
    fn empty_roundtrip() {
        let m = DatasetManifest::new(21, "hand21");
        assert_eq!(DatasetManifest::from_text(&m.to_text().unwrap()).unwrap(), m);
    }

    #[test]
    fn full_roundtrip_is_value_exact() {
        let mut m = DatasetManifest::new(21, "hand21");
        m.records.push(record(21));
        let mut absent = record(0);
        absent.hand_present = false;
        absent.joints3d = None;
        absent.bbox = None;
        absent.split = None;
        m.records.push(absent);
        let back = DatasetManifest::from_text(&m.to_text().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.records[0].joints2d.len(), 21);
    }

    #[test]
    fn bad_records_report_their_line() {
        let mut m = DatasetManifest::new(21, "hand21");
        m.records.push(record(21));
        m.records.push(record(21));
        let good = m.to_text().unwrap();

        let mut bad = m.clone();
        bad.records[1].bbox = Some(BoundingBox::new(0, 0, 64, 10).unwrap());
        match DatasetManifest::from_text(&bad.to_text().unwrap()) {
            Err(Error::Parse { line: 3, message }) => assert!(message.contains("record 1"), "{message}"),
            other => panic!("{other:?}"),
        }

        let wrong_k = good.replacen("\"joint_count\":21", "\"joint_count\":20", 1);
        assert!(matches!(DatasetManifest::from_text(&wrong_k), Err(Error::Parse { line: 2, .. })));

        let garbled: String = good.lines().take(2).chain(["{not json"]).map(|l| format!("{l}\n")).collect();
        assert!(matches!(DatasetManifest::from_text(&garbled), Err(Error::Parse { line: 3, .. })));

        let short: String = good.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(DatasetManifest::from_text(&short).is_err());
        assert!(DatasetManifest::from_text("").is_err());
        assert!(DatasetManifest::from_text(&good.replace("\"version\":1", "\"version\":9")).is_err());
    }

    #[test]
    fn default_split_fractions() {
        let mut m = DatasetManifest::new(21, "hand21");
        m.records = vec![record(21); 200];
        m.assign_splits([0.75, 0.10, 0.15], 4).unwrap();
        assert_eq!(m.split(Split::Train).count(), 150);
        assert_eq!(m.split(Split::Val).count(), 20);
        assert_eq!(m.split(Split::Test).count(), 30);
        let mut again = m.clone();
        again.assign_splits([0.75, 0.10, 0.15], 4).unwrap();
        assert_eq!(again, m);
        assert!(m.assign_splits([0.5, 0.5, 0.5], 0).is_err());
    }
}
