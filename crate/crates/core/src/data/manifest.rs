//! JSON Lines dataset manifests.
//!
//! One object per line:
//! `{"image": "<path>", "id": <u32>, "cam": <u32>, "split": "train"|"query"|"gallery", "kp": [[x, y, conf], ...18]}`.
//! Image paths are relative to the manifest's directory unless absolute. Blank
//! lines are ignored.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ReidError, Result};
use crate::geometry::{Joint, Keypoints18, JOINT_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub id: u32,
    pub cam: u32,
    pub split: Split,
    pub keypoints: Keypoints18,
}

#[derive(Serialize)]
struct Line<'a> {
    image: &'a str,
    id: u32,
    cam: u32,
    split: Split,
    kp: Vec<[f64; 3]>,
}

const FIELDS: [&str; 5] = ["image", "id", "cam", "split", "kp"];

impl ManifestRecord {
    pub fn to_json_line(&self) -> Result<String> {
        let image = self.image.to_str().ok_or_else(|| {
            ReidError::Data(format!("image path {:?} is not UTF-8", self.image))
        })?;
        let line = Line {
            image,
            id: self.id,
            cam: self.cam,
            split: self.split,
            kp: self
                .keypoints
                .joints()
                .iter()
                .map(|j| [j.x, j.y, j.confidence])
                .collect(),
        };
        Ok(serde_json::to_string(&line).expect("plain data serializes"))
    }

    /// Parses one line; errors carry the offending field name.
    pub fn from_json_line(text: &str) -> std::result::Result<Self, (String, String)> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ("<record>".to_string(), e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(("<record>".into(), "expected a JSON object".into()));
        };
        if let Some(unknown) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err((unknown.clone(), "unknown field".into()));
        }
        let image: String = field(&map, "image")?;
        if image.is_empty() {
            return Err(("image".into(), "empty path".into()));
        }
        let kp: Vec<[f64; 3]> = field(&map, "kp")?;
        if kp.len() != JOINT_COUNT {
            return Err((
                "kp".into(),
                format!("expected {JOINT_COUNT} keypoints, got {}", kp.len()),
            ));
        }
        let joints: Vec<Joint> = kp.iter().map(|&[x, y, c]| Joint::new(x, y, c)).collect();
        let keypoints =
            Keypoints18::from_slice(&joints).map_err(|e| ("kp".to_string(), e.to_string()))?;
        Ok(Self {
            image: PathBuf::from(image),
            id: field(&map, "id")?,
            cam: field(&map, "cam")?,
            split: field(&map, "split")?,
            keypoints,
        })
    }
}

fn field<T: DeserializeOwned>(
    map: &Map<String, Value>,
    name: &str,
) -> std::result::Result<T, (String, String)> {
    let value = map
        .get(name)
        .ok_or_else(|| (name.to_string(), "missing".to_string()))?;
    T::deserialize(value).map_err(|e| (name.to_string(), e.to_string()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Number of training identities `q`.
    pub fn num_identities(&self) -> usize {
        self.split(Split::Train)
            .map(|r| r.id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Training labels must cover `0..q` without gaps.
    pub fn check_dense_labels(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.split(Split::Train).map(|r| r.id).collect();
        if let Some(missing) = (0..ids.len() as u32).find(|i| !ids.contains(i)) {
            return Err(ReidError::Data(format!(
                "training identities are not dense: label {missing} missing below {}",
                ids.last().copied().unwrap_or(0)
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", r.to_json_line()?).expect("string write");
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| ReidError::io(path, e))
    }

    /// Parses manifest text, rejecting duplicate image paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fail = |field: String, message: String| ReidError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                field,
                message,
            };
            let record = ManifestRecord::from_json_line(line).map_err(|(f, m)| fail(f, m))?;
            if !seen.insert(record.image.clone()) {
                return Err(fail(
                    "image".into(),
                    format!("duplicate path {}", record.image.display()),
                ));
            }
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, records };
        manifest.check_dense_labels()?;
        Ok(manifest)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
    Manifest::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(kp: usize) -> String {
        let joints: Vec<String> = (0..kp).map(|j| format!("[{j}, {}, 1.0]", 2 * j)).collect();
        format!(
            r#"{{"image": "a.ppm", "id": 0, "cam": 1, "split": "train", "kp": [{}]}}"#,
            joints.join(",")
        )
    }

    #[test]
    fn parses_a_record() {
        let m = Manifest::parse(&line(18), Path::new("x/m.jsonl")).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].cam, 1);
        assert_eq!(m.records[0].keypoints.joints()[5].y, 10.0);
        assert_eq!(m.resolve(&m.records[0]), Path::new("x/a.ppm"));
    }

    #[test]
    fn seventeen_keypoints_name_the_field() {
        let text = format!("\n{}", line(17));
        let err = Manifest::parse(&text, Path::new("m.jsonl")).unwrap_err();
        match err {
            ReidError::Manifest { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "kp");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn field_errors() {
        let bad_cam = line(18).replace("\"cam\": 1", "\"cam\": \"one\"");
        let extra = line(18).replace("\"cam\": 1", "\"cam\": 1, \"note\": 3");
        let no_split = line(18).replace(", \"split\": \"train\"", "");
        for (text, want) in [(bad_cam, "cam"), (extra, "note"), (no_split, "split")] {
            match Manifest::parse(&text, Path::new("m")).unwrap_err() {
                ReidError::Manifest { field, .. } => assert_eq!(field, want),
                other => panic!("{other}"),
            }
        }
    }

    #[test]
    fn duplicates_and_sparse_labels_rejected() {
        let two = format!("{}\n{}", line(18), line(18));
        assert!(Manifest::parse(&two, Path::new("m")).is_err());
        let sparse = line(18).replace("\"id\": 0", "\"id\": 2");
        assert!(matches!(
            Manifest::parse(&sparse, Path::new("m")),
            Err(ReidError::Data(_))
        ));
    }
}
