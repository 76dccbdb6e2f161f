//! Persistence: dataset directory layout and versioned model artifacts.
//!
//! Dataset layout:
//! ```text
//! <dir>/manifest.jsonl      first line: header record; then one JSON
//!                           record per sample
//! <dir>/left/<id>.png       8-bit RGB, lossless
//! <dir>/right/<id>.png
//! ```
//!
//! Model artifact: a single binary file. A text magic line and a JSON
//! header (architecture descriptor, named tensor table, group index,
//! provenance) followed by the raw little-endian f32 tensor data in table
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::geometry::{CameraRig, KeypointTriple, Pose, RowGeometry};
use crate::sim::StereoSample;

pub const DATASET_VERSION: &str = "rowadapt-dataset-v1";
pub const MODEL_MAGIC: &str = "rowadapt-model-v1";

/// Header record: first line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: String,
    pub rig: CameraRig,
    pub rows: RowGeometry,
    pub domain: String,
    pub seed: u64,
}

/// One sample record: one line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub left: String,
    pub right: String,
    pub imu_roll: f64,
    pub true_pose: Pose,
    pub gt_left: KeypointTriple,
    pub gt_right: KeypointTriple,
}

/// A loaded dataset: validated manifest with lazily loadable images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

pub fn write_png(path: &Path, img: &[f32], width: usize, height: usize) -> Result<(), DataError> {
    let bytes: Vec<u8> = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .expect("image buffer size");
    buf.save(path)
        .map_err(|e| DataError::io(path, std::io::Error::other(e)))
}

fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize), DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::io(path, std::io::Error::other(e)))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|b| *b as f32 / 255.0).collect();
    Ok((data, w, h))
}

/// Incrementally writes a dataset directory.
pub struct DatasetWriter {
    root: PathBuf,
    header: ManifestHeader,
    records: Vec<SampleRecord>,
}

impl DatasetWriter {
    pub fn create(root: impl Into<PathBuf>, header: ManifestHeader) -> Result<Self, DataError> {
        let root = root.into();
        for sub in ["left", "right"] {
            fs::create_dir_all(root.join(sub)).map_err(|e| DataError::io(root.join(sub), e))?;
        }
        Ok(DatasetWriter {
            root,
            header,
            records: Vec::new(),
        })
    }

    pub fn add(&mut self, id: &str, sample: &StereoSample) -> Result<(), DataError> {
        let left = format!("left/{id}.png");
        let right = format!("right/{id}.png");
        write_png(
            &self.root.join(&left),
            &sample.left_image,
            sample.width,
            sample.height,
        )?;
        write_png(
            &self.root.join(&right),
            &sample.right_image,
            sample.width,
            sample.height,
        )?;
        self.records.push(SampleRecord {
            id: id.to_string(),
            left,
            right,
            imu_roll: sample.imu_roll,
            true_pose: sample.true_pose,
            gt_left: sample.gt_left,
            gt_right: sample.gt_right,
        });
        Ok(())
    }

    /// Write the manifest and return the completed dataset.
    pub fn finish(self) -> Result<Dataset, DataError> {
        let path = self.root.join("manifest.jsonl");
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("serialize header"));
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("serialize record"));
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| DataError::io(&path, e))?;
        Ok(Dataset {
            root: self.root,
            header: self.header,
            records: self.records,
        })
    }
}

/// Load and validate a dataset manifest. Image files must exist and match
/// the rig dimensions; pixel data is loaded lazily per sample.
pub fn load_dataset(root: impl Into<PathBuf>) -> Result<Dataset, DataError> {
    let root = root.into();
    let path = root.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|_| DataError::MissingFile(path.clone()))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Malformed("empty manifest".into()))?
        .map_err(|e| DataError::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::SchemaViolation {
            field: "header".into(),
            why: e.to_string(),
        })?;
    if header.version != DATASET_VERSION {
        return Err(DataError::VersionMismatch {
            found: header.version,
            expected: DATASET_VERSION.into(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| DataError::SchemaViolation {
                field: format!("record {i}"),
                why: e.to_string(),
            })?;
        for rel in [&rec.left, &rec.right] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(DataError::MissingFile(p));
            }
            let (w, h) = image::image_dimensions(&p)
                .map_err(|e| DataError::io(&p, std::io::Error::other(e)))?;
            if w as usize != header.rig.width || h as usize != header.rig.height {
                return Err(DataError::SchemaViolation {
                    field: format!("image {rel}"),
                    why: format!(
                        "dimensions {w}x{h} disagree with rig {}x{}",
                        header.rig.width, header.rig.height
                    ),
                });
            }
        }
        records.push(rec);
    }
    Ok(Dataset {
        root,
        header,
        records,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Load the images for record `index`.
    pub fn load_sample(&self, index: usize) -> Result<StereoSample, DataError> {
        let rec = &self.records[index];
        let (left_image, w, h) = read_png(&self.root.join(&rec.left))?;
        let (right_image, _, _) = read_png(&self.root.join(&rec.right))?;
        Ok(StereoSample {
            left_image,
            right_image,
            width: w,
            height: h,
            imu_roll: rec.imu_roll,
            gt_left: rec.gt_left,
            gt_right: rec.gt_right,
            true_pose: rec.true_pose,
            domain: self.header.domain.clone(),
        })
    }

    /// Stable content hash of the manifest file.
    pub fn manifest_hash(&self) -> Result<String, DataError> {
        let path = self.root.join("manifest.jsonl");
        let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// One layer of the architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
}

/// Architecture descriptor stored in the artifact header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_width: usize,
    pub input_height: usize,
    pub layers: Vec<LayerSpec>,
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Training provenance stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
}

/// A serializable model: architecture, named tensors, named-group index
/// and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub arch: ArchDescriptor,
    pub tensors: Vec<NamedTensor>,
    /// Group name -> tensor names; every tensor in exactly one group.
    pub groups: BTreeMap<String, Vec<String>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    arch: ArchDescriptor,
    tensors: Vec<TensorEntry>,
    groups: BTreeMap<String, Vec<String>>,
    provenance: Provenance,
}

impl ModelArtifact {
    /// Check that the group index covers every tensor exactly once.
    pub fn validate_groups(&self) -> Result<(), DataError> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for names in self.groups.values() {
            for n in names {
                *seen.entry(n.as_str()).or_default() += 1;
            }
        }
        for t in &self.tensors {
            match seen.get(t.name.as_str()) {
                Some(1) => {}
                Some(k) => {
                    return Err(DataError::SchemaViolation {
                        field: t.name.clone(),
                        why: format!("tensor appears in {k} groups"),
                    })
                }
                None => {
                    return Err(DataError::SchemaViolation {
                        field: t.name.clone(),
                        why: "tensor missing from group index".into(),
                    })
                }
            }
        }
        let total: usize = self.groups.values().map(|v| v.len()).sum();
        if total != self.tensors.len() {
            return Err(DataError::SchemaViolation {
                field: "groups".into(),
                why: format!(
                    "group index names {total} tensors, artifact has {}",
                    self.tensors.len()
                ),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Write a model artifact; bit-exact round trip for all tensors.
pub fn save_model(path: impl AsRef<Path>, model: &ModelArtifact) -> Result<(), DataError> {
    let path = path.as_ref();
    model.validate_groups()?;
    let header = ModelHeader {
        arch: model.arch.clone(),
        tensors: model
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        groups: model.groups.clone(),
        provenance: model.provenance.clone(),
    };
    for t in &model.tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(DataError::ShapeMismatch {
                name: t.name.clone(),
                found: vec![t.data.len()],
                expected: t.shape.clone(),
            });
        }
    }
    let header_json = serde_json::to_vec(&header).expect("serialize model header");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in &model.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&out).map_err(|e| DataError::io(path, e))?;
    Ok(())
}

/// Load and validate a model artifact.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArtifact, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut magic = vec![0u8; MODEL_MAGIC.len() + 1];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| DataError::Malformed("file shorter than magic line".into()))?;
    let found = String::from_utf8_lossy(&magic[..MODEL_MAGIC.len()]).to_string();
    if found != MODEL_MAGIC || magic[MODEL_MAGIC.len()] != b'\n' {
        return Err(DataError::VersionMismatch {
            found,
            expected: MODEL_MAGIC.into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    cursor
        .read_exact(&mut len_bytes)
        .map_err(|_| DataError::Malformed("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_json)
        .map_err(|_| DataError::Malformed("truncated header".into()))?;
    let header: ModelHeader =
        serde_json::from_slice(&header_json).map_err(|e| DataError::SchemaViolation {
            field: "model header".into(),
            why: e.to_string(),
        })?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        cursor.read_exact(&mut buf).map_err(|_| {
            DataError::Malformed(format!("truncated tensor data for {}", entry.name))
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    let model = ModelArtifact {
        arch: header.arch,
        tensors,
        groups: header.groups,
        provenance: header.provenance,
    };
    model.validate_groups()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Eye, PixelPoint};
    use crate::sim::{render_stereo, DomainAppearance};

    fn rig() -> CameraRig {
        CameraRig {
            fx: 100.0,
            fy: 100.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
            baseline: 0.10,
            cam_height: 0.30,
        }
    }

    fn rows() -> RowGeometry {
        RowGeometry {
            row_spacing: 0.76,
            robot_width: 0.50,
        }
    }

    fn header() -> ManifestHeader {
        ManifestHeader {
            version: DATASET_VERSION.into(),
            rig: rig(),
            rows: rows(),
            domain: "early_corn".into(),
            seed: 1,
        }
    }

    #[test]
    fn dataset_round_trip_preserves_gt_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = DomainAppearance::preset("early_corn").unwrap();
        let pose = Pose {
            roll: 0.0123456789,
            pitch: -0.05,
            yaw: 0.1,
            x_off: 0.0777,
        };
        let sample = render_stereo(&rig(), &pose, &rows(), &d, 0.001, 5).unwrap();
        let mut w = DatasetWriter::create(dir.path(), header()).unwrap();
        w.add("000000", &sample).unwrap();
        w.finish().unwrap();

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let loaded = ds.load_sample(0).unwrap();
        assert_eq!(loaded.gt_left, sample.gt_left);
        assert_eq!(loaded.gt_right, sample.gt_right);
        assert_eq!(loaded.imu_roll, sample.imu_roll);
        assert_eq!(loaded.true_pose, sample.true_pose);
        // images quantized at render time, so the round trip is bit-exact
        assert_eq!(loaded.left_image, sample.left_image);
        assert_eq!(loaded.right_image, sample.right_image);
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = DatasetWriter::create(dir.path(), header()).unwrap();
        w.finish().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn mismatched_rig_height_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let d = DomainAppearance::preset("early_corn").unwrap();
        let sample = render_stereo(&rig(), &Pose::default(), &rows(), &d, 0.0, 5).unwrap();
        let mut hdr = header();
        hdr.rig.height = 64;
        let mut w = DatasetWriter::create(dir.path(), hdr).unwrap();
        w.add("000000", &sample).unwrap();
        w.finish().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::SchemaViolation { .. }), "{err}");
    }

    #[test]
    fn missing_image_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = DomainAppearance::preset("early_corn").unwrap();
        let sample = render_stereo(&rig(), &Pose::default(), &rows(), &d, 0.0, 5).unwrap();
        let mut w = DatasetWriter::create(dir.path(), header()).unwrap();
        w.add("000000", &sample).unwrap();
        w.finish().unwrap();
        fs::remove_file(dir.path().join("right/000000.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)), "{err}");
    }

    fn toy_model() -> ModelArtifact {
        let mut groups = BTreeMap::new();
        groups.insert("encoder".to_string(), vec!["enc.w".to_string()]);
        groups.insert("head".to_string(), vec!["head.w".to_string()]);
        ModelArtifact {
            arch: ArchDescriptor {
                input_width: 8,
                input_height: 8,
                layers: vec![LayerSpec {
                    name: "enc".into(),
                    kind: "conv".into(),
                    shape: vec![2, 3, 3, 3],
                }],
            },
            tensors: vec![
                NamedTensor {
                    name: "enc.w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, 0.1, f32::MIN_POSITIVE, 1e30],
                },
                NamedTensor {
                    name: "head.w".into(),
                    shape: vec![2],
                    data: vec![0.5, -0.5],
                },
            ],
            groups,
            provenance: Provenance {
                stage: "test".into(),
                seed: 9,
                config_hash: "abc".into(),
            },
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = toy_model();
        save_model(&path, &m).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn truncated_model_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &toy_model()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, DataError::Malformed(_)), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &toy_model()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[15] = b'9'; // corrupt the version digit in the magic line
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, DataError::VersionMismatch { .. }), "{err}");
    }

    #[test]
    fn incomplete_group_index_is_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_model();
        m.groups.get_mut("head").unwrap().clear();
        let err = save_model(dir.path().join("m.bin"), &m).unwrap_err();
        assert!(matches!(err, DataError::SchemaViolation { .. }), "{err}");
    }

    #[test]
    fn gt_survives_json_with_full_precision() {
        let t = KeypointTriple {
            vp: PixelPoint::new(80.000000123456789, 59.999999876543),
            li: PixelPoint::new(-20.3, 119.0),
            ri: PixelPoint::new(154.73333333333333, 119.0),
        };
        let s = serde_json::to_string(&t).unwrap();
        let back: KeypointTriple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let _ = Eye::Left;
    }
}
