//! File formats and run configuration: binary keypoint-feature and
//! named-tensor weight containers, comma-separated IMU logs, flat
//! key-value config files, and dataset manifests.

use crate::features::{FeatureError, FeatureSet};
use crate::geometry::{CameraIntrinsics, Homography, Pose};
use crate::gnn::{AttentionVariant, ModelConfig, ModelParams};
use crate::imu::ImuSample;
use crate::mat::Mat;
use crate::pipeline::LossKind;
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const FEATURE_MAGIC: &[u8; 4] = b"KPMF";
const WEIGHTS_MAGIC: &[u8; 4] = b"KPMW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported format version {got}, expected {want}")]
    VersionMismatch { path: PathBuf, got: u32, want: u32 },
    #[error("{path}: unknown tensor name '{name}'")]
    UnknownTensorName { path: PathBuf, name: String },
    #[error("{path}: tensor '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch { path: PathBuf, name: String, got: (usize, usize), want: (usize, usize) },
    #[error("{path}: descriptor dimension {got} does not match expected {want}")]
    DimMismatch { path: PathBuf, got: usize, want: usize },
    #[error("{path}: file contains no measurements")]
    EmptyMeasurements { path: PathBuf },
    #[error("{path}:{line}: timestamps are not strictly increasing")]
    NonMonotonicTimestamps { path: PathBuf, line: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

struct ByteReader<'a> {
    path: &'a Path,
    data: Vec<u8>,
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn open(path: &'a Path) -> Result<Self, IoError> {
        let mut data = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|e| file_err(path, e))?;
        Ok(ByteReader { path, data, offset: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8], IoError> {
        if self.offset + n > self.data.len() {
            return Err(parse_err(self.path, 0, format!("truncated file: wanted {n} bytes at offset {}", self.offset)));
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_consumed(&self) -> Result<(), IoError> {
        if self.offset != self.data.len() {
            return Err(parse_err(self.path, 0, format!("{} trailing bytes", self.data.len() - self.offset)));
        }
        Ok(())
    }
}

/// Writes a feature set: magic, version, N, D, then per-keypoint
/// `(x, y, depth)` as f32 (depth NaN = absent), then NxD f32 descriptors.
pub fn write_features(path: &Path, feats: &FeatureSet) -> Result<(), IoError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.descriptor_dim() as u32).to_le_bytes());
    for i in 0..feats.len() {
        let p = feats.position(i);
        let depth = feats.raw_depths().map(|d| d[i]).unwrap_or(f64::NAN);
        buf.extend_from_slice(&(p[0] as f32).to_le_bytes());
        buf.extend_from_slice(&(p[1] as f32).to_le_bytes());
        buf.extend_from_slice(&(depth as f32).to_le_bytes());
    }
    for i in 0..feats.len() {
        for v in feats.descriptors().row(i) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| file_err(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSet, IoError> {
    let mut r = ByteReader::open(path)?;
    if r.take(4)? != FEATURE_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf(), expected: "KPMF" });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch { path: path.to_path_buf(), got: version, want: FORMAT_VERSION });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n == 0 {
        return Err(parse_err(path, 0, "feature file must contain at least one keypoint"));
    }
    if d == 0 {
        return Err(parse_err(path, 0, "descriptor dimension must be positive"));
    }
    let mut positions = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut any_depth = false;
    for _ in 0..n {
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let depth = r.f32()? as f64;
        positions.push([x, y]);
        if depth.is_finite() {
            any_depth = true;
        }
        depths.push(depth);
    }
    let mut desc = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            desc.set(i, j, r.f32()? as f64);
        }
    }
    r.expect_consumed()?;
    let depths = any_depth.then_some(depths);
    Ok(FeatureSet::new(positions, desc, depths)?)
}

/// Writes model weights as a named-tensor container: magic, version,
/// tensor count, then per tensor name, rank, dims, f64 payload.
pub fn write_weights(path: &Path, params: &ModelParams) -> Result<(), IoError> {
    let tensors = params.tensors();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| file_err(path, e))
}

/// Reads weights into a fresh parameter set of the given architecture.
/// Every tensor must be present with matching shape; no partial state is
/// ever returned.
pub fn read_weights(path: &Path, config: &ModelConfig) -> Result<ModelParams, IoError> {
    let mut r = ByteReader::open(path)?;
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf(), expected: "KPMW" });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch { path: path.to_path_buf(), got: version, want: FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut loaded: HashMap<String, Mat> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| parse_err(path, 0, "tensor name is not valid utf-8"))?;
        let rank = r.u32()? as usize;
        if rank != 2 {
            return Err(parse_err(path, 0, format!("tensor '{name}' has rank {rank}, expected 2")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut m = Mat::zeros(rows, cols);
        for k in 0..rows * cols {
            m.as_mut_slice()[k] = r.f64()?;
        }
        loaded.insert(name, m);
    }
    r.expect_consumed()?;

    let mut params = ModelParams::init(config, 0);
    let expected: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in loaded.keys() {
        if !expected.contains(name) {
            return Err(IoError::UnknownTensorName { path: path.to_path_buf(), name: name.clone() });
        }
    }
    for (name, tensor) in params.tensors_mut() {
        let Some(m) = loaded.get(&name) else {
            return Err(parse_err(path, 0, format!("missing tensor '{name}'")));
        };
        if m.shape() != tensor.shape() {
            return Err(IoError::ShapeMismatch {
                path: path.to_path_buf(),
                name,
                got: m.shape(),
                want: tensor.shape(),
            });
        }
        *tensor = m.clone();
    }
    Ok(params)
}

/// Reads a 7-column comma-separated IMU log: `t, wx, wy, wz, ax, ay, az`
/// with `#` comments. Timestamps must be strictly increasing.
pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() != 7 {
            return Err(parse_err(path, lineno + 1, format!("expected 7 comma-separated values, got {}", fields.len())));
        }
        let mut values = [0.0f64; 7];
        for (k, field) in fields.iter().enumerate() {
            values[k] = field
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("invalid number '{field}'")))?;
        }
        let sample = ImuSample {
            timestamp: values[0],
            omega: Vector3::new(values[1], values[2], values[3]),
            accel: Vector3::new(values[4], values[5], values[6]),
        };
        if let Some(prev) = samples.last() {
            let prev: &ImuSample = prev;
            if sample.timestamp <= prev.timestamp {
                return Err(IoError::NonMonotonicTimestamps { path: path.to_path_buf(), line: lineno + 1 });
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(IoError::EmptyMeasurements { path: path.to_path_buf() });
    }
    Ok(samples)
}

/// All run settings, read from flat dotted-key files and overridable from
/// the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: AttentionVariant,
    pub layers: usize,
    pub dim: usize,
    pub sigma: f64,
    pub loss_kind: LossKind,
    pub threshold_px: f64,
    pub margin_px: f64,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_temperature: f64,
    pub confidence: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: AttentionVariant::Probabilistic,
            layers: 2,
            dim: 256,
            sigma: 0.1,
            loss_kind: LossKind::Projection,
            threshold_px: 3.0,
            margin_px: 10.0,
            sinkhorn_iterations: 100,
            sinkhorn_temperature: 1.0,
            confidence: 0.2,
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 300,
            patience: 20,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.dim, self.layers, self.variant, self.sigma)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), IoError> {
        let bad = |msg: String| IoError::InvalidConfig(msg);
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{key}: invalid number '{v}'")));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("{key}: invalid integer '{v}'")));
        match key {
            "model.variant" => self.variant = value.parse().map_err(IoError::InvalidConfig)?,
            "model.layers" => self.layers = parse_usize(value)?,
            "model.dim" => self.dim = parse_usize(value)?,
            "model.sigma" => self.sigma = parse_f64(value)?,
            "loss.kind" => self.loss_kind = value.parse().map_err(IoError::InvalidConfig)?,
            "loss.threshold" => self.threshold_px = parse_f64(value)?,
            "loss.margin" => self.margin_px = parse_f64(value)?,
            "sinkhorn.iterations" => self.sinkhorn_iterations = parse_usize(value)?,
            "sinkhorn.temperature" => self.sinkhorn_temperature = parse_f64(value)?,
            "match.confidence" => self.confidence = parse_f64(value)?,
            "train.learning_rate" => self.learning_rate = parse_f64(value)?,
            "train.batch_size" => self.batch_size = parse_usize(value)?,
            "train.max_epochs" => self.max_epochs = parse_usize(value)?,
            "train.patience" => self.patience = parse_usize(value)?,
            "train.val_fraction" => self.val_fraction = parse_f64(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(format!("seed: invalid integer '{value}'")))?,
            other => return Err(bad(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Range checks over every field.
    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |msg: &str| Err(IoError::InvalidConfig(msg.to_string()));
        if self.sigma <= 0.0 {
            return bad("model.sigma must be positive");
        }
        if self.layers < 1 {
            return bad("model.layers must be at least 1");
        }
        if self.dim < 1 {
            return bad("model.dim must be at least 1");
        }
        if self.threshold_px <= 0.0 {
            return bad("loss.threshold must be positive");
        }
        if self.margin_px <= self.threshold_px {
            return bad("loss.margin must exceed loss.threshold");
        }
        if self.sinkhorn_iterations < 1 {
            return bad("sinkhorn.iterations must be at least 1");
        }
        if self.sinkhorn_temperature <= 0.0 {
            return bad("sinkhorn.temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return bad("match.confidence must be in [0, 1)");
        }
        if self.learning_rate <= 0.0 {
            return bad("train.learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("train.max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("train.val_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Reads a config file of `key = value` lines with `#` comments.
pub fn read_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut config = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(path, lineno + 1, "expected key=value"));
        };
        config
            .set(key.trim(), value.trim())
            .map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
    }
    config.validate()?;
    Ok(config)
}

/// Ground-truth transform of one dataset pair.
#[derive(Clone, Debug)]
pub enum GtSource {
    /// A-to-B coordinate transform.
    Pose(Pose),
    Homography(Homography),
}

/// Where the motion prior of a pair comes from.
#[derive(Clone, Debug)]
pub enum PriorSource {
    None,
    /// A-to-B coordinate transform.
    Pose(Pose),
    Homography(Homography),
    Imu { path: PathBuf, initial_velocity: Vector3<f64>, gravity: Vector3<f64> },
}

/// One line of a dataset manifest.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub id: String,
    pub feats_a: PathBuf,
    pub feats_b: PathBuf,
    pub k_a: CameraIntrinsics,
    pub k_b: CameraIntrinsics,
    pub t_a: f64,
    pub t_b: f64,
    pub ground_truth: GtSource,
    pub prior: PriorSource,
}

fn parse_floats(path: &Path, line: usize, key: &str, value: &str, n: usize) -> Result<Vec<f64>, IoError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != n {
        return Err(parse_err(path, line, format!("{key}: expected {n} comma-separated numbers")));
    }
    parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| parse_err(path, line, format!("{key}: invalid number '{p}'"))))
        .collect()
}

fn parse_intrinsics(path: &Path, line: usize, key: &str, value: &str) -> Result<CameraIntrinsics, IoError> {
    let v = parse_floats(path, line, key, value, 6)?;
    if v[0] <= 0.0 || v[1] <= 0.0 || v[4] <= 0.0 || v[5] <= 0.0 {
        return Err(parse_err(path, line, format!("{key}: focal lengths and image size must be positive")));
    }
    Ok(CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4], v[5]))
}

fn parse_pose(path: &Path, line: usize, key: &str, value: &str) -> Result<Pose, IoError> {
    let v = parse_floats(path, line, key, value, 7)?;
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    if norm < 1e-9 {
        return Err(parse_err(path, line, format!("{key}: zero quaternion")));
    }
    Ok(Pose::from_quaternion(v[0], v[1], v[2], v[3], Vector3::new(v[4], v[5], v[6])))
}

fn parse_homography(path: &Path, line: usize, key: &str, value: &str) -> Result<Homography, IoError> {
    let v = parse_floats(path, line, key, value, 9)?;
    let m = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    Homography::new(m).map_err(|e| parse_err(path, line, format!("{key}: {e}")))
}

/// Reads a manifest: one pair per line as whitespace-separated
/// `key=value` tokens; paths resolve relative to the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for token in line.split_whitespace() {
            let Some((k, v)) = token.split_once('=') else {
                return Err(parse_err(path, lineno, format!("expected key=value token, got '{token}'")));
            };
            if fields.insert(k, v).is_some() {
                return Err(parse_err(path, lineno, format!("duplicate key '{k}'")));
            }
        }
        let require = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| parse_err(path, lineno, format!("missing required key '{k}'")))
        };

        let id = require("id")?.to_string();
        let feats_a = base.join(require("a")?);
        let feats_b = base.join(require("b")?);
        let k_a = parse_intrinsics(path, lineno, "ka", require("ka")?)?;
        let k_b = parse_intrinsics(path, lineno, "kb", require("kb")?)?;
        let t_a = fields.get("ta").map(|v| v.parse().map_err(|_| parse_err(path, lineno, "ta: invalid number"))).transpose()?.unwrap_or(0.0);
        let t_b = fields.get("tb").map(|v| v.parse().map_err(|_| parse_err(path, lineno, "tb: invalid number"))).transpose()?.unwrap_or(0.0);

        let ground_truth = match (fields.get("gt_pose"), fields.get("gt_h")) {
            (Some(v), None) => GtSource::Pose(parse_pose(path, lineno, "gt_pose", v)?),
            (None, Some(v)) => GtSource::Homography(parse_homography(path, lineno, "gt_h", v)?),
            (Some(_), Some(_)) => {
                return Err(parse_err(path, lineno, "exactly one of gt_pose / gt_h allowed, got both"))
            }
            (None, None) => return Err(parse_err(path, lineno, "missing ground truth: provide gt_pose or gt_h")),
        };

        let prior_keys = ["prior_pose", "prior_h", "imu"].iter().filter(|k| fields.contains_key(**k)).count();
        if prior_keys > 1 {
            return Err(parse_err(path, lineno, "at most one of prior_pose / prior_h / imu allowed"));
        }
        let prior = if let Some(v) = fields.get("prior_pose") {
            PriorSource::Pose(parse_pose(path, lineno, "prior_pose", v)?)
        } else if let Some(v) = fields.get("prior_h") {
            PriorSource::Homography(parse_homography(path, lineno, "prior_h", v)?)
        } else if let Some(v) = fields.get("imu") {
            let v0 = match fields.get("v0") {
                Some(s) => {
                    let f = parse_floats(path, lineno, "v0", s, 3)?;
                    Vector3::new(f[0], f[1], f[2])
                }
                None => Vector3::zeros(),
            };
            let gravity = match fields.get("gravity") {
                Some(s) => {
                    let f = parse_floats(path, lineno, "gravity", s, 3)?;
                    Vector3::new(f[0], f[1], f[2])
                }
                None => Vector3::new(0.0, 0.0, -9.81),
            };
            PriorSource::Imu { path: base.join(v), initial_velocity: v0, gravity }
        } else {
            PriorSource::None
        };

        records.push(PairRecord { id, feats_a, feats_b, k_a, k_b, t_a, t_b, ground_truth, prior });
    }
    Ok(records)
}

fn pose_to_token(pose: &Pose) -> String {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*pose.rotation());
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let t = pose.translation();
    format!(
        "{},{},{},{},{},{},{}",
        q.w, q.i, q.j, q.k, t[0], t[1], t[2]
    )
}

fn intrinsics_to_token(k: &CameraIntrinsics) -> String {
    format!("{},{},{},{},{},{}", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

fn homography_to_token(h: &Homography) -> String {
    let m = h.matrix();
    (0..9).map(|i| m[(i / 3, i % 3)].to_string()).collect::<Vec<_>>().join(",")
}

/// Writes a manifest; paths in the records must already be relative to
/// the manifest directory.
pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<(), IoError> {
    let mut out = String::new();
    for r in records {
        let mut line = format!(
            "id={} a={} b={} ka={} kb={} ta={} tb={}",
            r.id,
            r.feats_a.display(),
            r.feats_b.display(),
            intrinsics_to_token(&r.k_a),
            intrinsics_to_token(&r.k_b),
            r.t_a,
            r.t_b
        );
        match &r.ground_truth {
            GtSource::Pose(p) => line.push_str(&format!(" gt_pose={}", pose_to_token(p))),
            GtSource::Homography(h) => line.push_str(&format!(" gt_h={}", homography_to_token(h))),
        }
        match &r.prior {
            PriorSource::None => {}
            PriorSource::Pose(p) => line.push_str(&format!(" prior_pose={}", pose_to_token(p))),
            PriorSource::Homography(h) => line.push_str(&format!(" prior_h={}", homography_to_token(h))),
            PriorSource::Imu { path: imu, initial_velocity, gravity } => {
                line.push_str(&format!(
                    " imu={} v0={},{},{} gravity={},{},{}",
                    imu.display(),
                    initial_velocity[0],
                    initial_velocity[1],
                    initial_velocity[2],
                    gravity[0],
                    gravity[1],
                    gravity[2]
                ));
            }
        }
        line.push('\n');
        out.push_str(&line);
    }
    let mut f = std::fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| file_err(path, e))
}
