//! Tensor container files and their JSON manifests.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "PI3TENSR"
//! version     u32      1
//! header_len  u32
//! header      header_len bytes of UTF-8 JSON:
//!             [{"name", "dtype": "f32"|"f64"|"u8", "shape": [..], "byte_offset"}]
//! payload     row-major tensor data; offsets are relative to the payload start
//! ```
//!
//! A manifest `<container>.json` next to each container records what the
//! tensors mean (scene, prediction, weights), their roles, and the config that
//! produced them.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ConfidenceMap, Grid, Mask, PointMap};
use crate::losses::ViewPrediction;
use crate::net::{ModelWeights, NetConfig, Param};
use crate::synth::{Image, SceneSample};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PI3TENSR";
pub const VERSION: u32 = 1;
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A named tensor holding its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Tensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor { name: name.into(), dtype: DType::F32, shape, bytes }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor { name: name.into(), dtype: DType::F64, shape, bytes }
    }

    pub fn from_u8(name: impl Into<String>, shape: Vec<usize>, values: &[u8]) -> Self {
        Tensor { name: name.into(), dtype: DType::U8, shape, bytes: values.to_vec() }
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::ShapeMismatch(format!("tensor {} has dtype {:?}, expected {dtype:?}", self.name, self.dtype)));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.expect(DType::F32)?;
        Ok(self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        self.expect(DType::F64)?;
        Ok(self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.expect(DType::U8)?;
        Ok(self.bytes.clone())
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!("tensor {} has shape {:?}, expected {shape:?}", self.name, self.shape)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    byte_offset: usize,
}

/// Serializes tensors in the given order with a contiguous payload.
pub fn write_container(entries: &[Tensor]) -> Result<Vec<u8>> {
    let mut names = HashSet::new();
    let mut header = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    for t in entries {
        if !names.insert(t.name.as_str()) {
            return Err(Error::BoundsViolation(format!("duplicate tensor name {}", t.name)));
        }
        if t.element_count() * t.dtype.size() != t.bytes.len() {
            return Err(Error::BoundsViolation(format!(
                "tensor {} has {} bytes but shape {:?} needs {}",
                t.name,
                t.bytes.len(),
                t.shape,
                t.element_count() * t.dtype.size()
            )));
        }
        header.push(HeaderEntry { name: t.name.clone(), dtype: t.dtype, shape: t.shape.clone(), byte_offset: offset });
        offset += t.bytes.len();
    }
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::BoundsViolation("header too large".into()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for t in entries {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Parses a container, checking that every span is in bounds, ascending and
/// non-overlapping, and that names are unique.
pub fn read_container(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptHeader("file truncated before header length".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::BoundsViolation(format!("header length {header_len} exceeds file")))?;
    let header_text = std::str::from_utf8(&bytes[16..payload_start]).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let header: Vec<HeaderEntry> = serde_json::from_str(header_text).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let payload = &bytes[payload_start..];
    let mut names = HashSet::new();
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(header.len());
    for e in header {
        if !names.insert(e.name.clone()) {
            return Err(Error::BoundsViolation(format!("duplicate tensor name {}", e.name)));
        }
        let len = e
            .shape
            .iter()
            .try_fold(e.dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BoundsViolation(format!("tensor {} size overflows", e.name)))?;
        if e.byte_offset < cursor {
            return Err(Error::BoundsViolation(format!("tensor {} overlaps or is out of order", e.name)));
        }
        let end = e
            .byte_offset
            .checked_add(len)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::BoundsViolation(format!("tensor {} runs past the end of file", e.name)))?;
        out.push(Tensor { name: e.name, dtype: e.dtype, shape: e.shape, bytes: payload[e.byte_offset..end].to_vec() });
        cursor = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Scene,
    Prediction,
    Report,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ManifestKind,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    /// Container path relative to the manifest's directory.
    pub tensor_file: String,
    /// Role (`images`, `poses`, `pointmaps`, `conf`, `masks`, ...) to tensor name.
    pub tensor_names: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub tool_version: String,
    pub seed: u64,
}

impl Manifest {
    /// Checks that every referenced tensor exists and per-view tensors lead with `n_views`.
    pub fn validate(&self, tensors: &[Tensor]) -> Result<()> {
        for (role, name) in &self.tensor_names {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::MissingTensor(format!("{name} (role {role})")))?;
            if PER_VIEW_ROLES.contains(&role.as_str()) && t.shape.first() != Some(&self.n_views) {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} leads with {:?} but the manifest lists {} views",
                    t.shape.first(),
                    self.n_views
                )));
            }
        }
        Ok(())
    }
}

const PER_VIEW_ROLES: [&str; 5] = ["images", "poses", "pointmaps", "conf", "masks"];

pub fn manifest_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `tensors` to `path` and the manifest beside it.
pub fn save(path: &Path, manifest: &Manifest, tensors: &[Tensor]) -> Result<()> {
    manifest.validate(tensors)?;
    std::fs::write(path, write_container(tensors)?)?;
    std::fs::write(manifest_path(path), to_json_pretty(manifest)?)?;
    Ok(())
}

/// Reads a manifest and the container it references.
pub fn load(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let mpath = manifest_path(path);
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let tensors = read_container(&std::fs::read(dir.join(&manifest.tensor_file))?)?;
    manifest.validate(&tensors)?;
    Ok((manifest, tensors))
}

/// JSON with sorted keys and a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find<'a>(tensors: &'a [Tensor], manifest: &Manifest, role: &str) -> Result<&'a Tensor> {
    let name = manifest.tensor_names.get(role).ok_or_else(|| Error::MissingTensor(format!("role {role}")))?;
    tensors.iter().find(|t| &t.name == name).ok_or_else(|| Error::MissingTensor(name.clone()))
}

fn poses_tensor(name: &str, poses: &[Pose]) -> Tensor {
    let mut v = Vec::with_capacity(poses.len() * 16);
    for p in poses {
        let m = p.to_matrix();
        for r in 0..4 {
            for c in 0..4 {
                v.push(m[(r, c)]);
            }
        }
    }
    Tensor::from_f64(name, vec![poses.len(), 4, 4], &v)
}

fn poses_from(t: &Tensor, n: usize) -> Result<Vec<Pose>> {
    t.check_shape(&[n, 4, 4])?;
    let v = t.to_f64()?;
    Ok(v.chunks_exact(16).map(|c| Pose::from_matrix_unchecked(&Matrix4::from_row_slice(c))).collect())
}

fn pointmaps_tensor(name: &str, maps: &[PointMap], h: usize, w: usize) -> Tensor {
    let v: Vec<f64> = maps.iter().flat_map(|m| m.data.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
    Tensor::from_f64(name, vec![maps.len(), h, w, 3], &v)
}

fn pointmaps_from(t: &Tensor, n: usize, h: usize, w: usize) -> Result<Vec<PointMap>> {
    t.check_shape(&[n, h, w, 3])?;
    let v = t.to_f64()?;
    Ok(v.chunks_exact(h * w * 3)
        .map(|view| Grid { height: h, width: w, data: view.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect() })
        .collect())
}

fn scalar_maps_from(t: &Tensor, n: usize, h: usize, w: usize) -> Result<Vec<ConfidenceMap>> {
    t.check_shape(&[n, h, w])?;
    let v = t.to_f64()?;
    Ok(v.chunks_exact(h * w).map(|c| Grid { height: h, width: w, data: c.to_vec() }).collect())
}

fn check_views<T>(maps: &[Grid<T>], h: usize, w: usize) -> Result<()> {
    if maps.iter().any(|m| m.height != h || m.width != w) {
        return Err(Error::ShapeMismatch("views differ in size".into()));
    }
    Ok(())
}

/// Saves a ground-truth scene. `config` is echoed into the manifest.
pub fn save_scene(path: &Path, sample: &SceneSample, config: serde_json::Value, seed: u64) -> Result<()> {
    let n = sample.n_views();
    let (h, w) = (sample.intrinsics.height, sample.intrinsics.width);
    check_views(&sample.images, h, w)?;
    check_views(&sample.gt_pointmaps, h, w)?;
    check_views(&sample.valid, h, w)?;
    let images: Vec<f32> = sample.images.iter().flat_map(|im| im.data.iter().flatten().copied()).collect();
    let masks: Vec<u8> = sample.valid.iter().flat_map(|m| m.data.iter().map(|&b| b as u8)).collect();
    let k = &sample.intrinsics;
    let tensors = vec![
        Tensor::from_f32("images", vec![n, h, w, 3], &images),
        poses_tensor("poses", &sample.gt_poses),
        pointmaps_tensor("pointmaps", &sample.gt_pointmaps, h, w),
        Tensor::from_u8("masks", vec![n, h, w], &masks),
        Tensor::from_f64("intrinsics", vec![4], &[k.fx, k.fy, k.cx, k.cy]),
    ];
    let manifest = Manifest {
        kind: ManifestKind::Scene,
        n_views: n,
        height: h,
        width: w,
        tensor_file: file_name(path),
        tensor_names: ["images", "poses", "pointmaps", "masks", "intrinsics"].iter().map(|r| (r.to_string(), r.to_string())).collect(),
        config,
        tool_version: TOOL_VERSION.into(),
        seed,
    };
    save(path, &manifest, &tensors)
}

pub fn load_scene(path: &Path) -> Result<(SceneSample, Manifest)> {
    let (m, tensors) = load(path)?;
    if m.kind != ManifestKind::Scene {
        return Err(Error::InvalidConfig(format!("{} is a {:?} file, not a scene", path.display(), m.kind)));
    }
    let (n, h, w) = (m.n_views, m.height, m.width);
    let images_t = find(&tensors, &m, "images")?;
    images_t.check_shape(&[n, h, w, 3])?;
    let images: Vec<Image> = images_t
        .to_f32()?
        .chunks_exact(h * w * 3)
        .map(|c| Grid { height: h, width: w, data: c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect() })
        .collect();
    let masks_t = find(&tensors, &m, "masks")?;
    masks_t.check_shape(&[n, h, w])?;
    let valid: Vec<Mask> = masks_t
        .to_u8()?
        .chunks_exact(h * w)
        .map(|c| Grid { height: h, width: w, data: c.iter().map(|&b| b != 0).collect() })
        .collect();
    let kt = find(&tensors, &m, "intrinsics")?;
    kt.check_shape(&[4])?;
    let k = kt.to_f64()?;
    let sample = SceneSample {
        images,
        gt_poses: poses_from(find(&tensors, &m, "poses")?, n)?,
        gt_pointmaps: pointmaps_from(find(&tensors, &m, "pointmaps")?, n, h, w)?,
        valid,
        intrinsics: Intrinsics::new(k[0], k[1], k[2], k[3], w, h)?,
    };
    Ok((sample, m))
}

/// Saves predictions; images of the source scene are not repeated.
pub fn save_prediction(path: &Path, preds: &[ViewPrediction], config: serde_json::Value, seed: u64) -> Result<()> {
    let first = preds.first().ok_or(Error::EmptyInput)?;
    let (h, w) = (first.pointmap.height, first.pointmap.width);
    let maps: Vec<PointMap> = preds.iter().map(|p| p.pointmap.clone()).collect();
    let conf: Vec<ConfidenceMap> = preds.iter().map(|p| p.conf_logits.clone()).collect();
    check_views(&maps, h, w)?;
    check_views(&conf, h, w)?;
    let poses: Vec<Pose> = preds.iter().map(|p| p.pose).collect();
    let conf_values: Vec<f64> = conf.iter().flat_map(|c| c.data.iter().copied()).collect();
    let tensors = vec![
        poses_tensor("poses", &poses),
        pointmaps_tensor("pointmaps", &maps, h, w),
        Tensor::from_f64("conf", vec![preds.len(), h, w], &conf_values),
    ];
    let manifest = Manifest {
        kind: ManifestKind::Prediction,
        n_views: preds.len(),
        height: h,
        width: w,
        tensor_file: file_name(path),
        tensor_names: ["poses", "pointmaps", "conf"].iter().map(|r| (r.to_string(), r.to_string())).collect(),
        config,
        tool_version: TOOL_VERSION.into(),
        seed,
    };
    save(path, &manifest, &tensors)
}

pub fn load_prediction(path: &Path) -> Result<(Vec<ViewPrediction>, Manifest)> {
    let (m, tensors) = load(path)?;
    if m.kind != ManifestKind::Prediction {
        return Err(Error::InvalidConfig(format!("{} is a {:?} file, not a prediction", path.display(), m.kind)));
    }
    let (n, h, w) = (m.n_views, m.height, m.width);
    let poses = poses_from(find(&tensors, &m, "poses")?, n)?;
    let maps = pointmaps_from(find(&tensors, &m, "pointmaps")?, n, h, w)?;
    let conf = scalar_maps_from(find(&tensors, &m, "conf")?, n, h, w)?;
    let preds = poses
        .into_iter()
        .zip(maps)
        .zip(conf)
        .map(|((pose, pointmap), conf_logits)| ViewPrediction { pointmap, conf_logits, pose })
        .collect();
    Ok((preds, m))
}

/// Saves every parameter as an f32 tensor under its own name.
pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    let tensors: Vec<Tensor> = w.params.iter().map(|(name, p)| Tensor::from_f32(name.clone(), p.shape.clone(), &p.data)).collect();
    let manifest = Manifest {
        kind: ManifestKind::Weights,
        n_views: 0,
        height: 0,
        width: 0,
        tensor_file: file_name(path),
        tensor_names: w.params.keys().map(|k| (k.clone(), k.clone())).collect(),
        config: serde_json::to_value(&w.config)?,
        tool_version: TOOL_VERSION.into(),
        seed: w.config.seed,
    };
    save(path, &manifest, &tensors)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let (m, tensors) = load(path)?;
    if m.kind != ManifestKind::Weights {
        return Err(Error::InvalidConfig(format!("{} is a {:?} file, not weights", path.display(), m.kind)));
    }
    let config: NetConfig = serde_json::from_value(m.config)?;
    let params = tensors
        .into_iter()
        .map(|t| Ok((t.name.clone(), Param { data: t.to_f32()?, shape: t.shape })))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let w = ModelWeights { config, params };
    crate::net::validate_weights(&w)?;
    Ok(w)
}
