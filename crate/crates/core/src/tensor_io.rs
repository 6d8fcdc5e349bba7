//! VXT1 binary tensors and dataset manifests.
//!
//! A VXT1 file is laid out as (all integers little-endian):
//!
//! ```text
//! b"VXT1" | dtype: u8 (1 = f32, 2 = f64) | ndim: u8 | dims: ndim x u64 | payload
//! ```
//!
//! The payload is the row-major element data, little-endian, with no padding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// A dense row-major tensor of `f32` or `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor("shape must have at least one dimension".into()));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidTensor(format!("rank {} exceeds 255", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!("zero-sized dimension in {shape:?}")));
    }
    let count: usize = shape.iter().product();
    if count != len {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} holds {count} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F64(data),
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Element values widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn into_f64_vec(self) -> Vec<f64> {
        match self.data {
            TensorData::F32(v) => v.into_iter().map(|x| x as f64).collect(),
            TensorData::F64(v) => v,
        }
    }

    /// Serialized VXT1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out =
            Vec::with_capacity(6 + 8 * self.shape.len() + dtype.size() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses VXT1 bytes; `path` is only used for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let code = bytes[4];
        let dtype = DType::from_code(code).ok_or_else(|| Error::UnsupportedDtype {
            path: path.into(),
            code,
        })?;
        let ndim = bytes[5] as usize;
        let header = 6 + 8 * ndim;
        if bytes.len() < header {
            return Err(Error::Length {
                path: path.into(),
                expected: header as u64,
                found: bytes.len() as u64,
            });
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "{}: invalid shape {shape:?}",
                path.display()
            )));
        }
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::InvalidTensor(format!("{}: shape overflows", path.display())))?;
        let payload = &bytes[header..];
        let expected = count * dtype.size() as u64;
        if payload.len() as u64 != expected {
            return Err(Error::Length {
                path: path.into(),
                expected,
                found: payload.len() as u64,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// On-disk dataset description. Paths are resolved relative to the
/// manifest's directory. Unknown keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub features: PathBuf,
    pub responses: PathBuf,
    pub localization: Option<PathBuf>,
    pub repeats: usize,
    pub split: Vec<Split>,
    pub stimuli: usize,
    pub voxels: usize,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Manifest("repeats must be >= 1".into()));
        }
        if self.split.len() != self.stimuli {
            return Err(Error::Manifest(format!(
                "split has {} entries but stimuli = {}",
                self.split.len(),
                self.stimuli
            )));
        }
        Ok(())
    }
}

/// Per-stimulus encoder feature maps, `stimuli x C x W x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub stimuli: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(stimuli: usize, channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let shape = [stimuli, channels, width, height];
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("features", &shape, &[data.len()]));
        }
        Ok(FeatureSet { stimuli, channels, width, height, data })
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.width * self.height
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.stimuli, self.channels, self.width, self.height]
    }

    /// Rank-2 tensors (`stimuli x M`) are treated as `M x 1 x 1` maps.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        let (s, c, w, h) = match *shape.as_slice() {
            [s, c, w, h] => (s, c, w, h),
            [s, c] => (s, c, 1, 1),
            _ => {
                return Err(Error::InvalidTensor(format!(
                    "features must be rank 2 or 4, got shape {shape:?}"
                )))
            }
        };
        FeatureSet::new(s, c, w, h, t.into_f64_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(self.shape().to_vec(), self.data.clone()).expect("consistent shape")
    }
}

/// Voxel responses `stimuli x repeats x voxels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub stimuli: usize,
    pub repeats: usize,
    pub voxels: usize,
    pub data: Vec<f64>,
}

impl ResponseSet {
    pub fn new(stimuli: usize, repeats: usize, voxels: usize, data: Vec<f64>) -> Result<Self> {
        let shape = [stimuli, repeats, voxels];
        if data.len() != shape.iter().product::<usize>() || repeats == 0 {
            return Err(Error::shape("responses", &shape, &[data.len()]));
        }
        Ok(ResponseSet { stimuli, repeats, voxels, data })
    }

    pub fn trial(&self, stimulus: usize, repeat: usize) -> &[f64] {
        let start = (stimulus * self.repeats + repeat) * self.voxels;
        &self.data[start..start + self.voxels]
    }

    /// Repeat-averaged responses, `stimuli x voxels`. Repeats are summed in
    /// order and divided by the repeat count.
    pub fn averaged(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.stimuli * self.voxels];
        for s in 0..self.stimuli {
            let row = &mut out[s * self.voxels..(s + 1) * self.voxels];
            for r in 0..self.repeats {
                for (o, &y) in row.iter_mut().zip(self.trial(s, r)) {
                    *o += y;
                }
            }
            let k = self.repeats as f64;
            row.iter_mut().for_each(|o| *o /= k);
        }
        out
    }

    /// Rank-2 tensors are a single repeat.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        let (s, r, n) = match *shape.as_slice() {
            [s, r, n] => (s, r, n),
            [s, n] => (s, 1, n),
            _ => {
                return Err(Error::InvalidTensor(format!(
                    "responses must be rank 2 or 3, got shape {shape:?}"
                )))
            }
        };
        ResponseSet::new(s, r, n, t.into_f64_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.stimuli, self.repeats, self.voxels], self.data.clone())
            .expect("consistent shape")
    }
}

/// Per-stimulus localization vectors, `stimuli x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationEmbeddingSet {
    pub stimuli: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LocalizationEmbeddingSet {
    pub fn new(stimuli: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != stimuli * dim {
            return Err(Error::shape("localization", &[stimuli, dim], &[data.len()]));
        }
        Ok(LocalizationEmbeddingSet { stimuli, dim, data })
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [s, l] => LocalizationEmbeddingSet::new(s, l, t.into_f64_vec()),
            ref other => Err(Error::InvalidTensor(format!(
                "localization must be rank 2, got shape {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.stimuli, self.dim], self.data.clone()).expect("consistent shape")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn from_labels(labels: &[Split]) -> Self {
        let mut s = Splits::default();
        for (i, l) in labels.iter().enumerate() {
            s.get_mut(*l).push(i);
        }
        s
    }

    pub fn to_labels(&self, stimuli: usize) -> Result<Vec<Split>> {
        let mut labels: Vec<Option<Split>> = vec![None; stimuli];
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in self.get(split) {
                let slot = labels
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("stimulus index {i} out of range")))?;
                if slot.replace(split).is_some() {
                    return Err(Error::Config(format!("stimulus {i} assigned to two splits")));
                }
            }
        }
        labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Config(format!("stimulus {i} has no split"))))
            .collect()
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureSet,
    pub responses: ResponseSet,
    pub localization: Option<LocalizationEmbeddingSet>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        features: FeatureSet,
        responses: ResponseSet,
        localization: Option<LocalizationEmbeddingSet>,
        splits: Splits,
    ) -> Result<Self> {
        if features.stimuli != responses.stimuli {
            return Err(Error::shape(
                "features vs responses stimulus axis",
                &features.shape(),
                &[responses.stimuli, responses.repeats, responses.voxels],
            ));
        }
        if let Some(loc) = &localization {
            if loc.stimuli != features.stimuli {
                return Err(Error::shape(
                    "features vs localization stimulus axis",
                    &features.shape(),
                    &[loc.stimuli, loc.dim],
                ));
            }
        }
        splits.to_labels(features.stimuli)?;
        Ok(Dataset { features, responses, localization, splits })
    }

    pub fn stimuli(&self) -> usize {
        self.features.stimuli
    }

    pub fn voxels(&self) -> usize {
        self.responses.voxels
    }

    /// Writes tensors and `manifest.json` into `dir`, returning the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(&self.features.to_tensor(), dir.join("features.vxt"))?;
        write_tensor(&self.responses.to_tensor(), dir.join("responses.vxt"))?;
        let localization = match &self.localization {
            Some(loc) => {
                write_tensor(&loc.to_tensor(), dir.join("localization.vxt"))?;
                Some(PathBuf::from("localization.vxt"))
            }
            None => None,
        };
        let manifest = DatasetManifest {
            features: "features.vxt".into(),
            responses: "responses.vxt".into(),
            localization,
            repeats: self.responses.repeats,
            split: self.splits.to_labels(self.stimuli())?,
            stimuli: self.stimuli(),
            voxels: self.voxels(),
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    manifest.validate()?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let features = FeatureSet::from_tensor(read_tensor(resolve(&manifest.features))?)?;
    let responses = ResponseSet::from_tensor(read_tensor(resolve(&manifest.responses))?)?;
    let localization = match &manifest.localization {
        Some(p) => Some(LocalizationEmbeddingSet::from_tensor(read_tensor(resolve(p))?)?),
        None => None,
    };

    let declared = [manifest.stimuli, manifest.repeats, manifest.voxels];
    let found = [responses.stimuli, responses.repeats, responses.voxels];
    if declared != found {
        return Err(Error::shape("manifest vs responses", &declared, &found));
    }
    if features.stimuli != manifest.stimuli {
        return Err(Error::shape(
            "features vs responses stimulus axis",
            &features.shape(),
            &found,
        ));
    }
    Dataset::new(features, responses, localization, Splits::from_labels(&manifest.split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_tensor_is_22_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vxt");
        write_tensor(&Tensor::from_f64(vec![1], vec![7.0]).unwrap(), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 22);
    }

    #[test]
    fn f32_header_and_payload() {
        let t = Tensor::from_f32(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"VXT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert_eq!(bytes.len() - 22, 24);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(Tensor::from_f64(vec![], vec![]).is_err());
        assert!(Tensor::from_f64(vec![0], vec![]).is_err());
    }

    #[test]
    fn bad_magic() {
        let err = Tensor::from_bytes(b"XXXX\x02\x01", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor::from_f64(vec![10], vec![0.5; 10]).unwrap();
        let mut bytes = t.to_bytes();
        bytes.truncate(bytes.len() - 8);
        let err = Tensor::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Length { expected: 80, found: 72, .. }));
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = Tensor::from_f64(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[4] = 9;
        let err = Tensor::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDtype { code: 9, .. }));
    }

    #[test]
    fn averaged_is_mean_of_repeats() {
        let r = ResponseSet::new(2, 3, 2, vec![1., 2., 3., 4., 5., 6., 0., 0., 3., 3., 6., 9.]).unwrap();
        assert_eq!(r.averaged(), vec![3., 4., 3., 4.]);
    }

    #[test]
    fn split_labels_reject_overlap() {
        let s = Splits { train: vec![0, 1], val: vec![1], test: vec![2] };
        assert!(s.to_labels(3).is_err());
    }
}
