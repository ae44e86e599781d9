//! Volume containers and their on-disk formats.
//!
//! Volumes are `(H, W, D)` grids stored row-major with D fastest. Network
//! tensors use `(N, C, D, H, W)` with W fastest, so conversions between the
//! two transpose the spatial axes.
//!
//! Two file formats are read:
//!
//! - VVOL, the native format: `"VVOL1\n"`, then little-endian `u32 ndim = 3`,
//!   `u32 dims[3]` (H, W, D), `u8 dtype` (0 = f32 intensities, 1 = u16
//!   labels), `f32 spacing[3]`, then the payload with D fastest.
//! - Single-file NIfTI-1 (`n+1`), datatypes uint8, int16 and float32.
//!   Orientation fields are ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const VVOL_MAGIC: &[u8; 6] = b"VVOL1\n";
const VVOL_HEADER_LEN: usize = 6 + 4 + 12 + 1 + 12;
const NIFTI_HEADER_LEN: usize = 348;

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("truncated payload: header needs {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolioError + '_ {
    move |source| VolioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_dims(dims: [usize; 3]) -> Result<usize, VolioError> {
    if dims.contains(&0) {
        return Err(VolioError::Validation(format!("dims {dims:?} contain an empty axis")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolioError::Validation(format!("dims {dims:?} overflow")))
}

fn check_spacing(spacing: [f32; 3]) -> Result<(), VolioError> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolioError::Validation(format!("spacing {spacing:?} must be finite and positive")))
    }
}

/// Intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolioError> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != n {
            return Err(VolioError::Validation(format!(
                "{} intensities for dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolioError::Validation(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self, VolioError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Volume::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.index(h, w, d)]
    }

    /// `(1, 1, D, H, W)` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [hn, wn, dn] = self.dims;
        Tensor::from_fn([1, 1, dn, hn, wn], |[_, _, d, h, w]| self.get(h, w, d))
    }

    /// Replace intensities, keeping dims and spacing.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, VolioError> {
        Volume::new(self.dims, self.spacing, data)
    }
}

/// Integer label volume, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f32; 3],
    num_classes: usize,
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], num_classes: usize, data: Vec<u32>) -> Result<Self, VolioError> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if num_classes < 2 {
            return Err(VolioError::Validation(format!("num_classes {num_classes} < 2")));
        }
        if data.len() != n {
            return Err(VolioError::Validation(format!(
                "{} labels for dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(VolioError::Validation(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            num_classes,
            data,
        })
    }

    /// Like [`LabelVolume::new`] with the class count inferred as
    /// `max(max_label + 1, 2)`.
    pub fn infer_classes(dims: [usize; 3], spacing: [f32; 3], data: Vec<u32>) -> Result<Self, VolioError> {
        let l = data.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
        LabelVolume::new(dims, spacing, l, data)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        num_classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> u32,
    ) -> Result<Self, VolioError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        LabelVolume::new(dims, spacing, num_classes, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u32 {
        self.data[self.index(h, w, d)]
    }

    /// Same labels with a different class count (must still bound every
    /// label).
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self, VolioError> {
        LabelVolume::new(self.dims, self.spacing, num_classes, self.data.clone())
    }

    /// Per-voxel channel argmax of a `(1, L, D, H, W)` tensor. Ties go to the
    /// lowest class index.
    pub fn from_argmax(probs: &Tensor, spacing: [f32; 3]) -> Result<Self, VolioError> {
        let [n, l, dn, hn, wn] = probs.shape();
        if n != 1 {
            return Err(VolioError::Validation(format!("argmax expects batch 1, got {n}")));
        }
        let len = dn * hn * wn;
        let src = probs.data();
        let dims = [hn, wn, dn];
        let mut data = vec![0u32; len];
        for d in 0..dn {
            for h in 0..hn {
                for w in 0..wn {
                    let v = (d * hn + h) * wn + w;
                    let mut best = 0usize;
                    let mut best_val = src[v];
                    for c in 1..l {
                        let x = src[c * len + v];
                        if x > best_val {
                            best = c;
                            best_val = x;
                        }
                    }
                    data[(h * wn + w) * dn + d] = best as u32;
                }
            }
        }
        LabelVolume::new(dims, spacing, l.max(2), data)
    }
}

/// Either kind of volume, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Intensity(Volume),
    Labels(LabelVolume),
}

impl AnyVolume {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            AnyVolume::Intensity(v) => v.dims(),
            AnyVolume::Labels(v) => v.dims(),
        }
    }
}

/// Borrowed view accepted by [`save_volume`].
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Intensity(&'a Volume),
    Labels(&'a LabelVolume),
}

impl<'a> From<&'a Volume> for VolumeRef<'a> {
    fn from(v: &'a Volume) -> Self {
        VolumeRef::Intensity(v)
    }
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Labels(v)
    }
}

impl<'a> From<&'a AnyVolume> for VolumeRef<'a> {
    fn from(v: &'a AnyVolume) -> Self {
        match v {
            AnyVolume::Intensity(v) => VolumeRef::Intensity(v),
            AnyVolume::Labels(v) => VolumeRef::Labels(v),
        }
    }
}

/// Parsed VVOL header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub dtype: u8,
    pub spacing: [f32; 3],
}

impl VolumeHeader {
    pub const DTYPE_F32: u8 = 0;
    pub const DTYPE_U16: u8 = 1;

    fn scalar_size(&self) -> usize {
        if self.dtype == Self::DTYPE_F32 {
            4
        } else {
            2
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(VVOL_MAGIC);
        out.extend_from_slice(&3u32.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.dtype);
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }

    fn parse(bytes: &[u8]) -> Result<Self, VolioError> {
        if bytes.len() < VVOL_HEADER_LEN || &bytes[..6] != VVOL_MAGIC {
            return Err(VolioError::Format("missing or short VVOL header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let ndim = u32_at(6);
        if ndim != 3 {
            return Err(VolioError::Format(format!("ndim {ndim}, expected 3")));
        }
        let dims = [u32_at(10) as usize, u32_at(14) as usize, u32_at(18) as usize];
        let dtype = bytes[22];
        if dtype > 1 {
            return Err(VolioError::Format(format!("dtype code {dtype} not in {{0, 1}}")));
        }
        let spacing = [f32_at(23), f32_at(27), f32_at(31)];
        check_dims(dims).map_err(|e| VolioError::Format(e.to_string()))?;
        check_spacing(spacing).map_err(|e| VolioError::Format(e.to_string()))?;
        Ok(VolumeHeader { dims, dtype, spacing })
    }
}

/// Write a volume as VVOL. Labels must fit the 16-bit label dtype.
pub fn save_volume<'a>(v: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>) -> Result<(), VolioError> {
    let path = path.as_ref();
    let bytes = encode_vvol(v.into())?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

/// Serialize to VVOL bytes.
pub fn encode_vvol(v: VolumeRef<'_>) -> Result<Vec<u8>, VolioError> {
    let mut out = Vec::new();
    match v {
        VolumeRef::Intensity(v) => {
            check_dims(v.dims)?;
            let header = VolumeHeader {
                dims: v.dims,
                dtype: VolumeHeader::DTYPE_F32,
                spacing: v.spacing,
            };
            out.reserve(VVOL_HEADER_LEN + 4 * v.data.len());
            header.write(&mut out);
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeRef::Labels(v) => {
            check_dims(v.dims)?;
            if let Some(bad) = v.data.iter().find(|&&l| l > u16::MAX as u32) {
                return Err(VolioError::Validation(format!("label {bad} exceeds the 16-bit label dtype")));
            }
            let header = VolumeHeader {
                dims: v.dims,
                dtype: VolumeHeader::DTYPE_U16,
                spacing: v.spacing,
            };
            out.reserve(VVOL_HEADER_LEN + 2 * v.data.len());
            header.write(&mut out);
            for &x in &v.data {
                out.extend_from_slice(&(x as u16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Read a VVOL or single-file NIfTI-1 volume. NIfTI files always load as
/// intensities; use [`load_labels`] to read a NIfTI label map.
pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume, VolioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, false)
}

/// Read an intensity volume (VVOL dtype 0 or any supported NIfTI datatype).
pub fn load_intensity(path: impl AsRef<Path>) -> Result<Volume, VolioError> {
    match load_volume(path)? {
        AnyVolume::Intensity(v) => Ok(v),
        AnyVolume::Labels(_) => Err(VolioError::Format("expected intensities, found a label volume".into())),
    }
}

/// Read a label volume (VVOL dtype 1 or integer NIfTI).
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    match decode(&bytes, true)? {
        AnyVolume::Labels(v) => Ok(v),
        AnyVolume::Intensity(_) => Err(VolioError::Format("expected labels, found an intensity volume".into())),
    }
}

/// Decode VVOL or NIfTI bytes. With `labels`, NIfTI integer data becomes a
/// label volume.
pub fn decode(bytes: &[u8], labels: bool) -> Result<AnyVolume, VolioError> {
    if bytes.starts_with(VVOL_MAGIC) {
        return decode_vvol(bytes);
    }
    if bytes.len() >= NIFTI_HEADER_LEN && &bytes[344..348] == b"n+1\0" {
        return decode_nifti(bytes, labels);
    }
    Err(VolioError::Format("neither a VVOL nor a single-file NIfTI-1 header".into()))
}

fn decode_vvol(bytes: &[u8]) -> Result<AnyVolume, VolioError> {
    let header = VolumeHeader::parse(bytes)?;
    let n: usize = header.dims.iter().product();
    let expected = VVOL_HEADER_LEN + n * header.scalar_size();
    if bytes.len() < expected {
        return Err(VolioError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VolioError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[VVOL_HEADER_LEN..];
    if header.dtype == VolumeHeader::DTYPE_F32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(AnyVolume::Intensity(Volume::new(header.dims, header.spacing, data)?))
    } else {
        let data = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as u32)
            .collect();
        Ok(AnyVolume::Labels(LabelVolume::infer_classes(header.dims, header.spacing, data)?))
    }
}

/// NIfTI-1 datatype codes accepted for ingestion.
const NIFTI_UINT8: i16 = 2;
const NIFTI_INT16: i16 = 4;
const NIFTI_FLOAT32: i16 = 16;

fn decode_nifti(bytes: &[u8], labels: bool) -> Result<AnyVolume, VolioError> {
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348;
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348;
    if !le && !be {
        return Err(VolioError::Format("NIfTI sizeof_hdr is not 348".into()));
    }
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolioError::Format(format!("NIfTI dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = i16_at(42 + 2 * a);
        if v < 1 {
            return Err(VolioError::Format(format!("NIfTI dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(VolioError::Unsupported("NIfTI volumes with more than three non-singleton axes".into()));
        }
    }
    let datatype = i16_at(70);
    let size = match datatype {
        NIFTI_UINT8 => 1,
        NIFTI_INT16 => 2,
        NIFTI_FLOAT32 => 4,
        other => return Err(VolioError::Unsupported(format!("NIfTI datatype {other}"))),
    };
    let mut spacing = [1.0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a).abs();
        if v.is_finite() && v > 0.0 {
            *s = v;
        }
    }
    let vox_offset = f32_at(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_LEN as f32) {
        return Err(VolioError::Format(format!("NIfTI vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let n: usize = dims.iter().product();
    let expected = offset + n * size;
    if bytes.len() < expected {
        return Err(VolioError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[offset..expected];
    let raw: Vec<f64> = match datatype {
        NIFTI_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        NIFTI_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b: [u8; 2] = c.try_into().unwrap();
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f64
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                (if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .collect(),
    };

    // NIfTI stores x fastest; volumes store D (the third axis) fastest.
    let [nx, ny, nz] = dims;
    let reorder = |f: &dyn Fn(f64) -> Result<(), VolioError>| -> Result<Vec<usize>, VolioError> {
        let mut order = Vec::with_capacity(n);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let i = x + nx * (y + ny * z);
                    f(raw[i])?;
                    order.push(i);
                }
            }
        }
        Ok(order)
    };

    if labels {
        if datatype == NIFTI_FLOAT32 {
            return Err(VolioError::Unsupported("float32 NIfTI label maps".into()));
        }
        let order = reorder(&|v| {
            if v < 0.0 {
                Err(VolioError::Validation(format!("negative label {v}")))
            } else {
                Ok(())
            }
        })?;
        let data = order.into_iter().map(|i| raw[i] as u32).collect();
        return Ok(AnyVolume::Labels(LabelVolume::infer_classes(dims, spacing, data)?));
    }

    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let (slope, inter) = if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        (slope, inter)
    } else {
        (1.0, 0.0)
    };
    let order = reorder(&|_| Ok(()))?;
    let data = order.into_iter().map(|i| (raw[i] * slope + inter) as f32).collect();
    Ok(AnyVolume::Intensity(Volume::new(dims, spacing, data)?))
}

/// Build a minimal single-file NIfTI-1 image (little-endian). Used to
/// produce ingestion fixtures; this crate does not otherwise write NIfTI.
pub fn nifti_fixture(dims: [usize; 3], datatype: i16, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (a, d) in dims.iter().enumerate() {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(*d as i16).to_le_bytes());
    }
    for a in 3..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    let bitpix: i16 = match datatype {
        NIFTI_UINT8 => 8,
        NIFTI_INT16 => 16,
        _ => 32,
    };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for a in 0..4 {
        h[76 + 4 * a..80 + 4 * a].copy_from_slice(&1f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

/// Z-score normalization over all voxels.
pub fn zscore_normalize(v: &Volume) -> Result<Volume, VolioError> {
    if v.len() < 2 {
        return Err(VolioError::Degenerate("z-score needs at least two voxels".into()));
    }
    let n = v.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(VolioError::Degenerate("zero intensity variance".into()));
    }
    let std = var.sqrt();
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    v.with_data(data)
}

/// `(1, L, D, H, W)` indicator tensor of a label volume.
pub fn one_hot(y: &LabelVolume) -> Tensor {
    let [hn, wn, dn] = y.dims;
    let l = y.num_classes;
    let len = hn * wn * dn;
    let mut data = vec![0.0f32; l * len];
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let label = y.get(h, w, d) as usize;
                data[label * len + (d * hn + h) * wn + w] = 1.0;
            }
        }
    }
    Tensor::from_vec([1, l, dn, hn, wn], data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_two_values() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 2.0]).unwrap();
        assert_eq!(zscore_normalize(&v).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zscore_constant_fails() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![3.0; 8]).unwrap();
        assert!(matches!(zscore_normalize(&v), Err(VolioError::Degenerate(_))));
    }

    #[test]
    fn one_hot_single_voxel() {
        let y = LabelVolume::new([1, 1, 1], [1.0; 3], 5, vec![3]).unwrap();
        let t = one_hot(&y);
        assert_eq!(t.shape(), [1, 5, 1, 1, 1]);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn label_bound_enforced() {
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], 3, vec![0, 3]).is_err());
        let y = LabelVolume::new([1, 1, 1], [1.0; 3], 70001, vec![70000]).unwrap();
        assert!(matches!(encode_vvol((&y).into()), Err(VolioError::Validation(_))));
    }

    #[test]
    fn empty_dims_rejected() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
    }

    #[test]
    fn header_claims_more_than_payload() {
        let v = Volume::new([2, 2, 2], [1.0; 3], (0..8).map(|i| i as f32).collect()).unwrap();
        let mut bytes = encode_vvol((&v).into()).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode(&bytes, false), Err(VolioError::Truncated { .. })));
    }

    #[test]
    fn corrupt_magic() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_vvol((&v).into()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, false), Err(VolioError::Format(_))));
        let mut bytes = encode_vvol((&v).into()).unwrap();
        bytes[22] = 7;
        assert!(matches!(decode(&bytes, false), Err(VolioError::Format(_))));
    }

    #[test]
    fn nifti_axes_are_reordered() {
        // x fastest on disk: value = x + 10 y + 100 z
        let dims = [2, 3, 4];
        let mut payload = Vec::new();
        for z in 0..4 {
            for y in 0..3 {
                for x in 0..2 {
                    payload.extend_from_slice(&((x + 10 * y + 100 * z) as f32).to_le_bytes());
                }
            }
        }
        let bytes = nifti_fixture(dims, NIFTI_FLOAT32, &payload);
        let AnyVolume::Intensity(v) = decode(&bytes, false).unwrap() else {
            panic!("expected intensities")
        };
        assert_eq!(v.dims(), [2, 3, 4]);
        assert_eq!(v.get(1, 2, 3), 321.0);
        assert_eq!(v.get(0, 1, 2), 210.0);
    }

    #[test]
    fn nifti_unsupported_datatype() {
        let bytes = nifti_fixture([1, 1, 1], 64, &[0u8; 8]);
        assert!(matches!(decode(&bytes, false), Err(VolioError::Unsupported(_))));
    }

    #[test]
    fn nifti_int16_labels() {
        let mut payload = Vec::new();
        for v in [0i16, 1, 2, 1] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = nifti_fixture([4, 1, 1], NIFTI_INT16, &payload);
        let AnyVolume::Labels(y) = decode(&bytes, true).unwrap() else {
            panic!("expected labels")
        };
        assert_eq!(y.data(), &[0, 1, 2, 1]);
        assert_eq!(y.num_classes(), 3);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::full([1, 4, 1, 1, 1], 0.25);
        let y = LabelVolume::from_argmax(&t, [1.0; 3]).unwrap();
        assert_eq!(y.data(), &[0]);
    }
}
