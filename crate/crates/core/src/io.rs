//! Volume file I/O.
//!
//! Two formats are supported:
//!
//! * a NIfTI-1 single-file subset (`.nii`, optionally gzip-compressed as
//!   `.nii.gz`) with datatypes uint8, int16, int32, float32 and float64,
//!   three spatial dimensions, and `scl_slope`/`scl_inter` applied on read;
//! * a raw little-endian payload (`.raw`) with a JSON sidecar of the same
//!   stem holding `{dims, spacing, origin, dtype}`.
//!
//! Label volumes are written with the narrowest integer type that holds the
//! largest ID. Scalar volumes are written as float32 when every value is
//! exactly representable in single precision and as float64 otherwise, so
//! a write/read cycle never perturbs a stored intensity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AnyVolume, GridMeta, LabelVolume, ScalarVolume, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Dtype {
    pub fn nifti_code(self) -> i16 {
        match self {
            Dtype::Uint8 => 2,
            Dtype::Int16 => 4,
            Dtype::Int32 => 8,
            Dtype::Float32 => 16,
            Dtype::Float64 => 64,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Dtype::Uint8,
            4 => Dtype::Int16,
            8 => Dtype::Int32,
            16 => Dtype::Float32,
            64 => Dtype::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Int16 => 2,
            Dtype::Int32 | Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Dtype::Uint8 | Dtype::Int16 | Dtype::Int32)
    }
}

/// JSON sidecar for the raw format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti { gzip: bool },
    Raw,
}

fn detect_format(path: &Path) -> Format {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if name.ends_with(".raw") || name.ends_with(".json") {
        Format::Raw
    } else {
        Format::Nifti {
            gzip: name.ends_with(".gz"),
        }
    }
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

/// Decoded header fields the reader cares about.
#[derive(Debug)]
struct NiftiHeader {
    little_endian: bool,
    meta: GridMeta,
    dtype: Dtype,
    vox_offset: usize,
    slope: f64,
    inter: f64,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl ByteReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let le = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(Error::format(path, "sizeof_hdr is not 348"));
    };
    let r = ByteReader { bytes, le };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim} is out of range")));
    }
    let mut dims = [1usize; 3];
    for a in 0..(ndim as usize) {
        let d = r.i16(42 + 2 * a);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{}] = {d}", a + 1)));
        }
        if a < 3 {
            dims[a] = d as usize;
        } else if d != 1 {
            return Err(Error::format(path, "only 3D volumes are supported"));
        }
    }
    let dtype = Dtype::from_nifti_code(r.i16(70))?;
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * a).abs() as f64;
        *s = if p > 0.0 { p } else { 1.0 };
    }
    let qform = r.i16(252);
    let sform = r.i16(254);
    let origin = if sform > 0 {
        [r.f32(292) as f64, r.f32(308) as f64, r.f32(324) as f64]
    } else if qform > 0 {
        [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64]
    } else {
        [0.0; 3]
    };
    let vox_offset = r.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let meta = GridMeta::new(dims, spacing, origin)?;
    Ok(NiftiHeader {
        little_endian: le,
        meta,
        dtype,
        vox_offset,
        slope,
        inter,
    })
}

/// Raw values of the payload, widened without scaling.
enum Payload {
    Int(Vec<i64>),
    Float(Vec<f64>),
}

fn decode_payload(bytes: &[u8], dtype: Dtype, count: usize, le: bool) -> Result<Payload> {
    let needed = count * dtype.size();
    if bytes.len() < needed {
        return Err(Error::DimensionMismatch {
            expected: count,
            found: bytes.len() / dtype.size(),
        });
    }
    let bytes = &bytes[..needed];
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            bytes.chunks_exact($n).map(|c| {
                let a: [u8; $n] = c.try_into().unwrap();
                if le {
                    <$t>::from_le_bytes(a)
                } else {
                    <$t>::from_be_bytes(a)
                }
            })
        };
    }
    Ok(match dtype {
        Dtype::Uint8 => Payload::Int(bytes.iter().map(|&b| b as i64).collect()),
        Dtype::Int16 => Payload::Int(conv!(i16, 2).map(|v| v as i64).collect()),
        Dtype::Int32 => Payload::Int(conv!(i32, 4).map(|v| v as i64).collect()),
        Dtype::Float32 => Payload::Float(conv!(f32, 4).map(|v| v as f64).collect()),
        Dtype::Float64 => Payload::Float(conv!(f64, 8).collect()),
    })
}

fn payload_to_volume(
    payload: Payload,
    meta: GridMeta,
    slope: f64,
    inter: f64,
    path: &Path,
) -> Result<AnyVolume> {
    let identity = slope == 0.0 || (slope == 1.0 && inter == 0.0);
    match payload {
        Payload::Int(vals) if identity => {
            if let Some(v) = vals.iter().find(|&&v| v < 0) {
                return Err(Error::format(path, format!("negative label id {v}")));
            }
            Ok(AnyVolume::Label(Volume::from_vec(
                meta,
                vals.into_iter().map(|v| v as u32).collect(),
            )?))
        }
        Payload::Int(vals) => Ok(AnyVolume::Scalar(Volume::from_vec(
            meta,
            vals.into_iter().map(|v| v as f64 * slope + inter).collect(),
        )?)),
        Payload::Float(vals) => {
            let data: Vec<f64> = if identity {
                vals
            } else {
                vals.into_iter().map(|v| v * slope + inter).collect()
            };
            let vol = Volume::from_vec(meta, data)?;
            vol.validate_finite()?;
            Ok(AnyVolume::Scalar(vol))
        }
    }
}

fn read_all(path: &Path, gzip: bool) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    if gzip {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

/// Parses an in-memory NIfTI-1 image (uncompressed or gzip).
pub fn decode_nifti(bytes: &[u8]) -> Result<AnyVolume> {
    let path = Path::new("<memory>");
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut buf = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        return decode_nifti(&buf);
    }
    decode_nifti_at(bytes, path)
}

fn decode_nifti_at(bytes: &[u8], path: &Path) -> Result<AnyVolume> {
    let hdr = parse_header(bytes, path)?;
    let count = hdr.meta.len();
    if bytes.len() < hdr.vox_offset {
        return Err(Error::format(path, "vox_offset beyond end of file"));
    }
    let body = &bytes[hdr.vox_offset..];
    if body.len() != count * hdr.dtype.size() {
        return Err(Error::DimensionMismatch {
            expected: count,
            found: body.len() / hdr.dtype.size(),
        });
    }
    let payload = decode_payload(body, hdr.dtype, count, hdr.little_endian)?;
    payload_to_volume(payload, hdr.meta, hdr.slope, hdr.inter, path)
}

/// Reads a volume; integer datatypes without scaling come back as labels.
pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    match detect_format(path) {
        Format::Raw => read_raw(path),
        Format::Nifti { .. } => {
            let bytes = read_all(path, false)?;
            if bytes.starts_with(&[0x1f, 0x8b]) {
                let mut buf = Vec::new();
                GzDecoder::new(&bytes[..])
                    .read_to_end(&mut buf)
                    .map_err(|e| Error::io(path, e))?;
                decode_nifti_at(&buf, path)
            } else {
                decode_nifti_at(&bytes, path)
            }
        }
    }
}

/// Reads any supported volume as intensities (labels are widened to f64).
pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    Ok(match read_volume(path)? {
        AnyVolume::Scalar(v) => v,
        AnyVolume::Label(v) => v.map(|l| l as f64),
    })
}

/// Reads a label volume. Float payloads are accepted only if integral.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match read_volume(path)? {
        AnyVolume::Label(v) => Ok(v),
        AnyVolume::Scalar(v) => {
            if v
                .data()
                .iter()
                .all(|&x| x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64)
            {
                Ok(v.map(|x| x as u32))
            } else {
                Err(Error::format(path, "label volume holds non-integer values"))
            }
        }
    }
}

fn read_raw(path: &Path) -> Result<AnyVolume> {
    let (raw, side) = raw_paths(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: RawSidecar = serde_json::from_str(&text)?;
    let meta = GridMeta::new(sc.dims, sc.spacing, sc.origin)?;
    let bytes = read_all(&raw, false)?;
    if bytes.len() != meta.len() * sc.dtype.size() {
        return Err(Error::DimensionMismatch {
            expected: meta.len(),
            found: bytes.len() / sc.dtype.size(),
        });
    }
    let payload = decode_payload(&bytes, sc.dtype, meta.len(), true)?;
    payload_to_volume(payload, meta, 1.0, 0.0, &raw)
}

fn label_dtype(vol: &LabelVolume) -> Result<Dtype> {
    let max = vol.data().iter().copied().max().unwrap_or(0);
    Ok(if max <= u8::MAX as u32 {
        Dtype::Uint8
    } else if max <= i16::MAX as u32 {
        Dtype::Int16
    } else if max <= i32::MAX as u32 {
        Dtype::Int32
    } else {
        return Err(Error::InvalidArgument(format!(
            "label id {max} does not fit in int32"
        )));
    })
}

fn scalar_dtype(vol: &ScalarVolume) -> Dtype {
    if vol.data().iter().all(|&v| (v as f32) as f64 == v) {
        Dtype::Float32
    } else {
        Dtype::Float64
    }
}

fn encode_payload(vol: &AnyVolume, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.meta().len() * dtype.size());
    match vol {
        AnyVolume::Label(v) => {
            for &l in v.data() {
                match dtype {
                    Dtype::Uint8 => out.push(l as u8),
                    Dtype::Int16 => out.extend_from_slice(&(l as i16).to_le_bytes()),
                    Dtype::Int32 => out.extend_from_slice(&(l as i32).to_le_bytes()),
                    Dtype::Float32 => out.extend_from_slice(&(l as f32).to_le_bytes()),
                    Dtype::Float64 => out.extend_from_slice(&(l as f64).to_le_bytes()),
                }
            }
        }
        AnyVolume::Scalar(v) => {
            for &x in v.data() {
                match dtype {
                    Dtype::Float64 => out.extend_from_slice(&x.to_le_bytes()),
                    _ => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
    }
    out
}

fn put_i16(h: &mut [u8], off: usize, v: i16) {
    h[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(h: &mut [u8], off: usize, v: i32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn nifti_header(meta: &GridMeta, dtype: Dtype) -> Result<Vec<u8>> {
    if meta.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            meta.dims
        )));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, meta.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0); // qfac
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, meta.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    let descrip = b"fuselage";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, meta.origin[a] as f32);
    }
    // srow_x/y/z: diagonal spacing, translation = origin
    for a in 0..3 {
        let base = 280 + 16 * a;
        put_f32(&mut h, base + 4 * a, meta.spacing[a] as f32);
        put_f32(&mut h, base + 12, meta.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

/// Serialises to an in-memory, uncompressed NIfTI-1 image.
pub fn encode_nifti(vol: &AnyVolume) -> Result<Vec<u8>> {
    let meta = vol.meta();
    meta.validate()?;
    let dtype = match vol {
        AnyVolume::Label(v) => label_dtype(v)?,
        AnyVolume::Scalar(v) => {
            v.validate_finite()?;
            scalar_dtype(v)
        }
    };
    let mut bytes = nifti_header(meta, dtype)?;
    bytes.extend(encode_payload(vol, dtype));
    Ok(bytes)
}

pub fn write_volume(vol: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match detect_format(path) {
        Format::Raw => write_raw(vol, path),
        Format::Nifti { gzip } => {
            let bytes = encode_nifti(vol)?;
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            if gzip {
                let mut enc = GzEncoder::new(w, Compression::fast());
                enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
                w = enc.finish().map_err(|e| Error::io(path, e))?;
            } else {
                w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn write_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&AnyVolume::Scalar(vol.clone()), path)
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&AnyVolume::Label(vol.clone()), path)
}

fn write_raw(vol: &AnyVolume, path: &Path) -> Result<()> {
    let meta = vol.meta();
    meta.validate()?;
    let dtype = match vol {
        AnyVolume::Label(v) => label_dtype(v)?,
        AnyVolume::Scalar(v) => {
            v.validate_finite()?;
            scalar_dtype(v)
        }
    };
    let (raw, side) = raw_paths(path);
    let sc = RawSidecar {
        dims: meta.dims,
        spacing: meta.spacing,
        origin: meta.origin,
        dtype,
    };
    std::fs::write(&side, serde_json::to_vec_pretty(&sc)?).map_err(|e| Error::io(&side, e))?;
    std::fs::write(&raw, encode_payload(vol, dtype)).map_err(|e| Error::io(&raw, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize) -> GridMeta {
        GridMeta::with_dims([n; 3]).unwrap()
    }

    #[test]
    fn zeros_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = AnyVolume::Scalar(ScalarVolume::filled(meta(3), 0.0).unwrap());
        for name in ["z.nii", "z.nii.gz", "z.raw"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            assert_eq!(read_volume(&p).unwrap(), v, "{name}");
        }
    }

    #[test]
    fn unit_spacing_is_echoed() {
        let bytes = encode_nifti(&AnyVolume::Scalar(ScalarVolume::filled(meta(2), 1.5).unwrap())).unwrap();
        let back = decode_nifti(&bytes).unwrap();
        assert_eq!(back.meta().spacing, [1.0; 3]);
    }

    /// Fixture assembled byte by byte, independent of the writer.
    #[test]
    fn hand_built_header_with_linear_ramp() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for a in 0..3 {
            h[42 + 2 * a..44 + 2 * a].copy_from_slice(&4i16.to_le_bytes());
        }
        h[70..72].copy_from_slice(&16i16.to_le_bytes()); // float32
        h[72..74].copy_from_slice(&32i16.to_le_bytes());
        for a in 0..3 {
            h[80 + 4 * a..84 + 4 * a].copy_from_slice(&1.0f32.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for i in 0..64u32 {
            h.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let AnyVolume::Scalar(v) = decode_nifti(&h).unwrap() else {
            panic!("expected scalar")
        };
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 4.0);
        assert_eq!(v.get(3, 3, 3), 63.0);
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        h[42..44].copy_from_slice(&2i16.to_be_bytes());
        h[44..46].copy_from_slice(&1i16.to_be_bytes());
        h[46..48].copy_from_slice(&1i16.to_be_bytes());
        h[70..72].copy_from_slice(&4i16.to_be_bytes());
        h[80..84].copy_from_slice(&2.0f32.to_be_bytes());
        h[108..112].copy_from_slice(&352.0f32.to_be_bytes());
        h[112..116].copy_from_slice(&0.5f32.to_be_bytes());
        h[116..120].copy_from_slice(&10.0f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&(-4i16).to_be_bytes());
        h.extend_from_slice(&(6i16).to_be_bytes());
        let AnyVolume::Scalar(v) = decode_nifti(&h).unwrap() else {
            panic!("scaled ints must be intensities")
        };
        assert_eq!(v.data(), &[8.0, 13.0]);
        assert_eq!(v.meta().spacing[0], 2.0);
    }

    #[test]
    fn medulla_label_is_lossless() {
        let mut l = LabelVolume::filled(meta(3), 0).unwrap();
        l.set(1, 1, 1, 175);
        l.set(0, 2, 1, 41);
        let bytes = encode_nifti(&AnyVolume::Label(l.clone())).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), 2);
        assert_eq!(decode_nifti(&bytes).unwrap(), AnyVolume::Label(l));
    }

    #[test]
    fn wide_labels_use_int16() {
        let l = LabelVolume::filled(meta(2), 1000).unwrap();
        let bytes = encode_nifti(&AnyVolume::Label(l.clone())).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), 4);
        assert_eq!(decode_nifti(&bytes).unwrap(), AnyVolume::Label(l));
    }

    #[test]
    fn doubles_roundtrip_bit_exactly() {
        let m = GridMeta::new([3, 2, 2], [0.5, 1.25, 2.0], [-10.0, 3.5, 7.0]).unwrap();
        let v = Volume::from_fn(m, |i, j, k| (i as f64 + 0.1) * (j as f64 - 0.3) / (k as f64 + 3.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.nii.gz");
        write_scalar(&v, &p).unwrap();
        let back = read_scalar(&p).unwrap();
        assert_eq!(back.meta(), v.meta());
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_nifti(&AnyVolume::Scalar(ScalarVolume::filled(meta(2), 1.0).unwrap())).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_nifti(&bytes), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = encode_nifti(&AnyVolume::Scalar(ScalarVolume::filled(meta(2), 1.0).unwrap())).unwrap();
        bytes[70..72].copy_from_slice(&128i16.to_le_bytes()); // RGB24
        assert!(matches!(decode_nifti(&bytes), Err(Error::UnsupportedDatatype(128))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(read_volume("/nonexistent/x.nii"), Err(Error::Io { .. })));
    }

    #[test]
    fn zero_spacing_rejected_before_write() {
        let bad = GridMeta {
            dims: [2; 3],
            spacing: [1.0, 0.0, 1.0],
            origin: [0.0; 3],
        };
        // Volumes cannot be built on an invalid grid, so nothing reaches the writer.
        assert!(ScalarVolume::from_vec(bad, vec![0.0; 8]).is_err());
        assert!(ScalarVolume::filled(meta(2), 1.0).unwrap().with_meta(bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("bad.json"),
            r#"{"dims":[2,2,2],"spacing":[1,0,1],"origin":[0,0,0],"dtype":"float32"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("bad.raw"), vec![0u8; 32]).unwrap();
        assert!(matches!(read_volume(dir.path().join("bad.raw")), Err(Error::InvalidGrid(_))));
    }
}
