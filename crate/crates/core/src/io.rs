//! File formats: the RTEN tensor container, binary PGM masks and PPM renders.
//!
//! RTEN layout (little endian): `"RTEN"`, `u16` version (1), `u8` dtype
//! (0 f32, 1 f64, 2 complex as interleaved f32 pairs, 3 u8), `u8` rank,
//! `rank x u64` dims, then the row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::{Complex32, Complex64};
use thiserror::Error;

use crate::model::PolarMask;

pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";
pub const RTEN_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?} at offset 0 (expected \"RTEN\")")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported version {found} at offset 4")]
    BadVersion { path: PathBuf, found: u16 },
    #[error("{path}: unknown dtype code {found} at offset 6")]
    BadDtype { path: PathBuf, found: u8 },
    #[error("{path}: truncated {section}: expected {expected} bytes from offset {offset}, found {actual}")]
    Truncated {
        path: PathBuf,
        section: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload ending at offset {offset}")]
    Trailing { path: PathBuf, offset: usize, extra: usize },
    #[error("{path}: expected {expected}, found {found}")]
    Unexpected { path: PathBuf, expected: String, found: String },
    #[error("{path}: malformed image: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    C64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::F64 => 1,
            Self::C64 => 2,
            Self::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::F32,
            1 => Self::F64,
            2 => Self::C64,
            3 => Self::U8,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::C64 => 8,
            Self::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
            Self::C64 => "c64",
            Self::U8 => "u8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RtenData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex32>),
    U8(Vec<u8>),
}

impl RtenData {
    pub fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::F64(_) => Dtype::F64,
            Self::C64(_) => Dtype::C64,
            Self::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::C64(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory RTEN tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Rten {
    pub dims: Vec<usize>,
    pub data: RtenData,
}

impl Rten {
    pub fn f32(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        Self::checked(dims.into(), RtenData::F32(data))
    }

    pub fn f64(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Self::checked(dims.into(), RtenData::F64(data))
    }

    pub fn c64(dims: impl Into<Vec<usize>>, data: Vec<Complex32>) -> Self {
        Self::checked(dims.into(), RtenData::C64(data))
    }

    /// Double-precision complex tensor: f64 with a trailing re/im axis of 2.
    pub fn complex_f64(dims: &[usize], data: &[Complex64]) -> Self {
        let mut full = dims.to_vec();
        full.push(2);
        Self::f64(full, data.iter().flat_map(|z| [z.re, z.im]).collect())
    }

    pub fn u8(dims: impl Into<Vec<usize>>, data: Vec<u8>) -> Self {
        Self::checked(dims.into(), RtenData::U8(data))
    }

    fn checked(dims: Vec<usize>, data: RtenData) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "RTEN dims {dims:?} vs payload");
        assert!(dims.len() <= u8::MAX as usize, "RTEN rank too large");
        Self { dims, data }
    }

    pub fn header_len(&self) -> usize {
        8 + 8 * self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(self.header_len() + self.data.len() * dtype.size());
        out.extend_from_slice(RTEN_MAGIC);
        out.extend_from_slice(&RTEN_VERSION.to_le_bytes());
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            RtenData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RtenData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RtenData::C64(v) => v.iter().for_each(|x| {
                out.extend_from_slice(&x.re.to_le_bytes());
                out.extend_from_slice(&x.im.to_le_bytes());
            }),
            RtenData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses a complete RTEN byte buffer; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |section, offset: usize, expected| IoError::Truncated {
            path: path.to_path_buf(),
            section,
            offset,
            expected,
            actual: bytes.len().saturating_sub(offset),
        };
        if bytes.len() < 8 {
            return Err(truncated("header", 0, 8));
        }
        if &bytes[..4] != RTEN_MAGIC {
            return Err(IoError::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..4].to_vec(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RTEN_VERSION {
            return Err(IoError::BadVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let dtype = Dtype::from_code(bytes[6]).ok_or(IoError::BadDtype {
            path: path.to_path_buf(),
            found: bytes[6],
        })?;
        let ndim = bytes[7] as usize;
        if bytes.len() < 8 + 8 * ndim {
            return Err(truncated("dims", 8, 8 * ndim));
        }
        let dims: Vec<usize> = bytes[8..8 + 8 * ndim]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let start = 8 + 8 * ndim;
        let expected = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| IoError::Unexpected {
                path: path.to_path_buf(),
                expected: "addressable payload".into(),
                found: format!("dims {dims:?}"),
            })?;
        let payload = &bytes[start..];
        if payload.len() < expected {
            return Err(truncated("payload", start, expected));
        }
        if payload.len() > expected {
            return Err(IoError::Trailing {
                path: path.to_path_buf(),
                offset: start + expected,
                extra: payload.len() - expected,
            });
        }
        let f32s = || payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let data = match dtype {
            Dtype::F32 => RtenData::F32(f32s().collect()),
            Dtype::F64 => RtenData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::C64 => {
                let flat: Vec<f32> = f32s().collect();
                RtenData::C64(flat.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect())
            }
            Dtype::U8 => RtenData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    fn unexpected(&self, path: &Path, want: Dtype) -> IoError {
        IoError::Unexpected {
            path: path.to_path_buf(),
            expected: want.name().into(),
            found: self.data.dtype().name().into(),
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            RtenData::F32(v) => Ok((self.dims, v)),
            _ => Err(self.unexpected(path, Dtype::F32)),
        }
    }

    /// Complex samples from a c64 tensor or from [`Rten::complex_f64`] layout.
    pub fn into_complex(self, path: &Path) -> Result<(Vec<usize>, Vec<Complex64>)> {
        match self.data {
            RtenData::C64(v) => Ok((self.dims, v.iter().map(|z| Complex64::new(z.re.into(), z.im.into())).collect())),
            RtenData::F64(v) if self.dims.last() == Some(&2) => {
                let dims = self.dims[..self.dims.len() - 1].to_vec();
                Ok((dims, v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()))
            }
            _ => Err(IoError::Unexpected {
                path: path.to_path_buf(),
                expected: "c64, or f64 with a trailing axis of 2".into(),
                found: format!("{} dims {:?}", self.data.dtype().name(), self.dims),
            }),
        }
    }

    pub fn into_c64(self, path: &Path) -> Result<(Vec<usize>, Vec<Complex32>)> {
        match self.data {
            RtenData::C64(v) => Ok((self.dims, v)),
            _ => Err(self.unexpected(path, Dtype::C64)),
        }
    }
}

pub fn rten_write(path: &Path, tensor: &Rten) -> Result<()> {
    write_bytes(path, &tensor.to_bytes())
}

pub fn rten_read(path: &Path) -> Result<Rten> {
    Rten::from_bytes(&read_bytes(path)?, path)
}

/// Reads an f32 tensor and checks its dims.
pub fn rten_read_f32(path: &Path, dims: &[usize]) -> Result<Vec<f32>> {
    let (found, data) = rten_read(path)?.into_f32(path)?;
    if found != dims {
        return Err(IoError::Unexpected {
            path: path.to_path_buf(),
            expected: format!("dims {dims:?}"),
            found: format!("dims {found:?}"),
        });
    }
    Ok(data)
}

pub fn mask_to_pgm(mask: &PolarMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.cols(), mask.rows()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, mask: &PolarMask) -> Result<()> {
    write_bytes(path, &mask_to_pgm(mask))
}

/// Arbitrary grey levels, for renderings that are not binary masks.
pub fn write_gray_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height, "PGM raster size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    write_bytes(path, &out)
}

pub fn read_gray_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let (w, h, raster) = pnm_header(&bytes, "P5", path)?;
    if raster.len() != w * h {
        return Err(IoError::Image {
            path: path.to_path_buf(),
            reason: format!("raster has {} bytes, expected {}", raster.len(), w * h),
        });
    }
    Ok((w, h, raster.to_vec()))
}

/// Splits a binary PNM header (`magic w h maxval`), skipping comments.
fn pnm_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |reason: String| IoError::Image {
        path: path.to_path_buf(),
        reason,
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(bad(format!("magic {:?}, expected {magic}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header number {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((w, h, &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn mask_from_pgm(bytes: &[u8], path: &Path) -> Result<PolarMask> {
    let (w, h, raster) = pnm_header(bytes, "P5", path)?;
    if raster.len() != w * h {
        return Err(IoError::Image {
            path: path.to_path_buf(),
            reason: format!("raster has {} bytes, expected {}", raster.len(), w * h),
        });
    }
    let mut data = Vec::with_capacity(raster.len());
    for (i, &v) in raster.iter().enumerate() {
        data.push(match v {
            255 => 1,
            0 => 0,
            other => {
                return Err(IoError::Image {
                    path: path.to_path_buf(),
                    reason: format!("pixel {i} has value {other}, expected 0 or 255"),
                })
            }
        });
    }
    Ok(PolarMask::new(h, w, data).expect("validated binary values"))
}

pub fn read_pgm(path: &Path) -> Result<PolarMask> {
    mask_from_pgm(&read_bytes(path)?, path)
}

/// Binary RGB image.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    assert_eq!(rgb.len(), width * height, "PPM raster size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    rgb.iter().for_each(|p| out.extend_from_slice(p));
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bytes = read_bytes(path)?;
    let (w, h, raster) = pnm_header(&bytes, "P6", path)?;
    if raster.len() != 3 * w * h {
        return Err(IoError::Image {
            path: path.to_path_buf(),
            reason: format!("raster has {} bytes, expected {}", raster.len(), 3 * w * h),
        });
    }
    Ok((w, h, raster.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
}
