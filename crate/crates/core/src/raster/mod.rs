//! Neutral raster and mask file formats, border padding and tiled inference.
//!
//! A raster is stored as two files sharing a stem:
//!
//! * `<stem>.rst.json`, a JSON header with the fields of [`RasterHeader`];
//! * `<stem>.rst.bin`, the payload: `bands * height * width` IEEE-754
//!   float32 values, little-endian, band-sequential (every value of band 0 in
//!   row-major order, then band 1, and so on), with no header or padding.
//!
//! Masks are binary PGM (`P5`) files with maxval 255, written with a single
//! `\n` after each header field: `P5\n<width> <height>\n255\n` followed by one
//! byte per pixel in row-major order, `0` for clear and `255` for cloud.

mod tile;

pub use tile::{
    crop_to, infer_whole, pad_to_multiple, reflect_index, reflect_window, tiled_infer, tiled_infer_with, Engine,
    Rect, Tile, TileOptions, TilePlan,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::metrics::MaskImage;
use crate::tensor::Tensor;

pub const HEADER_SUFFIX: &str = ".rst.json";
pub const PAYLOAD_SUFFIX: &str = ".rst.bin";
pub const DTYPE: &str = "float32";
pub const INTERLEAVE: &str = "band-sequential";
pub const BYTE_ORDER: &str = "little-endian";
/// Band name of single-band probability outputs.
pub const PROBABILITY_BAND: &str = "cloud_probability";

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("raster header error: {0}")]
    Header(String),
    #[error("unsupported raster dtype {0:?}; only float32 is supported")]
    DType(String),
    #[error("raster payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("raster payload has {actual} bytes, more than the {expected} the header describes")]
    Oversized { expected: usize, actual: usize },
    #[error("raster dimensions overflow: {0}")]
    Overflow(String),
    #[error("PGM parse error: {0}")]
    Pgm(String),
    #[error("PGM mask pixel {index} has gray value {value}; only 0 and 255 are allowed")]
    GrayValue { index: usize, value: u8 },
}

/// Structured sidecar describing a raster payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub band_names: Vec<String>,
    pub dtype: String,
    pub interleave: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<f32>,
}

impl RasterHeader {
    pub fn new(height: usize, width: usize, band_names: Vec<String>) -> Self {
        RasterHeader {
            width,
            height,
            bands: band_names.len(),
            band_names,
            dtype: DTYPE.into(),
            interleave: INTERLEAVE.into(),
            byte_order: BYTE_ORDER.into(),
            nodata: None,
        }
    }

    /// Header for `t`, naming bands `b0, b1, ...` when `names` is empty.
    pub fn for_tensor(t: &Tensor, names: &[String]) -> Self {
        let names = if names.is_empty() {
            (0..t.channels()).map(|c| format!("b{c}")).collect()
        } else {
            names.to_vec()
        };
        Self::new(t.height(), t.width(), names)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.dtype != DTYPE {
            return Err(RasterError::DType(self.dtype.clone()));
        }
        if self.interleave != INTERLEAVE {
            return Err(RasterError::Header(format!(
                "interleave must be {INTERLEAVE:?}, got {:?}",
                self.interleave
            )));
        }
        if self.byte_order != BYTE_ORDER {
            return Err(RasterError::Header(format!(
                "byte_order must be {BYTE_ORDER:?}, got {:?}",
                self.byte_order
            )));
        }
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(RasterError::Header(format!(
                "width, height and bands must be at least 1, got {}x{}x{}",
                self.bands, self.height, self.width
            )));
        }
        if self.band_names.len() != self.bands {
            return Err(RasterError::Header(format!(
                "{} band names for {} bands",
                self.band_names.len(),
                self.bands
            )));
        }
        if let Some(d) = self.nodata {
            if !d.is_finite() {
                return Err(RasterError::Header("nodata must be finite".into()));
            }
        }
        self.payload_len().map(|_| ())
    }

    /// Payload size in bytes, checked for overflow.
    pub fn payload_len(&self) -> Result<usize, RasterError> {
        self.bands
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.width))
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or_else(|| {
                RasterError::Overflow(format!(
                    "{} bands of {}x{} float32 values",
                    self.bands, self.height, self.width
                ))
            })
    }
}

pub fn encode_header(h: &RasterHeader) -> String {
    let mut s = serde_json::to_string_pretty(h).expect("header serializes");
    s.push('\n');
    s
}

pub fn decode_header(text: &str) -> Result<RasterHeader, RasterError> {
    let h: RasterHeader = serde_json::from_str(text).map_err(|e| RasterError::Header(e.to_string()))?;
    h.validate()?;
    Ok(h)
}

pub fn encode_payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_payload(h: &RasterHeader, bytes: &[u8]) -> Result<Tensor, RasterError> {
    h.validate()?;
    let expected = h.payload_len()?;
    if bytes.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RasterError::Oversized {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(h.bands, h.height, h.width, data).map_err(|e| RasterError::Header(e.to_string()))
}

/// Header and payload paths for `path`, which may be the stem or either file.
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(HEADER_SUFFIX)
        .or_else(|| s.strip_suffix(PAYLOAD_SUFFIX))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}{HEADER_SUFFIX}")),
        PathBuf::from(format!("{stem}{PAYLOAD_SUFFIX}")),
    )
}

pub fn write_raster(path: &Path, header: &RasterHeader, t: &Tensor) -> Result<()> {
    header.validate()?;
    if (header.bands, header.height, header.width) != (t.channels(), t.height(), t.width()) {
        return Err(Error::dim(format!(
            "header describes {}x{}x{} but the tensor is {}x{}x{}",
            header.bands,
            header.height,
            header.width,
            t.channels(),
            t.height(),
            t.width()
        )));
    }
    let (hp, bp) = raster_paths(path);
    std::fs::write(&hp, encode_header(header)).map_err(|e| Error::io(&hp, e))?;
    std::fs::write(&bp, encode_payload(t)).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<(RasterHeader, Tensor)> {
    let (hp, bp) = raster_paths(path);
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header = decode_header(&text)?;
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let t = decode_payload(&header, &bytes)?;
    Ok((header, t))
}

pub fn encode_pgm(mask: &MaskImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.values().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

/// Parses a binary PGM mask. Header fields may be separated by any
/// whitespace and `#` comments; exactly one whitespace byte precedes the pixels.
pub fn decode_pgm(bytes: &[u8]) -> Result<MaskImage, RasterError> {
    let bad = |m: String| RasterError::Pgm(m);
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad(format!("malformed {name}")));
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = digits.parse().map_err(|_| bad(format!("{name} out of range")))?;
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad(format!("dimensions must be positive, got {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| RasterError::Overflow(format!("{width}x{height} mask")))?;
    let pixels = &bytes[pos..];
    if pixels.len() != n {
        return Err(bad(format!("expected {n} pixel bytes, found {}", pixels.len())));
    }
    let values = pixels
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(RasterError::GrayValue { index, value }),
        })
        .collect::<Result<Vec<u8>, _>>()?;
    MaskImage::new(height, width, values).map_err(|e| bad(e.to_string()))
}

pub fn write_mask_pgm(path: &Path, mask: &MaskImage) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_pgm(path: &Path) -> Result<MaskImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?)
}
