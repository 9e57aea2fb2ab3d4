//! Field files (NGF1), JSON sidecars and PNG input/output.
//!
//! NGF1 layout, all integers and floats little-endian:
//!
//! ```text
//! "NGF1" | rank: u32 | dims[rank]: u32 | flag: u8 (0 real, 1 complex) | payload: f64...
//! ```
//!
//! Complex payloads are interleaved `re, im`. Dimensions are listed slowest
//! first, so a [`ScalarField2D`] is `[height, width]` and a [`LiftedField3D`]
//! is `[height, width, nθ]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LiftedField3D, ScalarField2D, VectorField2D};

pub const MAGIC: &[u8; 4] = b"NGF1";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An NGF1 array of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NgfField {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl NgfField {
    pub fn real(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(dims, Payload::Real(data))
    }

    pub fn complex(dims: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        Self::checked(dims, Payload::Complex(data))
    }

    fn checked(dims: Vec<usize>, payload: Payload) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != payload.len() {
            return Err(Error::Size(format!(
                "dims {dims:?} imply {expected} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        let (flag, width) = match &self.payload {
            Payload::Real(_) => (0u8, 1),
            Payload::Complex(_) => (1u8, 2),
        };
        let mut out = Vec::with_capacity(9 + 4 * self.dims.len() + 8 * width * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(flag);
        match &self.payload {
            Payload::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Complex(v) => v.iter().for_each(|c| {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let flag = cur.take(1)?[0];
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let scalars = match flag {
            0 => count,
            1 => count * 2,
            f => return Err(Error::Format(format!("unknown payload flag {f}"))),
        };
        let remaining = bytes.len() - cur.pos;
        if remaining != scalars * 8 {
            return Err(Error::Format(format!(
                "payload holds {remaining} bytes, expected {}",
                scalars * 8
            )));
        }
        let values: Vec<f64> = bytes[cur.pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("payload contains non-finite values".into()));
        }
        let payload = if flag == 0 {
            Payload::Real(values)
        } else {
            Payload::Complex(
                values
                    .chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            )
        };
        Ok(Self { dims, payload })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A field read back from disk, typed by rank and payload kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Scalar(ScalarField2D),
    Lifted(LiftedField3D),
    Raw(NgfField),
}

impl From<&ScalarField2D> for NgfField {
    fn from(f: &ScalarField2D) -> Self {
        NgfField {
            dims: vec![f.height(), f.width()],
            payload: Payload::Real(f.data().to_vec()),
        }
    }
}

impl From<&LiftedField3D> for NgfField {
    fn from(f: &LiftedField3D) -> Self {
        NgfField {
            dims: vec![f.height(), f.width(), f.n_theta()],
            payload: Payload::Complex(f.data().to_vec()),
        }
    }
}

impl From<&VectorField2D> for NgfField {
    fn from(f: &VectorField2D) -> Self {
        let mut data = Vec::with_capacity(2 * f.ax().len());
        for (a, b) in f.ax().iter().zip(f.ay()) {
            data.push(*a);
            data.push(*b);
        }
        NgfField {
            dims: vec![f.height(), f.width(), 2],
            payload: Payload::Real(data),
        }
    }
}

impl NgfField {
    /// Interprets the array as a typed field. Rank-2 real arrays become
    /// scalar fields and rank-3 complex arrays lifted fields.
    pub fn into_field(self) -> Result<Field> {
        match (&self.dims[..], self.payload) {
            ([h, w], Payload::Real(data)) => Ok(Field::Scalar(ScalarField2D::new(*w, *h, 1.0, data)?)),
            ([h, w, n], Payload::Complex(data)) => Ok(Field::Lifted(LiftedField3D::new(*w, *h, *n, data)?)),
            (_, payload) => Ok(Field::Raw(NgfField {
                dims: self.dims,
                payload,
            })),
        }
    }

    pub fn into_vector_field(self) -> Result<VectorField2D> {
        match (&self.dims[..], self.payload) {
            ([h, w, 2], Payload::Real(data)) => {
                let ax = data.iter().step_by(2).copied().collect();
                let ay = data.iter().skip(1).step_by(2).copied().collect();
                VectorField2D::new(*w, *h, 1.0, ax, ay)
            }
            (dims, _) => Err(Error::Format(format!("not a vector field: dims {dims:?}"))),
        }
    }
}

/// JSON sidecar stored next to each NGF file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FieldMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_theta: Option<usize>,
    pub spacing: f64,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl FieldMetadata {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            n_theta: None,
            spacing: 1.0,
            provenance: provenance.into(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_n_theta(mut self, n: usize) -> Self {
        self.n_theta = Some(n);
        self
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_ngf(path: impl AsRef<Path>, field: &NgfField) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, field.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_ngf(path: impl AsRef<Path>) -> Result<NgfField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NgfField::decode(&bytes)
}

/// Writes the array and its metadata sidecar.
pub fn write_field(path: impl AsRef<Path>, field: &NgfField, meta: &FieldMetadata) -> Result<()> {
    let path = path.as_ref();
    write_ngf(path, field)?;
    write_json(sidecar_path(path), meta)
}

/// Reads a field, applying grid spacing from the sidecar when one exists.
pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let field = read_ngf(path)?.into_field()?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(field);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: FieldMetadata = serde_json::from_str(&text)?;
    Ok(match field {
        Field::Scalar(f) => Field::Scalar(f.with_spacing(meta.spacing)),
        Field::Lifted(f) => Field::Lifted(f.with_spacing(meta.spacing)),
        raw => raw,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads an 8- or 16-bit grayscale PNG with values scaled to `[0, 1]`.
pub fn load_png_grayscale(path: impl AsRef<Path>) -> Result<ScalarField2D> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    ScalarField2D::new(w, h, 1.0, data)
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit grayscale PNG mapping `[lo, hi]` to `[0, 255]`.
pub fn save_png_grayscale(path: impl AsRef<Path>, field: &ScalarField2D, lo: f64, hi: f64) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(field.width() as u32, field.height() as u32, |x, y| {
        Luma([to_u8(field.get(x as usize, y as usize), lo, hi)])
    });
    img.save(path.as_ref())?;
    Ok(())
}

/// Writes a 16-bit grayscale PNG of values in `[0, 1]`.
pub fn save_png_grayscale16(path: impl AsRef<Path>, field: &ScalarField2D) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(field.width() as u32, field.height() as u32, |x, y| {
            let v = field.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    img.save(path.as_ref())?;
    Ok(())
}

/// Grayscale background with highlighted pixels drawn in red.
pub fn save_overlay_png(
    path: impl AsRef<Path>,
    background: &ScalarField2D,
    highlight: &[(usize, usize)],
) -> Result<()> {
    let mut img: RgbImage = ImageBuffer::from_fn(background.width() as u32, background.height() as u32, |x, y| {
        let g = to_u8(background.get(x as usize, y as usize), 0.0, 1.0) / 2 + 64;
        Rgb([g, g, g])
    });
    for &(x, y) in highlight {
        img.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
    }
    img.save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_round_trips() {
        let f = ScalarField2D::zeros(2, 2);
        let back = NgfField::decode(&NgfField::from(&f).encode()).unwrap();
        assert_eq!(back.into_field().unwrap(), Field::Scalar(f));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = NgfField::from(&ScalarField2D::zeros(2, 2)).encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(NgfField::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = NgfField::from(&ScalarField2D::zeros(3, 3)).encode();
        assert!(matches!(NgfField::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(NgfField::decode(&bytes[..6]), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_data_error() {
        let mut bytes = NgfField::from(&ScalarField2D::zeros(1, 1)).encode();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(NgfField::decode(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn complex_field_round_trips_bit_exact() {
        // 3x3x4 with values k*0.5, compared at the byte level.
        let mut k = 0;
        let f = LiftedField3D::from_fn(3, 3, 4, |_, _, _| {
            let c = Complex64::new(k as f64 * 0.5, -(k as f64) * 0.5);
            k += 1;
            c
        });
        let bytes = NgfField::from(&f).encode();
        let back = NgfField::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let Field::Lifted(g) = back.into_field().unwrap() else {
            panic!("expected a lifted field")
        };
        for (a, b) in f.data().iter().zip(g.data()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
        // header: magic, rank 3, dims 3,3,4, complex flag
        assert_eq!(&bytes[..4], b"NGF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(bytes[20], 1);
        assert_eq!(bytes.len(), 21 + 36 * 16);
    }

    #[test]
    fn vector_field_round_trips() {
        let a = VectorField2D::from_fn(3, 2, |x, y| (x as f64, -(y as f64)));
        let back = NgfField::decode(&NgfField::from(&a).encode())
            .unwrap()
            .into_vector_field()
            .unwrap();
        assert_eq!(back, a);
    }
}
