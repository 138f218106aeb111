//! `FCT1` binary tensor files.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "FCT1"
//! 4       1         dtype code: 0 = f32, 1 = u8, 2 = i32
//! 5       1         rank, 2 or 3
//! 6       8 * rank  dims, u64 little-endian, outermost first
//! ...               payload, row-major, little-endian
//! ```
//!
//! The payload must be exactly `product(dims) * size_of(dtype)` bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::synthworld::LogitMap;
use crate::tensor::{
    ClassTensor, FlowField, ImageFrame, LabelMap, ProbMap, ScalarMap, TensorError,
};

pub const MAGIC: [u8; 4] = *b"FCT1";
const HEADER_FIXED: usize = 6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"FCT1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported rank {0}, expected 2 or 3")]
    BadRank(u8),
    #[error("dims {0:?} overflow the addressable size")]
    DimsOverflow(Vec<u64>),
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingData(usize),
    #[error("expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::UnknownDtype(_) => 2,
            FormatError::BadRank(_) => 3,
            FormatError::DimsOverflow(_) => 4,
            FormatError::Truncated { .. } => 5,
            FormatError::TrailingData(_) => 6,
            FormatError::Shape { .. } => 7,
            FormatError::Tensor(_) => 8,
            FormatError::Io(_) => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
    I32 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::I32),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I32(_) => Dtype::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(FormatError::BadRank(dims.len() as u8));
        }
        let n = element_count(&dims.iter().map(|&d| d as u64).collect::<Vec<_>>())?;
        if n != data.len() {
            return Err(FormatError::Shape {
                expected: format!("{n} elements for dims {dims:?}"),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_FIXED + 8 * self.dims.len() + self.data.len() * self.data.dtype().size(),
        );
        out.extend_from_slice(&MAGIC);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(FormatError::Truncated {
                    needed,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        need(HEADER_FIXED)?;
        let dtype = Dtype::from_code(bytes[4])?;
        let rank = bytes[5];
        if !(2..=3).contains(&rank) {
            return Err(FormatError::BadRank(rank));
        }
        let header = HEADER_FIXED + 8 * usize::from(rank);
        need(header)?;
        let raw_dims: Vec<u64> = bytes[HEADER_FIXED..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let n = element_count(&raw_dims)?;
        let payload = n
            .checked_mul(dtype.size())
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| FormatError::DimsOverflow(raw_dims.clone()))?;
        need(payload)?;
        if bytes.len() > payload {
            return Err(FormatError::TrailingData(bytes.len() - payload));
        }
        let body = &bytes[header..payload];
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(body.to_vec()),
            Dtype::I32 => TensorData::I32(
                body.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Ok(Self {
            dims: raw_dims.iter().map(|&d| d as usize).collect(),
            data,
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    fn shape_err(&self, expected: &str) -> FormatError {
        FormatError::Shape {
            expected: expected.to_string(),
            found: format!("{:?} tensor with dims {:?}", self.data.dtype(), self.dims),
        }
    }

    fn f32_hwc(
        &self,
        channels: Option<usize>,
        what: &str,
    ) -> Result<(usize, usize, usize, Vec<f64>)> {
        let TensorData::F32(v) = &self.data else {
            return Err(self.shape_err(what));
        };
        let (h, w, c) = match (self.dims.as_slice(), channels) {
            (&[h, w], Some(1)) => (h, w, 1),
            (&[h, w, c], Some(k)) if c == k => (h, w, c),
            (&[h, w, c], None) => (h, w, c),
            _ => return Err(self.shape_err(what)),
        };
        Ok((h, w, c, v.iter().map(|&x| f64::from(x)).collect()))
    }

    pub fn to_prob_map(&self) -> Result<ProbMap> {
        let (h, w, c, v) = self.f32_hwc(None, "f32 H x W x C probabilities")?;
        Ok(ProbMap::from_vec(h, w, c, v)?)
    }

    pub fn to_class_tensor(&self) -> Result<ClassTensor> {
        let (h, w, c, v) = self.f32_hwc(None, "f32 H x W x C tensor")?;
        Ok(ClassTensor::from_vec(h, w, c, v)?)
    }

    pub fn to_logit_map(&self) -> Result<LogitMap> {
        let (h, w, c, v) = self.f32_hwc(None, "f32 H x W x C logits")?;
        LogitMap::from_vec(h, w, c, v).map_err(|e| FormatError::Shape {
            expected: "finite logits".into(),
            found: e.to_string(),
        })
    }

    pub fn to_scalar_map(&self) -> Result<ScalarMap> {
        let (h, w, _, v) = self.f32_hwc(Some(1), "f32 H x W map")?;
        Ok(ScalarMap::from_vec(h, w, v)?)
    }

    pub fn to_flow(&self) -> Result<FlowField> {
        let (h, w, _, v) = self.f32_hwc(Some(2), "f32 H x W x 2 flow")?;
        Ok(FlowField::from_vec(h, w, v)?)
    }

    pub fn to_image(&self) -> Result<ImageFrame> {
        let TensorData::U8(v) = &self.data else {
            return Err(self.shape_err("u8 image"));
        };
        match *self.dims.as_slice() {
            [h, w] => Ok(ImageFrame::from_u8(h, w, 1, v)?),
            [h, w, c] => Ok(ImageFrame::from_u8(h, w, c, v)?),
            _ => Err(self.shape_err("u8 image")),
        }
    }

    pub fn to_labels(&self, classes: usize) -> Result<LabelMap> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::U8(v), &[h, w]) => Ok(LabelMap::from_vec(h, w, classes, v.clone())?),
            (TensorData::I32(v), &[h, w]) => {
                let labels = v
                    .iter()
                    .map(|&l| u8::try_from(l).map_err(|_| self.shape_err("labels in 0..=255")))
                    .collect::<Result<Vec<u8>>>()?;
                Ok(LabelMap::from_vec(h, w, classes, labels)?)
            }
            _ => Err(self.shape_err("u8 or i32 H x W labels")),
        }
    }
}

fn element_count(dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| {
            usize::try_from(d).ok().and_then(|d| acc.checked_mul(d))
        })
        .ok_or_else(|| FormatError::DimsOverflow(dims.to_vec()))
}

fn f32_vec(v: &[f64]) -> TensorData {
    TensorData::F32(v.iter().map(|&x| x as f32).collect())
}

impl From<&ProbMap> for Tensor {
    fn from(p: &ProbMap) -> Self {
        Tensor {
            dims: vec![p.height(), p.width(), p.classes()],
            data: f32_vec(p.data()),
        }
    }
}

impl From<&ClassTensor> for Tensor {
    fn from(p: &ClassTensor) -> Self {
        Tensor {
            dims: vec![p.height(), p.width(), p.classes()],
            data: f32_vec(p.data()),
        }
    }
}

impl From<&LogitMap> for Tensor {
    fn from(p: &LogitMap) -> Self {
        Tensor {
            dims: vec![p.height(), p.width(), p.classes()],
            data: f32_vec(p.data()),
        }
    }
}

impl From<&ScalarMap> for Tensor {
    fn from(m: &ScalarMap) -> Self {
        Tensor {
            dims: vec![m.height(), m.width()],
            data: f32_vec(m.data()),
        }
    }
}

impl From<&FlowField> for Tensor {
    fn from(f: &FlowField) -> Self {
        Tensor {
            dims: vec![f.height(), f.width(), 2],
            data: f32_vec(f.data()),
        }
    }
}

impl From<&ImageFrame> for Tensor {
    fn from(i: &ImageFrame) -> Self {
        Tensor {
            dims: vec![i.height(), i.width(), i.channels()],
            data: TensorData::U8(i.to_u8()),
        }
    }
}

impl From<&LabelMap> for Tensor {
    fn from(l: &LabelMap) -> Self {
        Tensor {
            dims: vec![l.height(), l.width()],
            data: TensorData::U8(l.data().to_vec()),
        }
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::decode(&fs::read(path)?)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensor.encode())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], TensorData::I32(vec![1, -2])).unwrap();
        let bytes = t.encode();
        let mut expect = b"FCT1".to_vec();
        expect.extend([2u8, 2]);
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1i32.to_le_bytes());
        expect.extend((-2i32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn malformed_inputs_get_distinct_codes() {
        let good = Tensor::new(vec![2, 2], TensorData::U8(vec![1, 2, 3, 4]))
            .unwrap()
            .encode();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let e = Tensor::decode(&bad).unwrap_err();
        assert!(matches!(e, FormatError::BadMagic(_)));
        assert_eq!(e.code(), 1);

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(Tensor::decode(&bad).unwrap_err().code(), 2);

        let mut bad = good.clone();
        bad[5] = 4;
        assert_eq!(Tensor::decode(&bad).unwrap_err().code(), 3);

        let mut bad = good.clone();
        bad[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(Tensor::decode(&bad).unwrap_err().code(), 4);

        let e = Tensor::decode(&good[..good.len() - 1]).unwrap_err();
        assert!(matches!(e, FormatError::Truncated { .. }));
        assert_eq!(e.code(), 5);
        assert_eq!(Tensor::decode(&good[..3]).unwrap_err().code(), 5);

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(Tensor::decode(&bad).unwrap_err().code(), 6);
    }

    #[test]
    fn prob_map_round_trip_through_file() {
        let p = ProbMap::from_vec(1, 2, 3, vec![0.25, 0.5, 0.25, 0.5, 0.5, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fct");
        write_tensor(&Tensor::from(&p), &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, Tensor::from(&p));
        assert_eq!(back.to_prob_map().unwrap(), p);
        assert!(back.to_flow().is_err());
        assert!(back.to_image().is_err());
    }

    #[test]
    fn typed_conversions() {
        let img = ImageFrame::from_vec(2, 1, 3, vec![0.0, 1.0, 2.0, 253.0, 254.0, 255.0]).unwrap();
        assert_eq!(Tensor::from(&img).to_image().unwrap(), img);
        let l = LabelMap::from_vec(1, 3, 3, vec![0, 2, 255]).unwrap();
        assert_eq!(Tensor::from(&l).to_labels(3).unwrap(), l);
        assert!(Tensor::from(&l).to_labels(2).is_err());
        let f = FlowField::constant(2, 2, 0.5, -1.25).unwrap();
        assert_eq!(Tensor::from(&f).to_flow().unwrap(), f);
        let s = ScalarMap::from_vec(1, 2, vec![0.5, 3.0]).unwrap();
        assert_eq!(Tensor::from(&s).to_scalar_map().unwrap(), s);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (
            prop::collection::vec(1usize..5, 2..=3),
            0u8..3,
            any::<u64>(),
        )
            .prop_map(|(dims, code, seed)| {
                let n: usize = dims.iter().product();
                let mut x = seed | 1;
                let mut next = || {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    x
                };
                let data = match code {
                    0 => TensorData::F32((0..n).map(|_| f32::from_bits(next() as u32)).collect()),
                    1 => TensorData::U8((0..n).map(|_| next() as u8).collect()),
                    _ => TensorData::I32((0..n).map(|_| next() as i32).collect()),
                };
                Tensor { dims, data }
            })
    }

    fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
        a.dims == b.dims
            && match (&a.data, &b.data) {
                (TensorData::F32(x), TensorData::F32(y)) => x
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(y.iter().map(|v| v.to_bits())),
                (x, y) => x == y,
            }
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(t in arb_tensor()) {
            let back = Tensor::decode(&t.encode()).unwrap();
            prop_assert!(bit_equal(&t, &back));
        }
    }
}
