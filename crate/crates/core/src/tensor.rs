//! Dense row-major tensors and the VLT binary format.
//!
//! Layout of a `.vlt` file, all integers little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "VLT1"
//! 4       1         dtype code (1 = f32, 2 = u8)
//! 5       1         ndim (1..=4)
//! 6       2         zero padding
//! 8       8*ndim    dims as u64
//! 8+8*ndim          payload, row-major, little-endian elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VLT1";
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for u8 {}
}

/// Element types that can live in a [`Tensor`].
pub trait Element: Copy + Send + Sync + PartialEq + std::fmt::Debug + sealed::Sealed {
    const DTYPE: DType;
    fn extend_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn extend_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn from_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn is_finite(self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(Error::Dimension(format!(
                "tensor rank must be 1..={MAX_NDIM}, got {}",
                shape.len()
            )));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of leading rows when viewed as `shape[0] × rest`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Errors unless the tensor has exactly this rank.
    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.ndim() != rank {
            return Err(Error::Dimension(format!(
                "{what} must be rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(header_len(self.ndim()) + self.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.ndim() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.extend_le(&mut out);
        }
        out
    }
}

impl Tensor<f32> {
    /// Checks that every value lies in `[lo, hi]`.
    pub fn check_range(&self, lo: f32, hi: f32, what: &str) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(lo..=hi).contains(*v))
        {
            return Err(Error::Validation(format!(
                "{what}[{i}] = {v} is outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

pub fn header_len(ndim: usize) -> usize {
    8 + 8 * ndim
}

/// A tensor whose dtype is only known after reading it.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::U8(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            DynTensor::F32(t) => Ok(t),
            DynTensor::U8(_) => Err(Error::Format {
                field: "dtype",
                detail: "expected f32 tensor, found u8".into(),
            }),
        }
    }

    pub fn into_u8(self) -> Result<Tensor<u8>> {
        match self {
            DynTensor::U8(t) => Ok(t),
            DynTensor::F32(_) => Err(Error::Format {
                field: "dtype",
                detail: "expected u8 tensor, found f32".into(),
            }),
        }
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            field: "header",
            detail: format!("{} bytes is shorter than the fixed 8-byte prefix", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected \"VLT1\", found {:?}", String::from_utf8_lossy(&bytes[0..4])),
        });
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format {
        field: "dtype",
        detail: format!("unknown code {}", bytes[4]),
    })?;
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format {
            field: "ndim",
            detail: format!("{ndim} not in 1..={MAX_NDIM}"),
        });
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::Format {
            field: "padding",
            detail: format!("expected zero bytes, found {:02x} {:02x}", bytes[6], bytes[7]),
        });
    }
    let hlen = header_len(ndim);
    if bytes.len() < hlen {
        return Err(Error::Format {
            field: "dims",
            detail: format!("header needs {hlen} bytes, file has {}", bytes.len()),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let off = 8 + 8 * k;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8-byte slice"));
        let d = usize::try_from(d).map_err(|_| Error::Format {
            field: "dims",
            detail: format!("dimension {k} = {d} does not fit in usize"),
        })?;
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::Format {
            field: "dims",
            detail: format!("shape {shape:?} overflows"),
        })?;
    let payload = &bytes[hlen..];
    if payload.len() != count {
        return Err(Error::LengthMismatch {
            expected: count,
            actual: payload.len(),
        });
    }
    match dtype {
        DType::F32 => decode_payload::<f32>(shape, payload).map(DynTensor::F32),
        DType::U8 => decode_payload::<u8>(shape, payload).map(DynTensor::U8),
    }
}

fn decode_payload<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let mut data = Vec::with_capacity(payload.len() / size);
    for (i, chunk) in payload.chunks_exact(size).enumerate() {
        let v = T::from_le(chunk);
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &t.to_bytes())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DynTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn read_tensor_f32(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_tensor(path)?.into_f32()
}

pub fn read_tensor_u8(path: impl AsRef<Path>) -> Result<Tensor<u8>> {
    read_tensor(path)?.into_u8()
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_zero_is_header_plus_four_zero_bytes() {
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[0..4], b"VLT1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[16..20], &[0, 0, 0, 0]);
    }

    #[test]
    fn u8_payload_bytes() {
        let t = Tensor::new(vec![2, 2], vec![0u8, 1, 254, 255]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), header_len(2) + 4);
        assert_eq!(b[4], 2);
        assert_eq!(&b[header_len(2)..], &[0x00, 0x01, 0xFE, 0xFF]);
    }

    #[test]
    fn bad_magic_names_the_field() {
        let mut b = Tensor::new(vec![1], vec![1.0f32]).unwrap().to_bytes();
        b[0..4].copy_from_slice(b"XXXX");
        match decode_tensor(&b) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_and_rank_rejected() {
        let mut b = Tensor::new(vec![1], vec![1.0f32]).unwrap().to_bytes();
        b[4] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { field: "dtype", .. })));
        let mut b = Tensor::new(vec![1], vec![1.0f32]).unwrap().to_bytes();
        b[5] = 5;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { field: "ndim", .. })));
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let t = Tensor::new(vec![8], vec![1.0f32; 8]).unwrap();
        let mut b = t.to_bytes();
        b.truncate(b.len() - 4);
        match decode_tensor(&b) {
            Err(Error::LengthMismatch { expected, actual }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 28);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_payload_rejected() {
        let t = Tensor::new(vec![3], vec![1.0f32, f32::NAN, 2.0]).unwrap();
        assert!(matches!(
            decode_tensor(&t.to_bytes()),
            Err(Error::NonFinite { index: 1 })
        ));
        let t = Tensor::new(vec![1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(decode_tensor(&t.to_bytes()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0u8; 5]).is_err());
        assert!(Tensor::<u8>::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0u8]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vlt");
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor_f32(&p).unwrap(), t);
        assert!(read_tensor_u8(&p).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn f32_roundtrip_is_bitwise(shape in arb_shape(), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| {
                    let bits = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as u32;
                    let v = f32::from_bits(bits);
                    if v.is_finite() { v } else { 0.5 }
                })
                .collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            let bytes = t.to_bytes();
            prop_assert_eq!(bytes.len(), header_len(shape.len()) + 4 * n);
            let back = decode_tensor(&bytes).unwrap().into_f32().unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn u8_roundtrip(shape in arb_shape(), fill in any::<u8>()) {
            let t = Tensor::filled(shape, fill).unwrap();
            let back = decode_tensor(&t.to_bytes()).unwrap().into_u8().unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
