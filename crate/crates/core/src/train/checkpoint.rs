//! The `ERNV1` checkpoint container.
//!
//! Layout: magic `ERNV1`, `u32` tensor count, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` dtype code, a `u8` rank, rank × `u32`
//! dims and the little-endian payload. The file ends with the `u64` epoch and
//! four `u64` words of random-stream state. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"ERNV1";

#[derive(Clone, Debug)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::Float32,
            StoredTensor::F64(_) => DType::Float64,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        fn put<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
            for &v in t.data() {
                v.write_le(out);
            }
        }
        match self {
            StoredTensor::F32(t) => put(t, out),
            StoredTensor::F64(t) => put(t, out),
        }
    }

    /// Bitwise equality of shape, dtype and payload.
    pub fn bits_equal(&self, other: &StoredTensor) -> bool {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        self.write_payload(&mut a);
        other.write_payload(&mut b);
        self.dtype() == other.dtype() && self.shape() == other.shape() && a == b
    }
}

pub trait Storable: Scalar {
    fn store(t: Tensor<Self>) -> StoredTensor;
    fn unstore(t: &StoredTensor) -> Option<&Tensor<Self>>;
}

impl Storable for f32 {
    fn store(t: Tensor<f32>) -> StoredTensor {
        StoredTensor::F32(t)
    }
    fn unstore(t: &StoredTensor) -> Option<&Tensor<f32>> {
        match t {
            StoredTensor::F32(t) => Some(t),
            StoredTensor::F64(_) => None,
        }
    }
}

impl Storable for f64 {
    fn store(t: Tensor<f64>) -> StoredTensor {
        StoredTensor::F64(t)
    }
    fn unstore(t: &StoredTensor) -> Option<&Tensor<f64>> {
        match t {
            StoredTensor::F64(t) => Some(t),
            StoredTensor::F32(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    /// Number of completed epochs.
    pub epoch: u64,
    /// Shuffle stream `(key, counter)` then dropout stream `(key, counter)`.
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?;
        out.extend(count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            out.extend(len.to_le_bytes());
            out.extend(name.as_bytes());
            out.push(t.dtype().code());
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("rank too high: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension too large: {name}")))?;
                out.extend(d.to_le_bytes());
            }
            t.write_payload(&mut out);
        }
        out.extend(self.epoch.to_le_bytes());
        for w in self.rng_state {
            out.extend(w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(5)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected ERNV1"));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let at = r.pos;
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let code_at = r.pos;
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| r.error_at(code_at, "unknown dtype code"))?;
            let rank = usize::from(r.take(1)?[0]);
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * dtype.size())?;
            let bad_shape = |e: Error| r.error_at(code_at + 2, format!("tensor {name}: {e}"));
            let t = match dtype {
                DType::Float32 => StoredTensor::F32(decode(&shape, payload).map_err(bad_shape)?),
                DType::Float64 => StoredTensor::F64(decode(&shape, payload).map_err(bad_shape)?),
            };
            tensors.push((name, t));
        }
        let epoch = r.u64()?;
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64()?;
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            epoch,
            rng_state,
        })
    }

    /// Write atomically: a sibling temporary file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed, as
    /// element type `T`. Tensors of another dtype are reported by name.
    pub fn typed<T: Storable>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out = Vec::new();
        let mut wrong = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                match T::unstore(t) {
                    Some(t) => out.push((rest.to_string(), t.clone())),
                    None => wrong.push(name.clone()),
                }
            }
        }
        if wrong.is_empty() {
            Ok(out)
        } else {
            Err(Error::Checkpoint {
                detail: format!("expected {:?} tensors", T::DTYPE),
                tensors: wrong,
            })
        }
    }
}

fn decode<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    Tensor::from_vec(shape, payload.chunks_exact(size).map(T::read_le).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(self.bytes.len(), format!("truncated: needed {n} bytes at offset {}", self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
