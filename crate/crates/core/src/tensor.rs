//! Dense row-major `f64` tensors and the A2T1 fixture format.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::memtrack;

/// Dense row-major N-dimensional array of `f64`.
///
/// A rank-0 tensor (empty shape) holds exactly one element and is the scalar
/// type accepted as a backward root.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                "data",
                format!(
                    "shape {shape:?} needs {} elements, got {}",
                    numel_of(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        memtrack::register(data.len() * std::mem::size_of::<f64>());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(mut self) -> Vec<f64> {
        memtrack::release(self.data.len() * std::mem::size_of::<f64>());
        std::mem::take(&mut self.data)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(
                i < d,
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            );
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                "shape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        memtrack::release(self.data.len() * std::mem::size_of::<f64>());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("numel", &self.data.len())
            .finish()
    }
}

pub const A2T1_MAGIC: &[u8; 8] = b"A2TENSR1";

/// Writes one tensor as an A2T1 record: magic, `u32` rank, `rank` × `u64`
/// dims, then the little-endian `f64` payload. Returns the bytes written.
pub fn write_a2t1<W: Write>(w: &mut W, t: &Tensor) -> Result<u64> {
    w.write_all(A2T1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(a2t1_record_len(t.shape()))
}

pub fn a2t1_record_len(shape: &[usize]) -> u64 {
    8 + 4 + 8 * shape.len() as u64 + 8 * numel_of(shape) as u64
}

/// Reads one A2T1 record starting at `base_offset` bytes into the stream; the
/// offset is only used to report where a malformed record begins.
pub fn read_a2t1<R: Read>(r: &mut R, base_offset: u64) -> Result<Tensor> {
    let mut off = base_offset;
    let mut read_exact = |buf: &mut [u8], off: &mut u64, what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::Format {
            offset: *off,
            detail: format!("truncated {what}: {e}"),
        })?;
        *off += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 8];
    read_exact(&mut magic, &mut off, "magic")?;
    if &magic != A2T1_MAGIC {
        return Err(Error::Format {
            offset: base_offset,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut b4, &mut off, "rank")?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Format {
            offset: off - 4,
            detail: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(&mut b8, &mut off, "dimension")?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 34))
        .ok_or_else(|| Error::Format {
            offset: off,
            detail: format!("implausible shape {shape:?}"),
        })?;
    let mut payload = vec![0u8; n * 8];
    read_exact(&mut payload, &mut off, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn a2t1_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        let n = write_a2t1(&mut buf, &t).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(&buf[..8], b"A2TENSR1");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(&buf[20..28], &2u64.to_le_bytes());
        assert_eq!(&buf[28..36], &1.0f64.to_le_bytes());
        assert_eq!(&buf[36..44], &(-2.0f64).to_le_bytes());
        let back = read_a2t1(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn a2t1_errors_cite_offsets() {
        let mut bad = b"A2TENSR0".to_vec();
        bad.extend_from_slice(&0u32.to_le_bytes());
        match read_a2t1(&mut bad.as_slice(), 100) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("unexpected {other:?}"),
        }
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        write_a2t1(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        match read_a2t1(&mut buf.as_slice(), 0) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 20);
                assert!(detail.contains("payload"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
