//! Dense float32 tensor and the portable "NCFL" container format.
//!
//! Layout is row-major (last dimension contiguous). Video data uses
//! `[T, C, H, W]`, batched network activations `[N, C, H, W]`.
//!
//! Container format: magic `NCFL`, then `u32` LE ndim, then ndim `u32` LE
//! dims, then the raw little-endian f32 payload. The round trip is
//! bit-exact for any finite tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"NCFL";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Tensor {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scalar_value(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "expected scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f32) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Mean of elementwise squared difference.
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        sum / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Sub-view of one index along the leading axis, e.g. frame t of
    /// a clip tensor. Copies.
    pub fn index_axis0(&self, idx: usize) -> Tensor {
        assert!(!self.shape.is_empty() && idx < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[idx * inner..(idx + 1) * inner].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let inner_shape = parts[0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(p.shape, inner_shape, "stack on mismatched shapes");
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        Tensor { shape, data }
    }

    /// Insert a leading batch axis of size 1.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Tensor { shape, data: self.data.clone() }
    }

    /// Drop a leading axis of size 1.
    pub fn squeeze0(&self) -> Tensor {
        assert!(self.shape.first() == Some(&1), "squeeze0 needs leading dim 1");
        Tensor { shape: self.shape[1..].to_vec(), data: self.data.clone() }
    }
}

/// Write a tensor in the NCFL container format.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    if t.shape.iter().any(|&d| d == 0) {
        return Err(Error::Container(format!("refusing to write zero-length dim {:?}", t.shape)));
    }
    if !t.is_finite() {
        return Err(Error::Container("refusing to write non-finite payload".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read a tensor written by [`write_tensor`]. Bit-exact round trip.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Container(format!("{}: truncated header", path.display())))?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Container(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Container(format!("{}: truncated ndim", path.display())))?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Container(format!("{}: implausible ndim {}", path.display(), ndim)));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Container(format!("{}: truncated dims", path.display())))?;
        let d = u32::from_le_bytes(u32buf) as usize;
        if d == 0 {
            return Err(Error::Container(format!("{}: zero-length dim", path.display())));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::Container(format!(
            "{}: payload shorter than header dims {:?}",
            path.display(),
            shape
        ))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Container(format!("{}: trailing bytes after payload", path.display())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ramp_round_trip_is_identical() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.25 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.ncfl");
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn zero_length_dim_rejected() {
        let t = Tensor { shape: vec![2, 0, 3], data: vec![] };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(&t, &dir.path().join("bad.ncfl")).is_err());
    }

    #[test]
    fn non_finite_payload_rejected() {
        let t = Tensor::new(&[2], vec![1.0, f32::NAN]);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(&t, &dir.path().join("nan.ncfl")).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ncfl");
        std::fs::write(&p, b"JUNK\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        match read_tensor(&p) {
            Err(Error::Container(msg)) => assert!(msg.contains("bad magic")),
            other => panic!("expected bad-magic error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.ncfl");
        write_tensor(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match read_tensor(&p) {
            Err(Error::Container(msg)) => assert!(msg.contains("payload shorter")),
            other => panic!("expected truncation error, got {:?}", other),
        }
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..5),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            // Spread values across magnitudes, keep them finite.
            let data: Vec<f32> = (0..n)
                .map(|i| {
                    let x = (seed as f32).sin() * 1e3 + i as f32 * 7.13 - 11.0;
                    x * (1.0 + (i as f32 * 0.37).cos())
                })
                .collect();
            let t = Tensor::new(&shape, data);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("prop.ncfl");
            write_tensor(&t, &p).unwrap();
            let back = read_tensor(&p).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
