//! Dense row-major `f32` tensors and their wire encoding.
//!
//! The encoding is shared by checkpoints, the data server and gradient
//! bundles:
//!
//! ```text
//! u8 dtype (0 = f32) | u8 ndim | ndim x u32 LE dims | prod(dims) x f32 LE
//! ```

use crate::error::{dim_err, Error, Result};

pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Splits the shape of a rank-4 tensor into `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => dim_err(format!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = *self.shape.first().unwrap_or(&0);
        if start > end || end > lead {
            return dim_err(format!("batch slice {start}..{end} out of range for axis 0 of size {lead}"));
        }
        let stride = if lead == 0 { 0 } else { self.numel() / lead };
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return dim_err(format!("stack of mismatched shapes {:?} and {:?}", first.shape, t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("add of {:?} and {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn encoded_len(&self) -> usize {
        2 + 4 * self.shape.len() + 4 * self.data.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.push(DTYPE_F32);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
        if bytes.len() < 2 {
            return Err(Error::Decode("tensor header truncated".into()));
        }
        if bytes[0] != DTYPE_F32 {
            return Err(Error::Decode(format!("unsupported dtype tag {}", bytes[0])));
        }
        let ndim = bytes[1] as usize;
        let mut pos = 2;
        if bytes.len() < pos + 4 * ndim {
            return Err(Error::Decode("tensor dims truncated".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Decode("tensor element count overflows".into()))?;
            shape.push(d);
            pos += 4;
        }
        let payload = numel
            .checked_mul(4)
            .filter(|&n| bytes.len() - pos >= n)
            .ok_or_else(|| Error::Decode(format!("tensor payload truncated, need {numel} f32 values")))?;
        let data = bytes[pos..pos + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Tensor { shape, data }, pos + payload))
    }

    /// Decodes a buffer that must contain exactly one tensor.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes after tensor", bytes.len() - used)));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn encoding_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..2], &[0, 2]);
        assert_eq!(&b[2..6], &1u32.to_le_bytes());
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1.0f32.to_le_bytes());
        assert_eq!(&b[14..18], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), t.encoded_len());
    }

    #[test]
    fn truncated_and_trailing_bytes_fail() {
        let b = Tensor::zeros(&[3, 3]).to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Tensor::from_bytes(&extra).is_err());
        let mut bad = b;
        bad[0] = 7;
        assert!(Tensor::from_bytes(&bad).is_err());
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.slice_batch(1, 2).unwrap().reshape(vec![2, 2]).unwrap(), b);
    }

    proptest! {
        #[test]
        fn encoding_roundtrips_bit_exactly(dims in proptest::collection::vec(0usize..5, 0..5), seed in any::<u32>()) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
