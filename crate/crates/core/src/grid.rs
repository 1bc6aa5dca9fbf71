//! Dense row-major grids: images, feature maps, masks and uncertainty maps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAX_RANK: usize = 4;
const MAGIC: &[u8; 4] = b"RGRD";

/// Row-major dense array with up to four axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidGrid(format!("rank {} outside 1..={MAX_RANK}", shape.len())));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidGrid(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Grid<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidGrid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for internal construction with known-good shapes.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// First element; the value of a one-element grid.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// `(channels, height, width)` view of a rank-2 or rank-3 grid.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            [n] => (1, 1, *n),
            s => (s[0] * s[1], s[2], s[3]),
        }
    }

    pub fn at2(&self, y: usize, x: usize) -> T {
        let w = *self.shape.last().unwrap();
        self.data[y * w + x]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidGrid(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::InvalidGrid(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Channel `c` of a `C×H×W` grid as an `H×W` grid.
    pub fn channel(&self, c: usize) -> Self {
        let (_, h, w) = self.chw();
        let n = h * w;
        Self { shape: vec![h, w], data: self.data[c * n..(c + 1) * n].to_vec() }
    }

    /// Stacks equally-shaped `H×W` planes into `C×H×W`.
    pub fn stack(planes: &[Self]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::InvalidGrid("no planes".into()))?;
        let mut data = Vec::with_capacity(first.len() * planes.len());
        for p in planes {
            if p.shape != first.shape {
                return Err(Error::InvalidGrid("stack: plane shapes differ".into()));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![planes.len()];
        shape.extend_from_slice(&first.shape);
        Self::from_vec(&shape, data)
    }

    /// Repeats an `H×W` plane `c` times into `c×H×W`.
    pub fn repeat_channels(&self, c: usize) -> Self {
        let (_, h, w) = self.chw();
        let mut data = Vec::with_capacity(self.len() * c);
        for _ in 0..c {
            data.extend_from_slice(&self.data);
        }
        Self { shape: vec![c, h, w], data }
    }

    /// Binary flat encoding: `RGRD`, u32 rank, u32 extents, little-endian f64 payload.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut inp: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, expected RGRD".into()));
        }
        let mut word = [0u8; 4];
        inp.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            inp.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n = check_shape(&shape)?;
        let mut bytes = vec![0u8; n * 8];
        inp.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::from_vec(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// 8-bit PNG preview. One or three channels are written as gray/RGB, each
    /// channel min–max normalized independently.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (c, h, w) = self.chw();
        let norm: Vec<Vec<u8>> = (0..c)
            .map(|ch| {
                let plane = &self.data[ch * h * w..(ch + 1) * h * w];
                let lo = plane.iter().fold(T::infinity(), |m, &v| m.min(v));
                let hi = plane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let span = hi - lo;
                plane
                    .iter()
                    .map(|&v| {
                        if span > T::zero() {
                            ((v - lo) / span * T::lit(255.0)).round().as_f64() as u8
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        let (w32, h32) = (w as u32, h as u32);
        if c == 3 {
            let mut img = image::RgbImage::new(w32, h32);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    img.put_pixel(x as u32, y as u32, image::Rgb([norm[0][i], norm[1][i], norm[2][i]]));
                }
            }
            img.save(path)?;
        } else {
            let mut img = image::GrayImage::new(w32, h32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([norm[0][y * w + x]]));
                }
            }
            img.save(path)?;
        }
        Ok(())
    }

    /// 8-bit grayscale PNG of a single-channel grid, values clipped to `[0, 1]`.
    pub fn save_gray_png_unit(&self, path: impl AsRef<Path>) -> Result<()> {
        let (c, h, w) = self.chw();
        if c != 1 {
            return Err(Error::InvalidGrid(format!("expected 1 channel, got {c}")));
        }
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for (i, &v) in self.data.iter().enumerate() {
            let px = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % w) as u32, (i / w) as u32, image::Luma([px]));
        }
        img.save(path)?;
        Ok(())
    }

    /// 8-bit RGB PNG without normalization; values are clipped to `[0, 1]`.
    pub fn save_rgb_png_unit(&self, path: impl AsRef<Path>) -> Result<()> {
        let (c, h, w) = self.chw();
        if c != 3 {
            return Err(Error::InvalidGrid(format!("expected 3 channels, got {c}")));
        }
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| {
                    (self.at3(ch, y, x).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Grid::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Grid::<f64>::from_vec(&[0, 2], vec![]).is_err());
        assert!(Grid::<f64>::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn binary_layout_is_exact() {
        let g = Grid::<f64>::from_vec(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"RGRD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[16..24].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), -2.5);
        assert_eq!(b.len(), 32);
        let back = Grid::<f64>::read_from(b.as_slice()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = Grid::<f64>::zeros(&[2]).to_bytes();
        b[0] = b'X';
        assert!(Grid::<f64>::read_from(b.as_slice()).is_err());
    }

    #[test]
    fn f32_grid_round_trips_through_f64_payload() {
        let g = Grid::<f32>::from_vec(&[3], vec![0.5, 1.25, -3.0]).unwrap();
        let back = Grid::<f32>::read_from(g.to_bytes().as_slice()).unwrap();
        assert_eq!(back, g);
    }
}
