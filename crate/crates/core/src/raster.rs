//! Single-channel rasters: binary masks and [0, 1]-valued planes.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;

/// Foreground/background mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(
                "mask",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, data }
    }

    /// Accepts 0/1 or 0/255 levels; anything else is rejected.
    pub fn from_levels(width: usize, height: usize, levels: &[u8]) -> Result<Self> {
        let max = levels.iter().copied().max().unwrap_or(0);
        let on = if max > 1 { 255 } else { 1 };
        if let Some(bad) = levels.iter().find(|&&v| v != 0 && v != on) {
            return Err(invalid(format!("mask value {bad} is neither 0 nor {on}")));
        }
        Self::new(width, height, levels.iter().map(|&v| v == on).collect())
    }

    /// Values must be exactly 0 or 1.
    pub fn from_values<T: Real>(width: usize, height: usize, values: &[T]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(invalid(format!("mask value {bad} is not binary")));
        }
        Self::new(width, height, values.iter().map(|&v| v == T::one()).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// 0 or 255 per pixel.
    pub fn to_levels(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn to_values<T: Real>(&self) -> Vec<T> {
        self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }

    pub(crate) fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height),
            ));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &BinaryMask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Row-major plane of values in [0, 1]: a grayscale image or a per-pixel
/// foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ProbabilityMap<T> = Plane<T>;
pub type GrayImage<T> = Plane<T>;

impl<T: Real> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(
                "plane",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(invalid(format!("plane value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Exact 0/1 plane of a mask.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            data: mask.to_values(),
        }
    }

    /// 8-bit levels, `round(255 * v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.as_f64() * 255.0).round() as u8).collect()
    }

    /// 16-bit levels, `round(65535 * v)`.
    pub fn to_u16(&self) -> Vec<u16> {
        self.data.iter().map(|v| (v.as_f64() * 65535.0).round() as u16).collect()
    }
}

/// Element `k` of the dihedral group on an `n x n` row-major grid: `k % 4`
/// counter-clockwise quarter turns, followed by a horizontal mirror when
/// `k >= 4`.
pub fn dihedral<V: Copy>(data: &[V], n: usize, k: usize) -> Vec<V> {
    assert_eq!(data.len(), n * n, "dihedral needs a square grid");
    let mut cur = data.to_vec();
    for _ in 0..k % 4 {
        cur = (0..n * n).map(|i| cur[(i % n) * n + (n - 1 - i / n)]).collect();
    }
    if k % 8 >= 4 {
        cur = (0..n * n).map(|i| cur[(i / n) * n + (n - 1 - i % n)]).collect();
    }
    cur
}

impl BinaryMask {
    /// See [`dihedral`]; the mask must be square.
    pub fn dihedral(&self, k: usize) -> Result<Self> {
        if self.width != self.height {
            return Err(shape_err("dihedral", "mask is not square"));
        }
        Self::new(self.width, self.height, dihedral(&self.data, self.width, k))
    }
}

impl<T: Real> Plane<T> {
    /// See [`dihedral`]; the plane must be square.
    pub fn dihedral(&self, k: usize) -> Result<Self> {
        if self.width != self.height {
            return Err(shape_err("dihedral", "plane is not square"));
        }
        Ok(Self {
            data: dihedral(&self.data, self.width, k),
            ..*self
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_group() {
        let g: Vec<u8> = (0..9).collect();
        assert_eq!(dihedral(&g, 3, 1), vec![2, 5, 8, 1, 4, 7, 0, 3, 6]);
        assert_eq!(dihedral(&dihedral(&g, 3, 1), 3, 3), g);
        assert_eq!(dihedral(&g, 3, 4), vec![2, 1, 0, 5, 4, 3, 8, 7, 6]);
        let mut all: Vec<Vec<u8>> = (0..8).map(|k| dihedral(&g, 3, k)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn mask_levels() {
        let m = BinaryMask::from_levels(2, 1, &[0, 255]).unwrap();
        assert_eq!(m.data(), &[false, true]);
        assert_eq!(BinaryMask::from_levels(2, 1, &[0, 1]).unwrap(), m);
        assert!(BinaryMask::from_levels(2, 1, &[0, 128]).is_err());
        assert!(BinaryMask::from_levels(3, 1, &[0, 255]).is_err());
        assert_eq!(m.to_levels(), vec![0, 255]);
        assert!(BinaryMask::from_values(2, 1, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn plane_range_enforced() {
        assert!(Plane::new(1, 1, vec![1.5]).is_err());
        assert!(Plane::new(1, 1, vec![f64::NAN]).is_err());
        let p = Plane::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(p.to_u8(), vec![0, 255]);
        assert_eq!(p.to_u16(), vec![0, 65535]);
    }

    #[test]
    fn subset_and_zip() {
        let a = BinaryMask::from_fn(3, 3, |x, _| x == 0);
        let b = BinaryMask::from_fn(3, 3, |x, y| x == 0 || y == 0);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert_eq!(a.zip_with(&b, "and", |p, q| p && q).unwrap(), a);
        assert!(a.zip_with(&BinaryMask::empty(2, 2), "and", |p, _| p).is_err());
    }
}
