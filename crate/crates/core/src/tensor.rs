//! Strided 2D map storage.
//!
//! Every activation, delta and pre-activation in the engine lives in a
//! [`FeatureMap`]: a dense `width x height` grid whose rows are padded to a
//! multiple of a *pitch quantum*. Padding cells exist only to align rows; no
//! operation reads them into a result, so changing the quantum never changes
//! a computed value.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Row alignment used when no other quantum is requested.
pub const DEFAULT_PITCH_QUANTUM: usize = 32;

/// Floating point width used for a whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => f.write_str("single"),
            Precision::Double => f.write_str("double"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Scalar type of a network. Implemented for `f32` and `f64` only.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const PRECISION: Precision;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
}

/// A 2D grid of values with padded rows.
///
/// Logical cell `(x, y)` is stored at `y * pitch + x`.
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    width: usize,
    height: usize,
    pitch: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    /// Allocates a zeroed map whose pitch is the smallest multiple of
    /// `pitch_quantum` that holds `width` elements.
    pub fn new(width: usize, height: usize, pitch_quantum: usize) -> Result<Self> {
        if width == 0 || height == 0 || pitch_quantum == 0 {
            return Err(Error::Dimension(format!(
                "map {width}x{height} with pitch quantum {pitch_quantum}"
            )));
        }
        let pitch = width.div_ceil(pitch_quantum) * pitch_quantum;
        Ok(FeatureMap {
            width,
            height,
            pitch,
            data: vec![T::zero(); pitch * height],
        })
    }

    /// Builds a map from row-major logical values.
    pub fn from_rows(width: usize, height: usize, pitch_quantum: usize, values: &[T]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        let mut map = Self::new(width, height, pitch_quantum)?;
        for (y, row) in values.chunks_exact(width).enumerate() {
            map.row_mut(y).copy_from_slice(row);
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pitch(&self) -> usize {
        self.pitch
    }

    /// A zeroed map with the same shape and pitch.
    pub fn zeros_like(&self) -> Self {
        FeatureMap {
            width: self.width,
            height: self.height,
            pitch: self.pitch,
            data: vec![T::zero(); self.data.len()],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.pitch + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.pitch + x] = value;
    }

    /// The logical cells of row `y` (padding excluded).
    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        let start = y * self.pitch;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [T] {
        let start = y * self.pitch;
        &mut self.data[start..start + self.width]
    }

    /// Raw storage including padding.
    pub fn storage(&self) -> &[T] {
        &self.data
    }

    pub fn storage_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Iterates logical cells in row-major order.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.height).flat_map(move |y| self.row(y).iter().copied())
    }

    /// Logical cells in row-major order.
    pub fn to_vec(&self) -> Vec<T> {
        self.values().collect()
    }

    pub fn fill(&mut self, value: T) {
        for y in 0..self.height {
            self.row_mut(y).fill(value);
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sum of all logical cells.
    pub fn sum(&self) -> T {
        self.values().sum()
    }

    /// Converts to another precision, keeping the pitch.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            width: self.width,
            height: self.height,
            pitch: self.pitch,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: Real> fmt::Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FeatureMap {}x{} (pitch {})", self.width, self.height, self.pitch)?;
        for y in 0..self.height {
            writeln!(f, "  {:?}", self.row(y))?;
        }
        Ok(())
    }
}

/// Compares logical cells of two equally shaped maps; pitch may differ.
pub fn map_equal<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, tol: T) -> Result<bool> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok((0..a.height).all(|y| {
        a.row(y)
            .iter()
            .zip(b.row(y))
            .all(|(&p, &q)| (p - q).abs() <= tol)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pitch_rounds_up_to_quantum() {
        assert_eq!(FeatureMap::<f32>::new(29, 29, 32).unwrap().pitch(), 32);
        assert_eq!(FeatureMap::<f32>::new(33, 1, 32).unwrap().pitch(), 64);
        assert_eq!(FeatureMap::<f32>::new(8, 8, 1).unwrap().pitch(), 8);
        assert_eq!(FeatureMap::<f32>::new(32, 2, 32).unwrap().pitch(), 32);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(matches!(FeatureMap::<f64>::new(0, 3, 32), Err(Error::Dimension(_))));
        assert!(matches!(FeatureMap::<f64>::new(3, 0, 32), Err(Error::Dimension(_))));
        assert!(matches!(FeatureMap::<f64>::new(3, 3, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn new_map_is_zeroed() {
        let m = FeatureMap::<f64>::new(5, 3, 4).unwrap();
        assert!(m.storage().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equality_ignores_padding() {
        let mut a = FeatureMap::<f64>::new(3, 2, 8).unwrap();
        let b = FeatureMap::<f64>::new(3, 2, 1).unwrap();
        a.storage_mut()[5] = 99.0; // padding of row 0
        assert!(map_equal(&a, &a.clone(), 0.0).unwrap());
        assert!(map_equal(&a, &b, 0.0).unwrap());
    }

    #[test]
    fn equality_detects_cell_difference() {
        let a = FeatureMap::<f64>::new(4, 4, 32).unwrap();
        let mut b = a.clone();
        b.set(2, 3, 1e-3);
        assert!(!map_equal(&a, &b, 1e-6).unwrap());
        assert!(map_equal(&a, &b, 1e-2).unwrap());
    }

    #[test]
    fn equality_rejects_shape_mismatch() {
        let a = FeatureMap::<f64>::new(4, 4, 32).unwrap();
        let b = FeatureMap::<f64>::new(4, 5, 32).unwrap();
        assert!(matches!(map_equal(&a, &b, 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn precision_parses() {
        assert_eq!("single".parse::<Precision>().unwrap(), Precision::Single);
        assert_eq!("double".parse::<Precision>().unwrap(), Precision::Double);
        assert!("half".parse::<Precision>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn write_then_read_round_trips(w in 1usize..40, h in 1usize..10, q in 1usize..40, seed in any::<u64>()) {
                let mut m = FeatureMap::<f64>::new(w, h, q).unwrap();
                prop_assert!(m.pitch() >= w && m.pitch().is_multiple_of(q) && m.pitch() < w + q);
                let value = |x: usize, y: usize| ((x * 31 + y * 17) as u64 ^ seed) as f64;
                for y in 0..h {
                    for x in 0..w {
                        m.set(x, y, value(x, y));
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(m.get(x, y), value(x, y));
                    }
                }
            }
        }
    }
}
