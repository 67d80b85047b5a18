//! Rectangular grids, input quantization and interpolating value tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Upper limit on grid dimension; interpolation keeps per-axis scratch on
/// the stack.
pub const MAX_DIM: usize = 8;

const SNAPSHOT_MAGIC: &[u8; 4] = b"VITB";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("axis {axis}: lower bound {lower} must be below upper bound {upper}")]
    InvalidBounds { axis: usize, lower: f64, upper: f64 },
    #[error("axis {axis}: need at least 2 points, got {count}")]
    TooFewPoints { axis: usize, count: usize },
    #[error("grid dimension {0} is not supported (1..={MAX_DIM})")]
    Dimension(usize),
    #[error("bounds/count length mismatch")]
    LengthMismatch,
    #[error("index {index:?} out of range for counts {counts:?}")]
    IndexOutOfRange {
        index: Vec<usize>,
        counts: Vec<usize>,
    },
    #[error("value table expects {expected} values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("value table entry {index} is negative or non-finite: {value}")]
    BadValue { index: usize, value: f64 },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GridSpec<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub counts: Vec<usize>,
}

/// Equally spaced tensor grid, both endpoints included on every axis.
/// Nodes are numbered row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec<T>", into = "GridSpec<T>", bound = "T: Scalar")]
pub struct RectGrid<T> {
    lower: Vec<T>,
    upper: Vec<T>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    inv_step: Vec<T>,
}

/// Grid over the state space.
pub type StateGrid<T> = RectGrid<T>;
/// Quantized inputs; every node is a candidate input.
pub type InputGrid<T> = RectGrid<T>;

impl<T: Scalar> TryFrom<GridSpec<T>> for RectGrid<T> {
    type Error = GridError;
    fn try_from(s: GridSpec<T>) -> Result<Self, GridError> {
        RectGrid::new(s.lower, s.upper, s.counts)
    }
}

impl<T: Scalar> From<RectGrid<T>> for GridSpec<T> {
    fn from(g: RectGrid<T>) -> Self {
        GridSpec {
            lower: g.lower,
            upper: g.upper,
            counts: g.counts,
        }
    }
}

impl<T: Scalar> RectGrid<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>, counts: Vec<usize>) -> Result<Self, GridError> {
        if lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(GridError::LengthMismatch);
        }
        let n = counts.len();
        if n == 0 || n > MAX_DIM {
            return Err(GridError::Dimension(n));
        }
        for axis in 0..n {
            if !(lower[axis] < upper[axis]) || !lower[axis].is_finite() || !upper[axis].is_finite()
            {
                return Err(GridError::InvalidBounds {
                    axis,
                    lower: lower[axis].to_f64_lossy(),
                    upper: upper[axis].to_f64_lossy(),
                });
            }
            if counts[axis] < 2 {
                return Err(GridError::TooFewPoints {
                    axis,
                    count: counts[axis],
                });
            }
        }
        let mut strides = vec![1; n];
        for axis in (0..n - 1).rev() {
            strides[axis] = strides[axis + 1] * counts[axis + 1];
        }
        let inv_step = (0..n)
            .map(|a| T::from_usize_lossy(counts[a] - 1) / (upper[a] - lower[a]))
            .collect();
        Ok(RectGrid {
            lower,
            upper,
            counts,
            strides,
            inv_step,
        })
    }

    /// Single-axis grid, convenient for scalar inputs.
    pub fn uniform_1d(lower: T, upper: T, count: usize) -> Result<Self, GridError> {
        Self::new(vec![lower], vec![upper], vec![count])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.strides[0] * self.counts[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Coordinate of node `i` on `axis`; exact at both ends, and exactly zero
    /// at the midpoint of a symmetric axis with an odd count.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> T {
        let n = self.counts[axis] - 1;
        if i == 0 {
            self.lower[axis]
        } else if i >= n {
            self.upper[axis]
        } else {
            let (a, b) = (T::from_usize_lossy(n - i), T::from_usize_lossy(i));
            (self.lower[axis] * a + self.upper[axis] * b) / T::from_usize_lossy(n)
        }
    }

    pub fn flatten(&self, index: &[usize]) -> Result<usize, GridError> {
        if index.len() != self.dim() || index.iter().zip(&self.counts).any(|(&i, &c)| i >= c) {
            return Err(GridError::IndexOutOfRange {
                index: index.to_vec(),
                counts: self.counts.clone(),
            });
        }
        Ok(index.iter().zip(&self.strides).map(|(i, s)| i * s).sum())
    }

    pub fn unflatten(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| (flat / s) % c)
            .collect()
    }

    /// State of the node with multi-index `index`.
    pub fn node_state(&self, index: &[usize]) -> Result<Vec<T>, GridError> {
        self.flatten(index)?;
        Ok(index
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.coord(axis, i))
            .collect())
    }

    /// Writes the coordinates of flat node `flat` into `out`.
    #[inline]
    pub fn node_into(&self, flat: usize, out: &mut [T]) {
        for axis in 0..self.dim() {
            let i = (flat / self.strides[axis]) % self.counts[axis];
            out[axis] = self.coord(axis, i);
        }
    }

    /// All node coordinates, `dim` values per node, in flat order.
    pub fn points_flat(&self) -> Vec<T> {
        let d = self.dim();
        let mut out = vec![T::zero(); self.len() * d];
        for (flat, chunk) in out.chunks_mut(d).enumerate() {
            self.node_into(flat, chunk);
        }
        out
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Index of a node equal to `x` coordinate-wise, if any.
    pub fn exact_node(&self, x: &[T]) -> Option<usize> {
        let mut flat = 0;
        for axis in 0..self.dim() {
            let t = (x[axis] - self.lower[axis]) * self.inv_step[axis];
            let r = t.round().to_usize()?;
            if r >= self.counts[axis] || self.coord(axis, r) != x[axis] {
                return None;
            }
            flat += r * self.strides[axis];
        }
        Some(flat)
    }

    /// True when the grid has a node at the origin.
    pub fn has_exact_zero(&self) -> bool {
        self.exact_node(&vec![T::zero(); self.dim()]).is_some()
    }

    /// Cell lookup on `axis` after clamping: `(lower index, fraction)`.
    /// A point that coincides with a node gets fraction exactly 0 or 1.
    #[inline]
    fn locate(&self, axis: usize, x: T) -> (usize, T, bool) {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        let clamped = !(x >= lo && x <= hi);
        let xc = x.max(lo).min(hi);
        let last = self.counts[axis] - 2;
        let t = (xc - lo) * self.inv_step[axis];
        let mut i0 = t.floor().to_usize().unwrap_or(0).min(last);
        let mut frac = t - T::from_usize_lossy(i0);
        let near = T::lit(1e-6);
        if frac < near || frac > T::one() - near {
            let r = t.round().to_usize().unwrap_or(0).min(last + 1);
            if self.coord(axis, r) == xc {
                i0 = r.min(last);
                frac = if r > last { T::one() } else { T::zero() };
            }
        }
        (i0, frac.max(T::zero()).min(T::one()), clamped)
    }

    /// Like [`locate`](Self::locate) but the fraction is left unbounded for
    /// points outside the box.
    #[inline]
    fn locate_extrapolated(&self, axis: usize, x: T) -> (usize, T, bool) {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        if x < lo {
            (0, (x - lo) * self.inv_step[axis], true)
        } else if x > hi {
            let last = self.counts[axis] - 2;
            (
                last,
                (x - self.coord(axis, last)) * self.inv_step[axis],
                true,
            )
        } else {
            self.locate(axis, x)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    #[default]
    Multilinear,
    NearestNeighbor,
}

impl InterpMode {
    fn tag(self) -> u8 {
        match self {
            InterpMode::Multilinear => 0,
            InterpMode::NearestNeighbor => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(InterpMode::Multilinear),
            1 => Some(InterpMode::NearestNeighbor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampPolicy {
    /// Out-of-grid points take the value at their projection onto the box.
    #[default]
    ClampToBounds,
    /// Same lookup, but the backup and the lookahead discard candidates whose
    /// successor leaves the box, i.e. the box acts as a state constraint.
    ExcludeOutside,
    /// Multilinear tables extend their boundary cells linearly outside the
    /// box (floored at zero); nearest-neighbour tables clamp.
    LinearExtrapolation,
}

impl ClampPolicy {
    fn tag(self) -> u8 {
        match self {
            ClampPolicy::ClampToBounds => 0,
            ClampPolicy::ExcludeOutside => 1,
            ClampPolicy::LinearExtrapolation => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(ClampPolicy::ClampToBounds),
            1 => Some(ClampPolicy::ExcludeOutside),
            2 => Some(ClampPolicy::LinearExtrapolation),
            _ => None,
        }
    }
}

/// Values on the nodes of a [`StateGrid`] plus the rule used off-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable<T> {
    grid: StateGrid<T>,
    values: Vec<T>,
    interp: InterpMode,
    clamp: ClampPolicy,
}

impl<T: Scalar> ValueTable<T> {
    pub fn zeros(grid: StateGrid<T>, interp: InterpMode) -> Self {
        let values = vec![T::zero(); grid.len()];
        ValueTable {
            grid,
            values,
            interp,
            clamp: ClampPolicy::ClampToBounds,
        }
    }

    /// Checked constructor: one finite, non-negative value per node.
    pub fn from_values(
        grid: StateGrid<T>,
        values: Vec<T>,
        interp: InterpMode,
    ) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((index, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= T::zero()))
        {
            return Err(GridError::BadValue {
                index,
                value: v.to_f64_lossy(),
            });
        }
        Ok(ValueTable {
            grid,
            values,
            interp,
            clamp: ClampPolicy::ClampToBounds,
        })
    }

    pub(crate) fn from_values_unchecked(
        grid: StateGrid<T>,
        values: Vec<T>,
        interp: InterpMode,
    ) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ValueTable {
            grid,
            values,
            interp,
            clamp: ClampPolicy::ClampToBounds,
        }
    }

    pub fn grid(&self) -> &StateGrid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn interp(&self) -> InterpMode {
        self.interp
    }

    pub fn clamp_policy(&self) -> ClampPolicy {
        self.clamp
    }

    pub fn with_interp(mut self, interp: InterpMode) -> Self {
        self.interp = interp;
        self
    }

    pub fn with_clamp_policy(mut self, clamp: ClampPolicy) -> Self {
        self.clamp = clamp;
        self
    }

    #[inline]
    pub fn value_at(&self, x: &[T]) -> T {
        self.value_at_flagged(x).0
    }

    /// Interpolated value and whether `x` had to be clamped into the grid.
    #[inline]
    pub fn value_at_flagged(&self, x: &[T]) -> (T, bool) {
        let g = &self.grid;
        let extrapolate = self.clamp == ClampPolicy::LinearExtrapolation;
        match self.interp {
            InterpMode::Multilinear if g.dim() == 2 && extrapolate => {
                let (i, fx, cx) = g.locate_extrapolated(0, x[0]);
                let (j, fy, cy) = g.locate_extrapolated(1, x[1]);
                let s = g.strides[0];
                let base = i * s + j;
                let v = &self.values;
                let one = T::one();
                let bottom = v[base] * (one - fy) + v[base + 1] * fy;
                let top = v[base + s] * (one - fy) + v[base + s + 1] * fy;
                ((bottom * (one - fx) + top * fx).max(T::zero()), cx || cy)
            }
            InterpMode::Multilinear if g.dim() == 2 => {
                let (i, fx, cx) = g.locate(0, x[0]);
                let (j, fy, cy) = g.locate(1, x[1]);
                let s = g.strides[0];
                let base = i * s + j;
                let v = &self.values;
                let one = T::one();
                let bottom = v[base] * (one - fy) + v[base + 1] * fy;
                let top = v[base + s] * (one - fy) + v[base + s + 1] * fy;
                (bottom * (one - fx) + top * fx, cx || cy)
            }
            InterpMode::Multilinear => {
                let n = g.dim();
                let mut idx = [0usize; MAX_DIM];
                let mut frac = [T::zero(); MAX_DIM];
                let mut clamped = false;
                for axis in 0..n {
                    let (i, f, c) = if extrapolate {
                        g.locate_extrapolated(axis, x[axis])
                    } else {
                        g.locate(axis, x[axis])
                    };
                    idx[axis] = i;
                    frac[axis] = f;
                    clamped |= c;
                }
                let base: usize = (0..n).map(|a| idx[a] * g.strides[a]).sum();
                let mut acc = T::zero();
                for corner in 0..(1usize << n) {
                    let mut w = T::one();
                    let mut off = base;
                    for axis in 0..n {
                        if corner >> (n - 1 - axis) & 1 == 1 {
                            w = w * frac[axis];
                            off += g.strides[axis];
                        } else {
                            w = w * (T::one() - frac[axis]);
                        }
                    }
                    acc = acc + w * self.values[off];
                }
                (if extrapolate { acc.max(T::zero()) } else { acc }, clamped)
            }
            InterpMode::NearestNeighbor => {
                let (flat, clamped) = self.nearest_node(x);
                (self.values[flat], clamped)
            }
        }
    }

    /// Closest node after clamping; ties go to the lower index.
    #[inline]
    pub fn nearest_node(&self, x: &[T]) -> (usize, bool) {
        let g = &self.grid;
        let half = T::lit(0.5);
        let mut flat = 0;
        let mut clamped = false;
        for axis in 0..g.dim() {
            let (i, f, c) = g.locate(axis, x[axis]);
            clamped |= c;
            let k = if f > half { i + 1 } else { i };
            flat += k * g.strides[axis];
        }
        (flat, clamped)
    }

    /// `max - min` over the node values enclosing `x`; a cheap local
    /// interpolation-error scale.
    pub fn cell_spread(&self, x: &[T]) -> T {
        let g = &self.grid;
        let n = g.dim();
        let mut base = 0;
        for axis in 0..n {
            base += g.locate(axis, x[axis]).0 * g.strides[axis];
        }
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for corner in 0..(1usize << n) {
            let off: usize = (0..n)
                .filter(|a| corner >> a & 1 == 1)
                .map(|a| g.strides[a])
                .sum();
            let v = self.values[base + off];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &b| a.max(b))
    }

    /// Binary snapshot: magic, version, dimension, interpolation and clamp
    /// tags, per-axis `(count, lower, upper)`, then the values, all
    /// little-endian with reals stored as `f64`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.dim() as u16).to_le_bytes())?;
        w.write_all(&[self.interp.tag(), self.clamp.tag()])?;
        for axis in 0..self.grid.dim() {
            w.write_all(&(self.grid.counts[axis] as u64).to_le_bytes())?;
            w.write_all(&self.grid.lower[axis].to_f64_lossy().to_le_bytes())?;
            w.write_all(&self.grid.upper[axis].to_f64_lossy().to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(GridError::Snapshot("bad magic".into()));
        }
        let version = read_u16(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(GridError::Snapshot(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u16(&mut r)? as usize;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let interp = InterpMode::from_tag(tags[0])
            .ok_or_else(|| GridError::Snapshot(format!("unknown interpolation tag {}", tags[0])))?;
        let clamp = ClampPolicy::from_tag(tags[1])
            .ok_or_else(|| GridError::Snapshot(format!("unknown clamp tag {}", tags[1])))?;
        let (mut lower, mut upper, mut counts) = (vec![], vec![], vec![]);
        for _ in 0..dim {
            counts.push(read_u64(&mut r)? as usize);
            lower.push(T::lit(read_f64(&mut r)?));
            upper.push(T::lit(read_f64(&mut r)?));
        }
        let grid = RectGrid::new(lower, upper, counts)?;
        let len = read_u64(&mut r)? as usize;
        if len != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                got: len,
            });
        }
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Ok(Self::from_values(grid, values, interp)?.with_clamp_policy(clamp))
    }

    /// CSV with columns `i0.., x0.., value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GridError> {
        let n = self.grid.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..n).map(|a| format!("i{a}")).collect();
        header.extend((0..n).map(|a| format!("x{a}")));
        header.push("value".into());
        out.write_record(&header)?;
        let mut x = vec![T::zero(); n];
        for (flat, v) in self.values.iter().enumerate() {
            self.grid.node_into(flat, &mut x);
            let mut rec: Vec<String> = self
                .grid
                .unflatten(flat)
                .iter()
                .map(|i| i.to_string())
                .collect();
            rec.extend(x.iter().map(|c| c.to_string()));
            rec.push(v.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn read_u16<R: Read>(r: &mut R) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: Vec<f64>) -> ValueTable<f64> {
        let g = RectGrid::uniform_1d(0.0, 1.0, values.len()).unwrap();
        ValueTable::from_values(g, values, InterpMode::Multilinear).unwrap()
    }

    #[test]
    fn zero_table_is_zero() {
        let g = RectGrid::new(vec![-1.0, -2.0], vec![1.0, 2.0], vec![5, 7]).unwrap();
        let t = ValueTable::zeros(g, InterpMode::Multilinear);
        assert_eq!(t.value_at(&[0.3, -5.0]), 0.0);
    }

    #[test]
    fn linear_interpolation_and_clamp() {
        let t = line(vec![0.0, 10.0]);
        assert_eq!(t.value_at(&[0.25]), 2.5);
        let (v, clamped) = t.value_at_flagged(&[1.7]);
        assert_eq!(v, 10.0);
        assert!(clamped);
        assert!(!t.value_at_flagged(&[0.5]).1);
    }

    #[test]
    fn node_states() {
        let g = RectGrid::uniform_1d(-10.0, 10.0, 340).unwrap();
        assert_eq!(g.node_state(&[0]).unwrap(), vec![-10.0]);
        assert_eq!(g.node_state(&[339]).unwrap(), vec![10.0]);
        let g3 = RectGrid::uniform_1d(-1.0, 1.0, 3).unwrap();
        assert_eq!(g3.node_state(&[1]).unwrap(), vec![0.0]);
        assert!(matches!(
            g3.node_state(&[3]),
            Err(GridError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn odd_symmetric_input_grid_contains_zero() {
        let u = InputGrid::uniform_1d(-20.0, 20.0, 909).unwrap();
        assert_eq!(u.coord(0, 454), 0.0);
        assert!(u.has_exact_zero());
        let even = InputGrid::uniform_1d(-20.0, 20.0, 908).unwrap();
        assert!(!even.has_exact_zero());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(RectGrid::new(vec![1.0], vec![1.0], vec![3]).is_err());
        assert!(RectGrid::new(vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(RectGrid::<f64>::new(vec![], vec![], vec![]).is_err());
        let g = RectGrid::uniform_1d(0.0, 1.0, 2).unwrap();
        assert!(ValueTable::from_values(g.clone(), vec![0.0], InterpMode::Multilinear).is_err());
        assert!(ValueTable::from_values(g, vec![0.0, -1.0], InterpMode::Multilinear).is_err());
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let t = line(vec![1.0, 2.0, 3.0]).with_interp(InterpMode::NearestNeighbor);
        assert_eq!(t.value_at(&[0.25]), 1.0);
        assert_eq!(t.value_at(&[0.26]), 2.0);
        assert_eq!(t.value_at(&[0.9]), 3.0);
    }

    #[test]
    fn three_dimensional_interpolation_of_affine_function() {
        let g = RectGrid::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 4.0], vec![3, 4, 5]).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] + 3.0 * (x[1] + 1.0) + 0.5 * x[2];
        let pts = g.points_flat();
        let vals = pts.chunks(3).map(f).collect();
        let t = ValueTable::from_values(g, vals, InterpMode::Multilinear).unwrap();
        for x in [[0.3, 0.1, 2.7], [0.99, -0.95, 3.99], [0.5, 0.0, 3.0]] {
            assert!((t.value_at(&x) - f(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let g = RectGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![4, 3]).unwrap();
        let vals = (0..12).map(|i| i as f64 * 1.5).collect();
        let t = ValueTable::from_values(g, vals, InterpMode::NearestNeighbor).unwrap();
        let mut buf = Vec::new();
        t.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VITB");
        let back: ValueTable<f64> = ValueTable::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        buf[0] = b'X';
        assert!(ValueTable::<f64>::read_snapshot(buf.as_slice()).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_node() {
        let t = line(vec![0.0, 1.0, 4.0]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "i0,x0,value");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "1,0.5,1");
    }
}
