//! Dense 2D/3D scalar grids.
//!
//! Every grid is stored as `[depth, height, width]` in row-major order; a 2D
//! grid simply has `depth == 1` and `rank == 2`. Points are `[z, y, x]` in
//! pixel units with pixel centers at integer coordinates. For 2D data the
//! `z` component is always zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Spatial extent of a 2D or 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub rank: usize,
    pub dims: [usize; 3],
}

impl Extent {
    /// Builds an extent from per-axis sizes (`[h, w]` or `[d, h, w]`).
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        match *sizes {
            [h, w] => Ok(Extent {
                rank: 2,
                dims: [1, h, w],
            }),
            [d, h, w] => Ok(Extent {
                rank: 3,
                dims: [d, h, w],
            }),
            _ => Err(Error::shape(format!(
                "expected 2 or 3 spatial axes, got {}",
                sizes.len()
            ))),
        }
    }

    /// Per-axis sizes without the implicit depth axis of 2D grids.
    pub fn sizes(&self) -> Vec<usize> {
        self.dims[3 - self.rank..].to_vec()
    }

    /// Index of the first axis that is active for this rank.
    pub fn first_axis(&self) -> usize {
        3 - self.rank
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    /// True when `p` lies within `[0, size - 1]` on every active axis.
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| {
            if a < self.first_axis() {
                p[a] == 0.0
            } else {
                p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64
            }
        })
    }

    /// Lifts a `rank`-length coordinate into a `[z, y, x]` point.
    pub fn lift(&self, coords: &[f64]) -> Result<Point> {
        if coords.len() != self.rank {
            return Err(Error::shape(format!(
                "point has {} coordinates, grid rank is {}",
                coords.len(),
                self.rank
            )));
        }
        let mut p = [0.0; 3];
        p[3 - self.rank..].copy_from_slice(coords);
        Ok(p)
    }

    /// Drops the implicit depth coordinate of 2D points.
    pub fn project(&self, p: &Point) -> Vec<f64> {
        p[3 - self.rank..].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    extent: Extent,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(extent: Extent, value: T) -> Self {
        Grid {
            extent,
            data: vec![value; extent.len()],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(extent: Extent, data: Vec<T>) -> Result<Self> {
        if data.len() != extent.len() {
            return Err(Error::shape(format!(
                "grid data has {} elements, extent {:?} needs {}",
                data.len(),
                extent.dims,
                extent.len()
            )));
        }
        Ok(Grid { extent, data })
    }

    pub fn from_fn(extent: Extent, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = (0..extent.len()).map(|i| f(extent.coords(i))).collect();
        Grid { extent, data }
    }

    pub fn extent(&self) -> Extent {
        self.extent
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

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.extent.index(z, y, x)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            extent: self.extent,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Interpolation stencil along one axis: `(lo, hi, weight_of_hi)`.
#[inline]
fn axis_stencil(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    if n == 1 {
        return if c.abs() <= 0.5 {
            Some((0, 0, 0.0))
        } else {
            None
        };
    }
    if c < 0.0 || c > (n - 1) as f64 {
        return None;
    }
    let lo = (c.floor() as usize).min(n - 2);
    Some((lo, lo + 1, c - lo as f64))
}

impl Grid<f32> {
    /// Multilinear interpolation; `None` outside `[0, size - 1]`.
    pub fn sample_linear(&self, p: &Point) -> Option<f64> {
        let e = &self.extent;
        let (z0, z1, wz) = axis_stencil(p[0], e.dims[0])?;
        let (y0, y1, wy) = axis_stencil(p[1], e.dims[1])?;
        let (x0, x1, wx) = axis_stencil(p[2], e.dims[2])?;
        let v = |z, y, x| *self.get(z, y, x) as f64;
        let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
        let c00 = lerp(v(z0, y0, x0), v(z0, y0, x1), wx);
        let c01 = lerp(v(z0, y1, x0), v(z0, y1, x1), wx);
        let c10 = lerp(v(z1, y0, x0), v(z1, y0, x1), wx);
        let c11 = lerp(v(z1, y1, x0), v(z1, y1, x1), wx);
        Some(lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz))
    }
}

impl<T: Copy> Grid<T> {
    /// Nearest-neighbour lookup; `None` outside the grid.
    pub fn sample_nearest(&self, p: &Point) -> Option<T> {
        let e = &self.extent;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = p[a].round();
            if r < 0.0 || r >= e.dims[a] as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(*self.get(idx[0], idx[1], idx[2]))
    }
}
