//! Row-major H×W grids: pointmaps, depth maps, masks, confidence maps.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Per-pixel 3D points in the owning camera's frame.
pub type PointMap = Grid<Vector3<f64>>;
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;
/// Per-pixel confidence logits.
pub type ConfidenceMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

impl<T> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} needs {} elements, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                data.push(f(v, u));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        let w = self.width;
        &mut self.data[row * w + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (row, col): (usize, usize)) -> &T {
        self.get(row, col)
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        self.get_mut(row, col)
    }
}

impl PointMap {
    /// z channel as a depth map.
    pub fn depth(&self) -> DepthMap {
        self.map(|p| p.z)
    }

    pub fn scaled(&self, s: f64) -> PointMap {
        self.map(|p| p * s)
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn check_shape<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )))
    }
}
