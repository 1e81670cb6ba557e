//! Per-pixel grids and the instance label map.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Row-major `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Self { height, width, data: vec![fill; height * width] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} grid needs {} cells, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }
}

/// Geometry of one labeled instance. Coordinates are `(x, y)` = (column, row).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGeometry {
    pub id: u32,
    pub area: usize,
    /// Mean of pixel coordinates.
    pub centroid: (f64, f64),
    /// Inclusive bounding box: top-left and bottom-right pixel.
    pub top_left: (usize, usize),
    pub bottom_right: (usize, usize),
}

impl InstanceGeometry {
    pub fn bbox_center(&self) -> (f64, f64) {
        (
            (self.top_left.0 + self.bottom_right.0) as f64 / 2.0,
            (self.top_left.1 + self.bottom_right.1) as f64 / 2.0,
        )
    }
}

/// Per-pixel instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabelMap(Grid<u32>);

impl InstanceLabelMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width, 0))
    }

    pub fn from_grid(grid: Grid<u32>) -> Self {
        Self(grid)
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        Grid::from_vec(height, width, data).map(Self)
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.0
    }

    pub fn grid_mut(&mut self) -> &mut Grid<u32> {
        &mut self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        *self.0.get(y, x)
    }

    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.0.set(y, x, id)
    }

    pub fn data(&self) -> &[u32] {
        self.0.data()
    }

    /// Sorted distinct non-zero ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.0.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance_count(&self) -> usize {
        self.ids().len()
    }

    pub fn geometry(&self) -> Vec<InstanceGeometry> {
        struct Acc {
            area: usize,
            sx: f64,
            sy: f64,
            min: (usize, usize),
            max: (usize, usize),
        }
        let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
        let w = self.width();
        for (i, &id) in self.0.data.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let a = acc.entry(id).or_insert(Acc { area: 0, sx: 0.0, sy: 0.0, min: (x, y), max: (x, y) });
            a.area += 1;
            a.sx += x as f64;
            a.sy += y as f64;
            a.min = (a.min.0.min(x), a.min.1.min(y));
            a.max = (a.max.0.max(x), a.max.1.max(y));
        }
        acc.into_iter()
            .map(|(id, a)| InstanceGeometry {
                id,
                area: a.area,
                centroid: (a.sx / a.area as f64, a.sy / a.area as f64),
                top_left: a.min,
                bottom_right: a.max,
            })
            .collect()
    }

    /// Relabel to `1..=K` in order of first appearance (row-major scan).
    pub fn relabel_contiguous(&self) -> Self {
        let mut next = 0u32;
        let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
        let data = self
            .0
            .data
            .iter()
            .map(|&v| {
                if v == 0 {
                    0
                } else {
                    *mapping.entry(v).or_insert_with(|| {
                        next += 1;
                        next
                    })
                }
            })
            .collect();
        Self(Grid { height: self.height(), width: self.width(), data })
    }

    /// Apply an id mapping; ids absent from `f`'s domain keep their value.
    pub fn relabel_with(&self, f: impl Fn(u32) -> u32) -> Self {
        Self(self.0.map(|&v| if v == 0 { 0 } else { f(v) }))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut out = Grid::new(h, w, 0u32);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y0 + y, x0 + x));
            }
        }
        Self(out)
    }
}
