//! Equirectangular projection, back-projection to labelled point clouds and
//! top-down occupancy products (free floor, obstacles, room structure).
//!
//! Camera frame: z up, longitude 0 at the image centre column. Depth is the
//! Euclidean distance along the pixel ray.

use crate::error::{arg_err, shape_err, Result};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

/// Default height above the floor below which non-floor points block a cell.
pub const DEFAULT_CLEARANCE: f64 = 1.8;

/// Unit ray through image position `(u, v)`; pixel centres sit at `i + 0.5`
/// so integer coordinates address pixel centres.
pub fn pixel_to_ray(u: f64, v: f64, h: usize, w: usize) -> Result<[f64; 3]> {
    if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
        return Err(arg_err("pixel_to_ray", format!("pixel ({u}, {v}) outside {w}x{h}")));
    }
    let lon = 2.0 * PI * (u + 0.5) / w as f64 - PI;
    let lat = PI / 2.0 - PI * (v + 0.5) / h as f64;
    Ok([lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()])
}

/// Precomputed rays for every pixel of an `H × W` panorama, row-major.
#[derive(Clone, Debug)]
pub struct RayGrid {
    pub height: usize,
    pub width: usize,
    dirs: Vec<[f64; 3]>,
}

impl RayGrid {
    pub fn new(height: usize, width: usize) -> Self {
        // separable: one trig evaluation per row and per column
        let cols: Vec<(f64, f64)> = (0..width)
            .map(|u| {
                let lon = 2.0 * PI * (u as f64 + 0.5) / width as f64 - PI;
                (lon.cos(), lon.sin())
            })
            .collect();
        let mut dirs = Vec::with_capacity(height * width);
        for v in 0..height {
            let lat = PI / 2.0 - PI * (v as f64 + 0.5) / height as f64;
            let (cl, sl) = (lat.cos(), lat.sin());
            dirs.extend(cols.iter().map(|&(c, s)| [cl * c, cl * s, sl]));
        }
        Self { height, width, dirs }
    }

    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        self.dirs[v * self.width + u]
    }

    pub fn rays(&self) -> &[[f64; 3]] {
        &self.dirs
    }
}

/// Labelled, coloured points in the camera frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub labels: Vec<u8>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points whose label satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(u8) -> bool) -> PointCloud {
        let mut out = PointCloud::default();
        for i in 0..self.len() {
            if keep(self.labels[i]) {
                out.points.push(self.points[i]);
                out.colors.push(self.colors[i]);
                out.labels.push(self.labels[i]);
            }
        }
        out
    }

    /// ASCII PLY with per-vertex colour and label.
    pub fn write_ply<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", self.len())?;
        writeln!(out, "property float x\nproperty float y\nproperty float z")?;
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
        writeln!(out, "property uchar label\nend_header")?;
        for i in 0..self.len() {
            let [x, y, z] = self.points[i];
            let [r, g, b] = self.colors[i];
            writeln!(out, "{x} {y} {z} {r} {g} {b} {}", self.labels[i])?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ply(f)
    }
}

/// `depth · ray` for every valid pixel (mask true, depth finite and > 0).
///
/// `rgb` is interleaved `H·W·3`; `depth`, `labels` and `mask` are `H·W`.
pub fn backproject(
    depth: &[f64],
    rgb: &[u8],
    labels: &[u8],
    mask: Option<&[bool]>,
    h: usize,
    w: usize,
) -> Result<PointCloud> {
    let n = h * w;
    if depth.len() != n || rgb.len() != 3 * n || labels.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(shape_err("backproject", format!("inputs do not match a {h}x{w} panorama")));
    }
    let rays = RayGrid::new(h, w);
    let mut cloud = PointCloud::default();
    for (i, dir) in rays.rays().iter().enumerate() {
        let d = depth[i];
        if mask.is_some_and(|m| !m[i]) || !(d > 0.0) || !d.is_finite() {
            continue;
        }
        cloud.points.push([d * dir[0], d * dir[1], d * dir[2]]);
        cloud.colors.push([rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]]);
        cloud.labels.push(labels[i]);
    }
    Ok(cloud)
}

/// Keep only the structural classes.
pub fn room_structure(cloud: &PointCloud, structural: &[u8]) -> PointCloud {
    cloud.filter(|l| structural.contains(&l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Free,
    Obstacle,
    Unknown,
}

impl Cell {
    pub fn gray(self) -> u8 {
        match self {
            Cell::Obstacle => 0,
            Cell::Unknown => 128,
            Cell::Free => 255,
        }
    }
}

/// Top-down grid over the x–y plane; cell `(ix, iy)` covers
/// `[origin + i·cell, origin + (i+1)·cell)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major over `iy`, then `ix`.
    pub cells: Vec<Cell>,
}

impl OccupancyGrid {
    /// Smallest grid anchored at `min` covering `max`.
    pub fn covering(min: [f64; 2], max: [f64; 2], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(arg_err("occupancy_grid", format!("cell size must be positive, got {cell_size}")));
        }
        let count = |span: f64| ((span / cell_size - 1e-9).ceil() as usize).max(1);
        let (nx, ny) = (count(max[0] - min[0]), count(max[1] - min[1]));
        Ok(Self {
            origin: min,
            cell_size,
            nx,
            ny,
            cells: vec![Cell::Unknown; nx * ny],
        })
    }

    fn empty(cell_size: f64) -> Self {
        Self {
            origin: [0.0, 0.0],
            cell_size,
            nx: 0,
            ny: 0,
            cells: Vec::new(),
        }
    }

    /// Cell holding `(x, y)`; points on the far edge fall in the last cell.
    pub fn index(&self, x: f64, y: f64) -> (usize, usize) {
        let i = |v: f64, o: f64, n: usize| (((v - o) / self.cell_size).floor().max(0.0) as usize).min(n - 1);
        (i(x, self.origin[0], self.nx), i(y, self.origin[1], self.ny))
    }

    pub fn get(&self, ix: usize, iy: usize) -> Cell {
        self.cells[iy * self.nx + ix]
    }

    fn set(&mut self, ix: usize, iy: usize, c: Cell) {
        self.cells[iy * self.nx + ix] = c;
    }

    pub fn count(&self, c: Cell) -> usize {
        self.cells.iter().filter(|&&v| v == c).count()
    }

    /// Binary PGM (P5); row 0 is the largest y so the image reads as a map.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.nx, self.ny)?;
        let mut bytes = Vec::with_capacity(self.cells.len());
        for iy in (0..self.ny).rev() {
            bytes.extend((0..self.nx).map(|ix| self.get(ix, iy).gray()));
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        self.write_pgm(std::fs::File::create(path)?)
    }
}

/// Parameters shared by the grid products.
#[derive(Clone, Debug, PartialEq)]
pub struct GridParams {
    pub cell_size: f64,
    pub floor_class: u8,
    /// Height above the floor below which non-floor points are obstacles.
    pub clearance: f64,
    /// Classes ignored entirely (they neither block nor extend the grid).
    pub exclude: Vec<u8>,
}

impl GridParams {
    pub fn new(cell_size: f64, floor_class: u8) -> Self {
        Self {
            cell_size,
            floor_class,
            clearance: DEFAULT_CLEARANCE,
            exclude: Vec::new(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Floor-labelled cells are free; cells with a non-floor point below the
/// clearance are obstacles (obstacles win); the rest are unknown.
///
/// The floor height is the median z of floor points (the lowest point when
/// there are none).
pub fn occupancy(cloud: &PointCloud, params: &GridParams) -> Result<OccupancyGrid> {
    if !(params.clearance > 0.0) {
        return Err(arg_err("occupancy", format!("clearance must be positive, got {}", params.clearance)));
    }
    let used: Vec<usize> = (0..cloud.len()).filter(|&i| !params.exclude.contains(&cloud.labels[i])).collect();
    if used.is_empty() {
        return Ok(OccupancyGrid::empty(params.cell_size));
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for &i in &used {
        for a in 0..2 {
            min[a] = min[a].min(cloud.points[i][a]);
            max[a] = max[a].max(cloud.points[i][a]);
        }
    }
    let mut grid = OccupancyGrid::covering(min, max, params.cell_size)?;
    let floor_z: Vec<f64> = used
        .iter()
        .filter(|&&i| cloud.labels[i] == params.floor_class)
        .map(|&i| cloud.points[i][2])
        .collect();
    let floor = if floor_z.is_empty() {
        used.iter().map(|&i| cloud.points[i][2]).fold(f64::INFINITY, f64::min)
    } else {
        median(floor_z)
    };
    for &i in &used {
        let [x, y, z] = cloud.points[i];
        let (ix, iy) = grid.index(x, y);
        if cloud.labels[i] == params.floor_class {
            if grid.get(ix, iy) == Cell::Unknown {
                grid.set(ix, iy, Cell::Free);
            }
        } else if z - floor < params.clearance {
            grid.set(ix, iy, Cell::Obstacle);
        }
    }
    Ok(grid)
}

/// Free space for navigation.
pub fn free_floor(cloud: &PointCloud, floor_class: u8, cell_size: f64) -> Result<OccupancyGrid> {
    occupancy(cloud, &GridParams::new(cell_size, floor_class))
}

/// Obstacles, ignoring the excluded classes (typically the ceiling).
pub fn obstacle_map(
    cloud: &PointCloud,
    floor_class: u8,
    exclude: &[u8],
    cell_size: f64,
    clearance: f64,
) -> Result<OccupancyGrid> {
    occupancy(
        cloud,
        &GridParams {
            cell_size,
            floor_class,
            clearance,
            exclude: exclude.to_vec(),
        },
    )
}
