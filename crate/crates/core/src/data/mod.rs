//! Samples, the synthetic scene generator, batch assembly and datasets.

mod io;
mod scene;

pub use io::{
    generate_dataset, load_sample, read_manifest, read_pfm, save_sample, write_manifest, write_pfm, Depth16Dataset,
    DiskDataset,
};
pub use scene::{render_scene, SceneBox, SceneSpec, DEFAULT_COLORS};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::geometry::{backproject, PointCloud};
use crate::tensor::Tensor;
use rand::Rng;

/// Synthetic taxonomy.
pub mod classes {
    pub const UNKNOWN: u8 = 0;
    pub const CEILING: u8 = 1;
    pub const FLOOR: u8 = 2;
    pub const WALL: u8 = 3;
    pub const CHAIR: u8 = 4;
    pub const TABLE: u8 = 5;
    pub const COLUMN: u8 = 6;
    pub const NUM_CLASSES: usize = 7;
    pub const NAMES: [&str; NUM_CLASSES] = ["unknown", "ceiling", "floor", "wall", "chair", "table", "column"];
    pub const STRUCTURAL: [u8; 3] = [FLOOR, CEILING, WALL];
}

pub use crate::losses::IGNORE_LABEL;

/// One panorama with ground truth. `rgb` is interleaved `H·W·3`; depth is
/// ray distance in metres with 0 marking invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.height * self.width;
        if self.width != 2 * self.height || n == 0 {
            return Err(shape_err("sample", format!("{}: extent {}x{} is not H x 2H", self.id, self.height, self.width)));
        }
        if self.rgb.len() != 3 * n || self.depth.len() != n || self.labels.len() != n {
            return Err(shape_err("sample", format!("{}: buffer lengths do not match extent", self.id)));
        }
        if let Some(d) = self.depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(arg_err("sample", format!("{}: invalid depth {d}", self.id)));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= num_classes && l != IGNORE_LABEL) {
            return Err(arg_err("sample", format!("{}: label {l} outside {num_classes} classes", self.id)));
        }
        Ok(())
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }

    /// Circular column shift: column `u` moves to `(u + k) mod W`.
    pub fn rolled(&self, k: usize) -> Sample {
        let (h, w) = (self.height, self.width);
        let k = k % w.max(1);
        let mut out = self.clone();
        for v in 0..h {
            for u in 0..w {
                let (src, dst) = (v * w + u, v * w + (u + k) % w);
                out.depth[dst] = self.depth[src];
                out.labels[dst] = self.labels[src];
                out.rgb[3 * dst..3 * dst + 3].copy_from_slice(&self.rgb[3 * src..3 * src + 3]);
            }
        }
        out
    }

    pub fn point_cloud(&self) -> Result<PointCloud> {
        backproject(&self.depth, &self.rgb, &self.labels, None, self.height, self.width)
    }

    /// RGB scaled to [0, 1] as `[1, 3, H, W]`.
    pub fn input_tensor(&self) -> Tensor {
        let n = self.height * self.width;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = self.rgb[3 * i + c] as f64 / 255.0;
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], data).expect("sample buffers match extent")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    /// Random column roll per sample.
    CircularRoll,
}

/// Network-ready batch. `labels` and `mask` are flattened `B·H·W`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Tensor,
    pub depth: Tensor,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

/// Stack samples; with `CircularRoll` each sample gets its own offset in `[0, W)`.
pub fn make_batch<R: Rng + ?Sized>(samples: &[Sample], augment: Augment, rng: &mut R) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Empty {
        op: "make_batch",
        detail: "no samples".into(),
    })?;
    let (h, w) = (first.height, first.width);
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(shape_err("make_batch", format!("{} is {}x{}, batch is {h}x{w}", s.id, s.height, s.width)));
    }
    let n = h * w;
    let b = samples.len();
    let mut input = vec![0.0; b * 3 * n];
    let mut depth = Vec::with_capacity(b * n);
    let mut labels = Vec::with_capacity(b * n);
    for (i, s) in samples.iter().enumerate() {
        let rolled;
        let s = match augment {
            Augment::None => s,
            Augment::CircularRoll => {
                rolled = s.rolled(rng.gen_range(0..w));
                &rolled
            }
        };
        for p in 0..n {
            for c in 0..3 {
                input[(i * 3 + c) * n + p] = s.rgb[3 * p + c] as f64 / 255.0;
            }
        }
        depth.extend_from_slice(&s.depth);
        labels.extend_from_slice(&s.labels);
    }
    let mask = depth.iter().map(|&d| d > 0.0).collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        input: Tensor::new(&[b, 3, h, w], input)?,
        depth: Tensor::new(&[b, 1, h, w], depth)?,
        labels,
        mask,
    })
}

/// Median-frequency balancing over the classes that occur; absent classes
/// and the ignore label get weight 0.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [u8]>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for map in labels {
        for &l in map {
            if l == IGNORE_LABEL {
                continue;
            }
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| arg_err("class_weights", format!("label {l} outside {num_classes} classes")))? += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty {
            op: "class_weights",
            detail: "no labelled pixels".into(),
        });
    }
    let mut freqs: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    freqs.sort_by(f64::total_cmp);
    let m = freqs.len();
    let median = if m % 2 == 1 {
        freqs[m / 2]
    } else {
        0.5 * (freqs[m / 2 - 1] + freqs[m / 2])
    };
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { median * total as f64 / c as f64 })
        .collect())
}

/// Indexed access to samples, independent of storage format.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl Dataset for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        <[Sample]>::get(self, index)
            .cloned()
            .ok_or_else(|| arg_err("dataset", format!("index {index} out of range")))
    }
}

impl Dataset for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Dataset::get(self.as_slice(), index)
    }
}
