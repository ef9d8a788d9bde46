//! On-disk layout: `<id>_rgb.png`, `<id>_depth.pfm`, `<id>_labels.png`, plus
//! newline-delimited split manifests `<split>.txt`.

use super::{classes, render_scene, Dataset, Sample, SceneSpec, IGNORE_LABEL};
use crate::error::{arg_err, Error, Result};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

/// Little-endian greyscale PFM; rows are stored bottom-up per the format.
pub fn write_pfm(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    if data.len() != height * width {
        return Err(arg_err("write_pfm", format!("{} values for {height}x{width}", data.len())));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "Pf\n{width} {height}\n-1.0\n")?;
    for v in (0..height).rev() {
        for &x in &data[v * width..(v + 1) * width] {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = || -> Result<String> {
        let mut s = String::new();
        r.read_line(&mut s)?;
        Ok(s.trim().to_string())
    };
    let bad = |d: String| Error::Format(format!("{}: {d}", path.display()));
    let magic = line()?;
    if magic != "Pf" {
        return Err(bad(format!("expected greyscale PFM, found {magic:?}")));
    }
    let dims = line()?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [width, height] = parsed[..] else {
        return Err(bad(format!("bad dimensions {dims:?}")));
    };
    let scale: f64 = line()?.parse().map_err(|_| bad("bad scale".into()))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * width * height {
        return Err(bad(format!("expected {} bytes of data, found {}", 4 * width * height, bytes.len())));
    }
    let mut data = vec![0.0; width * height];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (height - 1 - i / width, i % width);
        data[row * width + col] = x as f64;
    }
    Ok((data, height, width))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.height as u32, sample.width as u32);
    let rgb = RgbImage::from_raw(w, h, sample.rgb.clone()).ok_or_else(|| arg_err("save_sample", "rgb length"))?;
    rgb.save(dir.join(format!("{}_rgb.png", sample.id)))?;
    let labels = GrayImage::from_raw(w, h, sample.labels.clone()).ok_or_else(|| arg_err("save_sample", "label length"))?;
    labels.save(dir.join(format!("{}_labels.png", sample.id)))?;
    write_pfm(&dir.join(format!("{}_depth.pfm", sample.id)), &sample.depth, sample.height, sample.width)
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let rgb = image::open(dir.join(format!("{id}_rgb.png")))?.to_rgb8();
    let labels = image::open(dir.join(format!("{id}_labels.png")))?.to_luma8();
    let (depth, h, w) = read_pfm(&dir.join(format!("{id}_depth.pfm")))?;
    if rgb.dimensions() != (w as u32, h as u32) || labels.dimensions() != (w as u32, h as u32) {
        return Err(Error::Format(format!("{id}: rgb, label and depth extents differ")));
    }
    Ok(Sample {
        id: id.to_string(),
        height: h,
        width: w,
        rgb: rgb.into_raw(),
        depth,
        labels: labels.into_raw(),
    })
}

/// Samples in the native layout, listed by a split manifest.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
}

impl DiskDataset {
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let ids = read_manifest(&root.join(format!("{split}.txt")))?;
        Ok(Self {
            root: root.to_path_buf(),
            ids,
        })
    }
}

impl Dataset for DiskDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let id = self.ids.get(index).ok_or_else(|| arg_err("dataset", format!("index {index} out of range")))?;
        load_sample(&self.root, id)
    }
}

/// Real captures: 16-bit depth rasters (`<id>_depth.png`) in units of
/// `depth_scale` metres with a sentinel for missing values, and 8-bit label
/// ids optionally remapped into the training taxonomy.
#[derive(Clone, Debug)]
pub struct Depth16Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub depth_scale: f64,
    pub sentinel: u16,
    /// `label_map[raw] = class`; raw ids beyond the table become the ignore label.
    pub label_map: Option<Vec<u8>>,
}

impl Depth16Dataset {
    /// Millimetre-style defaults used by common indoor panorama sets: 1/512 m
    /// per unit, 65535 missing.
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            ids: read_manifest(&root.join(format!("{split}.txt")))?,
            depth_scale: 1.0 / 512.0,
            sentinel: u16::MAX,
            label_map: None,
        })
    }
}

impl Dataset for Depth16Dataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let id = self.ids.get(index).ok_or_else(|| arg_err("dataset", format!("index {index} out of range")))?;
        let rgb = image::open(self.root.join(format!("{id}_rgb.png")))?.to_rgb8();
        let raw: ImageBuffer<Luma<u16>, Vec<u16>> = image::open(self.root.join(format!("{id}_depth.png")))?.to_luma16();
        let labels = image::open(self.root.join(format!("{id}_labels.png")))?.to_luma8();
        let (w, h) = rgb.dimensions();
        if raw.dimensions() != (w, h) || labels.dimensions() != (w, h) {
            return Err(Error::Format(format!("{id}: rgb, label and depth extents differ")));
        }
        let depth = raw
            .into_raw()
            .into_iter()
            .map(|d| if d == self.sentinel { 0.0 } else { d as f64 * self.depth_scale })
            .collect();
        let labels = labels
            .into_raw()
            .into_iter()
            .map(|l| match &self.label_map {
                Some(map) => map.get(l as usize).copied().unwrap_or(IGNORE_LABEL),
                None => l,
            })
            .collect();
        Ok(Sample {
            id: id.clone(),
            height: h as usize,
            width: w as usize,
            rgb: rgb.into_raw(),
            depth,
            labels,
        })
    }
}

/// Render random scenes into `root` and write one manifest per split.
/// Scene `i` of split `s` depends only on `(seed, s, i)`.
pub fn generate_dataset(root: &Path, splits: &[(&str, usize)], height: usize, width: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(root)?;
    for (si, &(name, count)) in splits.iter().enumerate() {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((si as u64) << 32) ^ i as u64);
            let spec = SceneSpec::random(&mut rng);
            let id = format!("{name}_{i:05}");
            let sample = render_scene(&spec, &id, height, width)?;
            sample.validate(classes::NUM_CLASSES)?;
            save_sample(root, &sample)?;
            ids.push(id);
        }
        write_manifest(&root.join(format!("{name}.txt")), &ids)?;
        log::info!("wrote {count} {name} samples to {}", root.display());
    }
    Ok(())
}
