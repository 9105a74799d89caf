//! Synthetic multi-label shapes dataset and a directory-format reader/writer.
//!
//! Directory layout:
//!
//! ```text
//! images/<id>.png   RGB8 image
//! masks/<id>.png    8-bit indexed (or grayscale) mask: 0 = BG, k = class k, 255 = ignore
//! labels.txt        "# toco-labels v1 classes=<c>" then "<id> <k> <k> ..." (1-based classes)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::{BG, IGNORE};
use crate::error::{Error, Result};

pub const MAX_SHAPE_CLASSES: usize = 6;
pub const SHAPE_NAMES: [&str; MAX_SHAPE_CLASSES] =
    ["circle", "triangle", "rectangle", "diamond", "ring", "cross"];

const BASE_COLORS: [[f32; 3]; MAX_SHAPE_CLASSES] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.85],
];

/// Ground-truth mask, reachable only through [`GroundTruth::for_evaluation`]
/// so training code paths never read it by accident.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth(Array2<u8>);

impl GroundTruth {
    pub fn for_evaluation(&self) -> &Array2<u8> {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3 × H × W` in `[0, 1]`.
    pub image: Array3<f32>,
    pub image_labels: Vec<bool>,
    gt: Option<GroundTruth>,
}

/// What the trainer may see of a sample.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub image: ArrayView3<'a, f32>,
    pub labels: &'a [bool],
}

impl Sample {
    pub fn new(id: String, image: Array3<f32>, image_labels: Vec<bool>, gt: Option<Array2<u8>>) -> Self {
        Self {
            id,
            image,
            image_labels,
            gt: gt.map(GroundTruth),
        }
    }

    pub fn training_view(&self) -> TrainItem<'_> {
        TrainItem {
            image: self.image.view(),
            labels: &self.image_labels,
        }
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.gt.as_ref()
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Derives an independent per-item seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn inside(kind: usize, dx: f32, dy: f32, r: f32) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            // upright triangle with apex at (0, -r), base at y = 0.8 r
            let base = 0.8 * r;
            if dy < -r || dy > base {
                return false;
            }
            let half_width = r * (dy + r) / (base + r);
            dx.abs() <= half_width
        }
        2 => dx.abs() <= r && dy.abs() <= 0.7 * r,
        3 => dx.abs() + dy.abs() <= r,
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize, lattice: usize) -> Array2<f32> {
    let grid = Array2::from_shape_simple_fn((lattice + 1, lattice + 1), || rng.gen_range(-1.0f32..1.0));
    let cell = size as f32 / lattice as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (fy, fx) = (y as f32 / cell, x as f32 / cell);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f32, fx - ix as f32);
        let a = grid[[iy, ix]] * (1.0 - tx) + grid[[iy, ix + 1]] * tx;
        let b = grid[[iy + 1, ix]] * (1.0 - tx) + grid[[iy + 1, ix + 1]] * tx;
        a * (1.0 - ty) + b * ty
    })
}

fn generate_one(index: usize, classes: usize, size: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, index as u64));
    let mut image = Array3::<f32>::zeros((3, size, size));
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let noise = value_noise(&mut rng, size, 4);
    for c in 0..3 {
        let tint = rng.gen_range(-0.08f32..0.08);
        for y in 0..size {
            for x in 0..size {
                image[[c, y, x]] = base[c] + tint + 0.15 * noise[[y, x]] + rng.gen_range(-0.04..0.04);
            }
        }
    }

    let mut mask = Array2::<u8>::from_elem((size, size), BG);
    let count = rng.gen_range(1..=3);
    let s = size as f32;
    for _ in 0..count {
        let kind = rng.gen_range(0..classes);
        let color: [f32; 3] = std::array::from_fn(|c| BASE_COLORS[kind][c] + rng.gen_range(-0.12..0.12));
        for _attempt in 0..50 {
            let r = rng.gen_range(s / 8.0..s / 4.0);
            let cx = rng.gen_range(r..s - r);
            let cy = rng.gen_range(r..s - r);
            let pixels: Vec<(usize, usize)> = (0..size)
                .flat_map(|y| (0..size).map(move |x| (y, x)))
                .filter(|&(y, x)| inside(kind, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r))
                .collect();
            if pixels.is_empty() || pixels.iter().any(|&(y, x)| mask[[y, x]] != BG) {
                continue;
            }
            for &(y, x) in &pixels {
                mask[[y, x]] = (kind + 1) as u8;
                for c in 0..3 {
                    image[[c, y, x]] = color[c] + rng.gen_range(-0.04..0.04);
                }
            }
            break;
        }
    }
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let labels = labels_from_mask(mask.view(), classes);
    Sample::new(format!("shape_{index:06}"), image, labels, Some(mask))
}

/// `n` images of 1–3 non-overlapping shapes, one shape kind per class, with
/// class-tinted colors, per-instance jitter and a textured background.
/// Pixel values are quantized to multiples of 1/255.
pub fn gen_shapes_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_SHAPE_CLASSES).contains(&classes) {
        return Err(Error::config(format!(
            "shape datasets support 2..={MAX_SHAPE_CLASSES} classes, got {classes}"
        )));
    }
    if size < 32 {
        return Err(Error::config(format!("image size {size} is below 32")));
    }
    let samples = (0..n).map(|i| generate_one(i, classes, size, seed)).collect();
    Ok(Dataset { classes, samples })
}

pub fn labels_from_mask(mask: ArrayView2<'_, u8>, classes: usize) -> Vec<bool> {
    let mut labels = vec![false; classes];
    for &v in mask.iter() {
        if v != BG && v != IGNORE && (v as usize) <= classes {
            labels[v as usize - 1] = true;
        }
    }
    labels
}

/// PASCAL-style color map used for label PNG palettes.
pub fn palette_color(index: u8) -> [u8; 3] {
    if index == IGNORE {
        return [224, 224, 192];
    }
    let mut c = [0u8; 3];
    let mut id = index;
    for shift in (0..8).rev() {
        for (ch, v) in c.iter_mut().enumerate() {
            *v |= ((id >> ch) & 1) << shift;
        }
        id >>= 3;
    }
    c
}

/// Writes an 8-bit indexed PNG whose pixel values are the label codes.
pub fn write_label_png(path: &Path, labels: ArrayView2<'_, u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..=255u8).flat_map(palette_color).collect();
    enc.set_palette(palette);
    let err = |e: png::EncodingError| Error::data(path, e.to_string());
    let mut writer = enc.write_header().map_err(err)?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer.write_image_data(&data).map_err(err)?;
    writer.finish().map_err(err)
}

/// Reads raw label codes from an indexed or 8-bit grayscale PNG.
pub fn read_label_png(path: &Path) -> Result<Array2<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::data(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::data(
            path,
            format!(
                "label mask must be 8-bit indexed or grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let stride = frame.line_size;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| buf[y * stride + x]))
}

pub fn write_rgb_png(path: &Path, image: ArrayView3<'_, f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

const LABELS_HEADER: &str = "# toco-labels v1";

pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let labels_path = dir.join("labels.txt");
    let mut text = format!("{LABELS_HEADER} classes={}\n", dataset.classes);
    for s in &dataset.samples {
        write_rgb_png(&images.join(format!("{}.png", s.id)), s.image.view())?;
        if let Some(gt) = s.ground_truth() {
            write_label_png(&masks.join(format!("{}.png", s.id)), gt.for_evaluation().view())?;
        }
        let ids: Vec<String> = s
            .image_labels
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(k, _)| (k + 1).to_string())
            .collect();
        text.push_str(&s.id);
        for id in ids {
            text.push(' ');
            text.push_str(&id);
        }
        text.push('\n');
    }
    let mut f = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&labels_path, e))
}

struct LabelsFile {
    classes: Option<usize>,
    entries: Vec<(String, Vec<usize>)>,
}

fn read_labels_file(path: &Path) -> Result<LabelsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LabelsFile {
        classes: None,
        entries: Vec::new(),
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.split_whitespace().find_map(|t| t.strip_prefix("classes=")) {
                out.classes = Some(v.parse().map_err(|_| {
                    Error::data(path, format!("line {}: bad class count {v:?}", lineno + 1))
                })?);
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line").to_string();
        let ids = parts
            .map(|t| {
                t.parse::<usize>()
                    .ok()
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::data(path, format!("line {}: bad class id {t:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.entries.push((id, ids));
    }
    Ok(out)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a dataset in the layout written by [`export_dataset`]. Image-level
/// labels come from `labels.txt` when listed there, otherwise from the mask.
pub fn load_dir_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.txt");
    let listed = if labels_path.exists() {
        Some(read_labels_file(&labels_path)?)
    } else {
        None
    };
    let images = list_pngs(&dir.join("images"))?;
    let mut raw = Vec::with_capacity(images.len());
    let mut max_class = 0usize;
    for path in &images {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(path, "file name is not valid UTF-8"))?
            .to_string();
        let image = read_rgb_png(path)?;
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.exists() {
            let m = read_label_png(&mask_path)?;
            if m.dim() != (image.dim().1, image.dim().2) {
                return Err(Error::data(&mask_path, "mask size differs from image size"));
            }
            max_class = max_class.max(m.iter().filter(|&&v| v != IGNORE).map(|&v| v as usize).max().unwrap_or(0));
            Some((m, mask_path))
        } else {
            None
        };
        let listed_ids = listed
            .as_ref()
            .and_then(|l| l.entries.iter().find(|(i, _)| *i == id))
            .map(|(_, ids)| ids.clone());
        if let Some(ids) = &listed_ids {
            max_class = max_class.max(ids.iter().copied().max().unwrap_or(0));
        }
        raw.push((id, image, mask, listed_ids));
    }
    let classes = listed.as_ref().and_then(|l| l.classes).unwrap_or(max_class);
    let mut samples = Vec::with_capacity(raw.len());
    for (id, image, mask, listed_ids) in raw {
        if let Some((m, path)) = &mask {
            if let Some(((y, x), &v)) = m
                .indexed_iter()
                .find(|(_, &v)| v != IGNORE && v as usize > classes)
            {
                return Err(Error::data(
                    path,
                    format!("unknown label index {v} at ({x}, {y}); expected 0..={classes} or 255"),
                ));
            }
        }
        let labels = match (&listed_ids, &mask) {
            (Some(ids), _) => {
                let mut l = vec![false; classes];
                for &k in ids {
                    if k > classes {
                        return Err(Error::data(&labels_path, format!("class id {k} exceeds {classes}")));
                    }
                    l[k - 1] = true;
                }
                l
            }
            (None, Some((m, _))) => labels_from_mask(m.view(), classes),
            (None, None) => {
                return Err(Error::data(
                    dir.join("images").join(format!("{id}.png")),
                    "no labels.txt entry and no mask to derive labels from",
                ))
            }
        };
        samples.push(Sample::new(id, image, labels, mask.map(|(m, _)| m)));
    }
    Ok(Dataset { classes, samples })
}
