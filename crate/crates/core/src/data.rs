//! Datasets, loaders, the synthetic generator and stratified fold splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::rng::{self, tag};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A non-empty collection of equally shaped, labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    class_count: usize,
    name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, class_count: usize) -> Result<Self> {
        let name = name.into();
        let first = images
            .first()
            .ok_or_else(|| Error::Argument(format!("dataset '{name}' is empty")))?;
        if class_count == 0 {
            return Err(Error::Argument("class_count must be positive".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if !img.same_shape(first) {
                return Err(Error::Argument(format!(
                    "image {i} of '{name}' is {}x{}x{}, expected {}x{}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    first.height(),
                    first.width(),
                    first.channels()
                )));
            }
            if img.label() as usize >= class_count {
                return Err(Error::Argument(format!(
                    "image {i} of '{name}' has label {} but class_count is {class_count}",
                    img.label()
                )));
            }
        }
        Ok(Self {
            images,
            class_count,
            name,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn into_images(self) -> Vec<Image> {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `(height, width, channels)` shared by every image.
    pub fn shape(&self) -> (usize, usize, usize) {
        let img = &self.images[0];
        (img.height(), img.width(), img.channels())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for img in &self.images {
            counts[img.label() as usize] += 1;
        }
        counts
    }

    /// New dataset with the images at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Dataset> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        Dataset::new(name, images, self.class_count)
    }

    /// SHA-256 over shapes, labels and pixels, hex-encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.class_count as u64).to_le_bytes());
        for img in &self.images {
            hasher.update(img.to_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// One stratified shuffle of the training data into a model-training part
/// (`d_m`) and a policy-exploration part (`d_a`).
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub d_m: Dataset,
    pub d_a: Dataset,
    /// Source indices of `d_m`, in `d_m` order.
    pub m_indices: Vec<usize>,
    /// Source indices of `d_a`, in `d_a` order.
    pub a_indices: Vec<usize>,
}

/// Builds `k` independent stratified shuffle splits.
///
/// Within each class a fresh permutation is drawn and `round(ratio · n_c)`
/// samples go to `d_m` (at least one sample stays on each side), so per-class
/// proportions deviate from exact by at most half a sample.
pub fn stratified_kfold_split(data: &Dataset, k: usize, ratio: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, img) in data.images().iter().enumerate() {
        by_class[img.label() as usize].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Argument(format!(
                "class {class} has {} samples, fewer than the {k} folds",
                members.len()
            )));
        }
    }

    (0..k)
        .map(|fold| {
            let mut stream = rng::stream(seed, &[tag::SPLIT, fold as u64]);
            let mut m_indices = Vec::new();
            let mut a_indices = Vec::new();
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut stream);
                let n = shuffled.len();
                let take = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
                m_indices.extend_from_slice(&shuffled[..take]);
                a_indices.extend_from_slice(&shuffled[take..]);
            }
            m_indices.shuffle(&mut stream);
            a_indices.shuffle(&mut stream);
            Ok(FoldSplit {
                fold_index: fold,
                d_m: data.subset(format!("{}/fold{fold}/m", data.name()), &m_indices)?,
                d_a: data.subset(format!("{}/fold{fold}/a", data.name()), &a_indices)?,
                m_indices,
                a_indices,
            })
        })
        .collect()
}

/// On-disk dataset layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `<prefix>-images-idx3-ubyte` + `<prefix>-labels-idx1-ubyte`.
    Idx,
    /// `<root>/<class_index>/<name>.bin` image fixtures.
    RawDir,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Format::Idx),
            "raw-dir" | "raw" => Ok(Format::RawDir),
            other => Err(Error::Usage(format!("unknown dataset format '{other}'"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    match format {
        Format::Idx => load_idx(path),
        Format::RawDir => load_raw_dir(path),
    }
}

/// The two files of an IDX pair sharing `prefix`.
pub fn idx_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let s = prefix.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}-images-idx3-ubyte")),
        PathBuf::from(format!("{s}-labels-idx1-ubyte")),
    )
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, bytes.len(), "truncated header"))
}

fn load_idx(prefix: &Path) -> Result<Dataset> {
    let (images_path, labels_path) = idx_paths(prefix);
    let images = read(&images_path)?;
    let labels = read(&labels_path)?;

    let magic = be_u32(&images_path, &images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(&images_path, 0, format!("bad magic {magic:#010x}")));
    }
    let count = be_u32(&images_path, &images, 4)? as usize;
    let rows = be_u32(&images_path, &images, 8)? as usize;
    let cols = be_u32(&images_path, &images, 12)? as usize;
    let frame = rows * cols;
    if images.len() != 16 + count * frame {
        return Err(parse_err(
            &images_path,
            images.len().min(16 + count * frame),
            format!("expected {count} images of {rows}x{cols}, file has {} payload bytes", images.len() - 16),
        ));
    }

    let magic = be_u32(&labels_path, &labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(&labels_path, 0, format!("bad magic {magic:#010x}")));
    }
    let label_count = be_u32(&labels_path, &labels, 4)? as usize;
    if label_count != count {
        return Err(parse_err(&labels_path, 4, format!("{label_count} labels for {count} images")));
    }
    if labels.len() != 8 + count {
        return Err(parse_err(&labels_path, labels.len().min(8 + count), "label payload length mismatch"));
    }

    let class_count = labels[8..].iter().copied().max().map_or(0, |m| m as usize + 1);
    let out = images[16..]
        .chunks_exact(frame)
        .zip(&labels[8..])
        .map(|(px, &label)| Image::new(rows, cols, 1, px.to_vec(), u32::from(label)))
        .collect::<Result<Vec<_>>>()?;
    let name = prefix
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, out, class_count)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn load_raw_dir(root: &Path) -> Result<Dataset> {
    let mut classes = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry.file_name().unwrap().to_string_lossy().into_owned();
        let class: u32 = name
            .parse()
            .map_err(|_| Error::Usage(format!("class directory '{}' is not an integer", entry.display())))?;
        classes.push((class, entry));
    }
    classes.sort();
    let class_count = classes.len();
    for (expected, (class, dir)) in classes.iter().enumerate() {
        if *class as usize != expected {
            return Err(Error::Usage(format!(
                "class directories must be numbered 0..{class_count}, found {}",
                dir.display()
            )));
        }
    }

    let mut images = Vec::new();
    for (class, dir) in &classes {
        for file in sorted_entries(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let bytes = read(&file)?;
            let img = Image::from_bytes(&bytes).map_err(|(offset, msg)| Error::Parse {
                path: file.clone(),
                offset,
                message: msg,
            })?;
            if img.label() != *class {
                return Err(parse_err(&file, 12, format!("label {} stored under class {class}", img.label())));
            }
            images.push(img);
        }
    }
    let name = root
        .file_name()
        .map_or_else(|| "raw".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, images, class_count)
}

/// Writes `data` as `<root>/<class>/<index>.bin`; every class gets a directory.
pub fn save_raw_dir(data: &Dataset, root: &Path) -> Result<()> {
    for class in 0..data.class_count() {
        let dir = root.join(class.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, img) in data.images().iter().enumerate() {
        let path = root.join(img.label().to_string()).join(format!("{i:06}.bin"));
        fs::write(&path, img.to_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes `data` as an IDX pair at `prefix` (single-channel only).
pub fn save_idx(data: &Dataset, prefix: &Path) -> Result<()> {
    let (h, w, c) = data.shape();
    if c != 1 {
        return Err(Error::Usage("IDX output supports single-channel images only".into()));
    }
    if data.class_count() > 256 {
        return Err(Error::Usage("IDX labels are single bytes".into()));
    }
    let (images_path, labels_path) = idx_paths(prefix);
    let mut images = Vec::with_capacity(16 + data.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for img in data.images() {
        images.extend_from_slice(img.pixels());
        labels.push(img.label() as u8);
    }
    fs::write(&images_path, images).map_err(|e| Error::io(&images_path, e))?;
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

/// Parameters of the synthetic bar-pattern dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise, in gray levels.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize) -> Self {
        Self {
            classes,
            per_class,
            height: 16,
            width: 16,
            channels: 1,
            noise: 0.0,
        }
    }
}

/// Generates bright bar patterns on a dark background.
///
/// Class `c` draws `c / 2 + 1` bars, horizontal for even `c` and vertical for
/// odd `c`. Each image jitters the pattern by up to ±1 pixel and the bar
/// intensity by ±20 levels, so classes survive moderate shears, rotations,
/// translations and color changes. Images are interleaved by class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Argument(format!("synthetic data needs ≥ 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 {
        return Err(Error::Argument("synthetic data needs ≥ 1 image per class".into()));
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::Argument("synthetic images must be at least 8x8".into()));
    }
    let mut stream = rng::stream(seed, &[tag::SYNTH]);
    let noise = (spec.noise > 0.0)
        .then(|| Normal::new(0.0, spec.noise).map_err(|e| Error::Argument(e.to_string())))
        .transpose()?;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for class in 0..spec.classes {
            images.push(synth_image(spec, class, noise.as_ref(), &mut stream)?);
        }
    }
    Dataset::new(
        format!("synth-{}x{}", spec.classes, spec.per_class),
        images,
        spec.classes,
    )
}

fn synth_image(spec: &SynthSpec, class: usize, noise: Option<&Normal<f64>>, rng: &mut impl Rng) -> Result<Image> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let vertical = class % 2 == 1;
    let bars = class / 2 + 1;
    let extent = if vertical { w } else { h };
    let jitter = rng.random_range(-1i64..=1);
    let intensity = 220.0 + rng.random_range(-20.0..=20.0);
    let thickness = (extent / 8).max(1);
    // bars evenly spaced across the middle 3/4 of the image
    let span = extent * 3 / 4;
    let start = (extent - span) / 2;
    let centers: Vec<i64> = (0..bars)
        .map(|b| (start + span * (2 * b + 1) / (2 * bars)) as i64 + jitter)
        .collect();
    let mut pixels = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let coord = if vertical { x } else { y } as i64;
            let on = centers
                .iter()
                .any(|&ctr| coord >= ctr - thickness as i64 / 2 && coord < ctr - thickness as i64 / 2 + thickness as i64);
            let base = if on { intensity } else { 20.0 };
            for ch in 0..c {
                let n = noise.map_or(0.0, |d| d.sample(rng));
                pixels[(y * w + x) * c + ch] = (base + n).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(h, w, c, pixels, class as u32)
}
