//! Image loading and preprocessing, plus synthetic two-class datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chaoscrypt::Ciphertext;
use crate::error::{Error, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels do not form a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ITU-R BT.601 luma of an 8-bit RGB pixel, scaled to `[0, 1]`.
pub fn luma601(r: u8, g: u8, b: u8) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resample {
    #[default]
    Nearest,
    Bilinear,
}

/// Zero-pad the short side symmetrically to a square, then resample to
/// `side × side`.
pub fn resize_pad(image: &Image, side: usize, method: Resample) -> Image {
    let big = image.height.max(image.width);
    let mut square = Image::zeros(big, big);
    let top = (big - image.height) / 2;
    let left = (big - image.width) / 2;
    for r in 0..image.height {
        for c in 0..image.width {
            square.set(top + r, left + c, image.get(r, c));
        }
    }
    if big == side {
        return square;
    }
    let mut out = Image::zeros(side, side);
    let scale = big as f64 / side as f64;
    match method {
        Resample::Nearest => {
            let map: Vec<usize> = (0..side)
                .map(|i| (((i as f64 + 0.5) * scale) as usize).min(big - 1))
                .collect();
            for r in 0..side {
                for c in 0..side {
                    out.set(r, c, square.get(map[r], map[c]));
                }
            }
        }
        Resample::Bilinear => {
            let coord = |i: usize| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (big - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(big - 1);
                (lo, hi, (x - lo as f64) as f32)
            };
            for r in 0..side {
                let (r0, r1, fr) = coord(r);
                for c in 0..side {
                    let (c0, c1, fc) = coord(c);
                    let top = square.get(r0, c0) * (1.0 - fc) + square.get(r0, c1) * fc;
                    let bot = square.get(r1, c0) * (1.0 - fc) + square.get(r1, c1) * fc;
                    out.set(r, c, top * (1.0 - fr) + bot * fr);
                }
            }
        }
    }
    out
}

/// Zero every pixel whose centre lies outside the ellipse inscribed in the
/// image square.
pub fn ellipse_mask(image: &Image) -> Result<Image> {
    if !image.is_square() {
        return Err(Error::Shape(format!(
            "ellipse mask needs a square image, got {}x{}",
            image.height, image.width
        )));
    }
    let s = image.height as f64;
    let c = s / 2.0;
    let mut out = image.clone();
    for r in 0..image.height {
        for col in 0..image.width {
            let dy = (r as f64 + 0.5 - c) / c;
            let dx = (col as f64 + 0.5 - c) / c;
            if dx * dx + dy * dy > 1.0 {
                out.set(r, col, 0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: u8,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageDataset {
    pub side: usize,
    pub items: Vec<LabeledImage>,
}

impl LabeledImageDataset {
    pub fn new(side: usize, items: Vec<LabeledImage>) -> Result<Self> {
        for it in &items {
            if it.image.height != side || it.image.width != side {
                return Err(Error::Dataset(format!(
                    "{} is {}x{}, dataset side is {side}",
                    it.source, it.image.height, it.image.width
                )));
            }
            if it.label > 1 {
                return Err(Error::Dataset(format!("{} has label {}", it.source, it.label)));
            }
        }
        Ok(LabeledImageDataset { side, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(count of label 0, count of label 1)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let ones = self.items.iter().filter(|i| i.label == 1).count();
        (self.items.len() - ones, ones)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Fails unless both classes are present.
    pub fn require_two_classes(&self) -> Result<()> {
        let (a, b) = self.class_counts();
        if a == 0 || b == 0 {
            return Err(Error::Dataset(format!(
                "need both classes, found {a} of class 0 and {b} of class 1"
            )));
        }
        Ok(())
    }

    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("filename,label,source\n");
        for (i, it) in self.items.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", item_filename(i, it), it.label, csv_field(&it.source));
        }
        s
    }

    /// Write `root/{0,1}/NNNNN.pgm` (raw 8-bit) plus `root/manifest.csv`.
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        for label in ["0", "1"] {
            let dir = root.join(label);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, it) in self.items.iter().enumerate() {
            let path = root.join(item_filename(i, it));
            let bytes = encode_pgm(&it.image);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = root.join("manifest.csv");
        std::fs::write(&manifest, self.manifest_csv()).map_err(|e| Error::io(&manifest, e))
    }
}

fn item_filename(index: usize, item: &LabeledImage) -> String {
    format!("{}/{index:05}.pgm", item.label)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

/// Decode a PNG or PGM (plain or raw) file to a grayscale image.
pub fn decode_image_file(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_bytes(&bytes).map_err(|reason| Error::format(path, reason))
}

pub fn decode_image_bytes(bytes: &[u8]) -> std::result::Result<Image, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(g) => {
            g.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()
        }
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luma601(p[0], p[1], p[2]))
            .collect(),
    };
    Image::new(h, w, pixels).map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: LabeledImageDataset,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Options for [`load_image_dir`].
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub side: usize,
    pub resample: Resample,
    pub mask: bool,
}

impl LoadOptions {
    pub fn new(side: usize) -> Self {
        LoadOptions {
            side,
            resample: Resample::Nearest,
            mask: false,
        }
    }
}

/// Load `root/0/*` and `root/1/*` as normalised grayscale, pad-resized to
/// `options.side`. PNG, PGM and `.fptc` ciphertexts are accepted. Files are
/// read in filename order. Undecodable files are skipped and reported.
pub fn load_image_dir(root: &Path, options: LoadOptions) -> Result<LoadedDataset> {
    if options.side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for label in 0u8..=1 {
        let dir = root.join(label.to_string());
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        let before = items.len();
        for path in files {
            match load_one(&path) {
                Ok(img) => {
                    let mut img = resize_pad(&img, options.side, options.resample);
                    if options.mask {
                        img = ellipse_mask(&img)?;
                    }
                    let rel = path.strip_prefix(root).unwrap_or(&path);
                    items.push(LabeledImage {
                        image: img,
                        label,
                        source: rel.to_string_lossy().replace('\\', "/"),
                    });
                }
                Err(e) => skipped.push((path, e.to_string())),
            }
        }
        if items.len() == before {
            return Err(Error::Dataset(format!(
                "class {label} has no readable images under {}",
                dir.display()
            )));
        }
    }
    Ok(LoadedDataset {
        dataset: LabeledImageDataset::new(options.side, items)?,
        skipped,
    })
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "fptc")
    )
}

fn load_one(path: &Path) -> Result<Image> {
    if path.extension().and_then(|e| e.to_str()) == Some("fptc") {
        let ct = Ciphertext::load(path)?;
        Ok(ct.to_model_input())
    } else {
        decode_image_file(path)
    }
}

/// Two-class bar images: class 0 has bright rows `0, 4, 8, …`, class 1
/// the same columns; Gaussian noise `σ` is added and values clamped.
pub fn synth_dataset(n_per_class: usize, side: usize, noise: f64, seed: u64) -> Result<LabeledImageDataset> {
    if n_per_class == 0 || side == 0 {
        return Err(Error::Input("synthetic dataset needs n >= 1 and side >= 1".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Input(format!("noise must be a finite non-negative value, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut items = Vec::with_capacity(2 * n_per_class);
    for label in 0u8..=1 {
        for i in 0..n_per_class {
            let mut img = Image::zeros(side, side);
            for r in 0..side {
                for c in 0..side {
                    let on = if label == 0 { r % 4 == 0 } else { c % 4 == 0 };
                    let base = if on { 1.0 } else { 0.0 };
                    let v = if noise > 0.0 { base + dist.sample(&mut rng) } else { base };
                    img.set(r, c, v.clamp(0.0, 1.0) as f32);
                }
            }
            items.push(LabeledImage {
                image: img,
                label,
                source: format!("synthetic-bars/{label}/{i}"),
            });
        }
    }
    LabeledImageDataset::new(side, items)
}

/// Independent synthetic train and test sets with `n_train` and `n_test`
/// images per class, drawn from one seeded stream.
pub fn synth_train_test(
    n_train: usize,
    n_test: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Input("train and test sizes must be positive".into()));
    }
    let all = synth_dataset(n_train + n_test, side, noise, seed)?;
    let per = n_train + n_test;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in all.items.into_iter().enumerate() {
        if i % per < n_train {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((
        LabeledImageDataset::new(side, train)?,
        LabeledImageDataset::new(side, test)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            stratified: true,
        }
    }
}

/// Seeded train/test split. Items keep their original relative order.
pub fn split(
    dataset: &LabeledImageDataset,
    spec: &SplitSpec,
) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Input(format!("train fraction must be in (0, 1), got {f}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_train = vec![false; dataset.len()];
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0u8..=1)
            .map(|l| {
                (0..dataset.len())
                    .filter(|&i| dataset.items[i].label == l)
                    .collect()
            })
            .collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };
    for (g, idx) in groups.iter().enumerate() {
        if idx.len() < 2 {
            let what = if spec.stratified {
                format!("class {g}")
            } else {
                "dataset".to_string()
            };
            return Err(Error::Input(format!(
                "{what} has {} items, need at least 2 to split",
                idx.len()
            )));
        }
        let n_train = ((idx.len() as f64 * f).round() as usize).clamp(1, idx.len() - 1);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in dataset.items.iter().enumerate() {
        if in_train[i] {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((
        LabeledImageDataset::new(dataset.side, train)?,
        LabeledImageDataset::new(dataset.side, test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_of_primaries() {
        assert_eq!(luma601(255, 255, 255), 1.0);
        assert!((luma601(255, 0, 0) - 0.299).abs() < 1e-3);
    }

    #[test]
    fn resize_pad_identity_and_padding() {
        let img = Image::new(3, 3, (0..9).map(|v| v as f32 / 9.0).collect()).unwrap();
        assert_eq!(resize_pad(&img, 3, Resample::Nearest), img);

        let row = Image::new(1, 2, vec![0.25, 0.75]).unwrap();
        let out = resize_pad(&row, 2, Resample::Nearest);
        assert_eq!(out.pixels, vec![0.25, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn resize_keeps_aspect() {
        let rect = Image::new(100, 50, vec![1.0; 5000]).unwrap();
        let out = resize_pad(&rect, 64, Resample::Nearest);
        let mid = 32;
        let white = (0..64).filter(|&c| out.get(mid, c) == 1.0).count();
        assert!((31..=33).contains(&white), "{white}");
        let bil = resize_pad(&rect, 64, Resample::Bilinear);
        assert!(bil.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ellipse_mask_geometry() {
        let img = Image::new(256, 256, vec![0.5; 256 * 256]).unwrap();
        let m = ellipse_mask(&img).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(128, 128), 0.5);
        let frac = m.pixels.iter().filter(|&&v| v > 0.0).count() as f64 / (256.0 * 256.0);
        assert!((frac - std::f64::consts::FRAC_PI_4).abs() < 0.02, "{frac}");
        assert_eq!(ellipse_mask(&m).unwrap(), m);
        assert!(ellipse_mask(&Image::zeros(4, 5)).is_err());
    }

    #[test]
    fn synthetic_bars_construction() {
        let ds = synth_dataset(1, 10, 0.0, 0).unwrap();
        assert_eq!(ds.class_counts(), (1, 1));
        let bright = 10 * 10usize.div_ceil(4);
        for it in &ds.items {
            assert_eq!(it.image.pixels.iter().filter(|&&v| v == 1.0).count(), bright);
        }
        assert_ne!(ds.items[0].image, ds.items[1].image);
        assert_eq!(synth_dataset(3, 8, 0.1, 5).unwrap(), synth_dataset(3, 8, 0.1, 5).unwrap());
    }

    #[test]
    fn split_counts() {
        let ds = synth_dataset(10, 4, 0.1, 1).unwrap();
        let (tr, te) = split(&ds, &SplitSpec::new(0.8, 3)).unwrap();
        assert_eq!(tr.class_counts(), (8, 8));
        assert_eq!(te.class_counts(), (2, 2));
        let (tr2, _) = split(&ds, &SplitSpec::new(0.8, 3)).unwrap();
        assert_eq!(tr, tr2);

        let tiny = synth_dataset(1, 4, 0.0, 1).unwrap();
        assert!(matches!(split(&tiny, &SplitSpec::new(0.5, 0)), Err(Error::Input(_))));
        assert!(split(&ds, &SplitSpec::new(1.0, 0)).is_err());
    }

    #[test]
    fn pgm_round_trip_through_decoder() {
        let img = Image::from_bytes(2, 3, &[0, 10, 20, 30, 40, 255]).unwrap();
        let back = decode_image_bytes(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
        let plain = b"P2\n2 1\n255\n0 255\n";
        assert_eq!(decode_image_bytes(plain).unwrap().pixels, vec![0.0, 1.0]);
    }
}
