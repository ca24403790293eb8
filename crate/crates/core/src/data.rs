//! Synthetic underwater pairs: procedural or file-based clean images,
//! wavelength-dependent attenuation toward a veiling color, PNG storage, a
//! TSV manifest, and seeded batch ordering.
//!
//! Resizing is bilinear with half-pixel centers: output pixel `i` samples
//! source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the image, and
//! interpolates `a + t * (b - a)` between the two nearest source pixels,
//! rows first, then columns.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CLEAN_DIR: &str = "clean";
pub const DEGRADED_DIR: &str = "degraded";

/// Parameters of the attenuation model
/// `out = clean * exp(-beta * d) + background * (1 - exp(-beta * d)) + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradeParams {
    /// Per-channel attenuation, red strongest.
    pub beta: [f32; 3],
    /// Veiling color each channel tends to with distance.
    pub background: [f32; 3],
    pub depth_range: (f32, f32),
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            beta: [0.40, 0.12, 0.06],
            background: [0.05, 0.35, 0.45],
            depth_range: (0.5, 3.0),
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.beta;
        if !(r > g && g > b && b > 0.0) {
            return Err(Error::Config(format!(
                "beta must satisfy red > green > blue > 0, got {:?}",
                self.beta
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "background must lie in [0, 1], got {:?}",
                self.background
            )));
        }
        let (lo, hi) = self.depth_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid depth range [{lo}, {hi}]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("invalid noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Degrades a `(3, H, W)` image in `[0, 1]` seen through distance `d`.
/// Noise is drawn from a generator seeded with `noise_seed`; the result is
/// clamped to `[0, 1]`.
pub fn degrade(clean: &Tensor, p: &DegradeParams, d: f32, noise_seed: u64) -> Result<Tensor> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::invalid("degrade", format!("distance must be >= 0, got {d}")));
    }
    let s = clean.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("degrade", format!("expected (3, H, W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0f32, p.noise_sigma)
        .map_err(|e| Error::invalid("degrade", e.to_string()))?;
    let mut out = clean.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let t = (-p.beta[c] * d).exp();
        let veil = p.background[c] * (1.0 - t);
        for v in chunk {
            *v = *v * t + veil;
        }
    }
    if p.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `[0, 1]` to `[-1, 1]`.
pub fn normalize(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1]` to `[0, 1]`, clamping first.
pub fn denormalize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}

/// Resizes each of `lines` contiguous rows of length `n_in` to `n_out`.
fn resize_axis(src: &[f32], n_in: usize, n_out: usize, lines: usize) -> Vec<f32> {
    let mut out = vec![0.0; lines * n_out];
    let scale = n_in as f32 / n_out as f32;
    for i in 0..n_out {
        let pos = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = pos - i0 as f32;
        for l in 0..lines {
            let a = src[l * n_in + i0];
            let b = src[l * n_in + i1];
            out[l * n_out + i] = a + t * (b - a);
        }
    }
    out
}

fn transpose_plane(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Bilinear resize of a `(C, H, W)` tensor to `(C, out_h, out_w)`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resize",
            format!("cannot resize {s:?} to {out_h}x{out_w}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks(h * w) {
        let cols = resize_axis(plane, w, out_w, h);
        let t = transpose_plane(&cols, h, out_w);
        let rows = resize_axis(&t, h, out_h, out_w);
        data.extend(transpose_plane(&rows, out_w, out_h));
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

/// Reads an image file as `(3, H, W)` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Rounds a `(3, H, W)` tensor in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("to_rgb8", format!("expected (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| {
            (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Snaps values to the 8-bit grid, as a PNG round trip would.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|c| a[c] + t * (b[c] - a[c]))
}

/// A colorful clean scene: a linear gradient, a few flat shapes and a
/// low-frequency sinusoidal texture.
pub fn procedural_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f32; 3] { std::array::from_fn(|_| rng.random_range(0.1..0.95)) };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let n_shapes = rng.random_range(1..=4);
    let shapes: Vec<(bool, f32, f32, f32, [f32; 3])> = (0..n_shapes)
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                color(&mut rng),
            )
        })
        .collect();
    let freq: [f32; 2] = [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)];
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let amp: f32 = rng.random_range(0.02..0.1);

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32;
            let v = (y as f32 + 0.5) / size as f32;
            let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let mut px = lerp3(c0, c1, t);
            for &(circle, cx, cy, r, col) in &shapes {
                let inside = if circle {
                    (u - cx).powi(2) + (v - cy).powi(2) <= r * r
                } else {
                    (u - cx).abs() <= r && (v - cy).abs() <= r * 0.6
                };
                if inside {
                    px = col;
                }
            }
            let tex = amp
                * (std::f32::consts::TAU * (freq[0] * u + phase)).sin()
                * (std::f32::consts::TAU * freq[1] * v).cos();
            for c in 0..3 {
                data[c * plane + y * size + x] = (px[c] + tex).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub distance: f32,
    pub noise_seed: u64,
}

/// A dataset description: degradation settings and the list of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub params: DegradeParams,
    pub entries: Vec<ManifestEntry>,
}

fn fmt3(v: [f32; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse3(s: &str) -> std::result::Result<[f32; 3], String> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f32>| format!("expected 3 values, got {}", v.len()))
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let p = &self.params;
        let mut s = format!(
            "# beta = {}\n# background = {}\n# depth_range = {},{}\n# noise_sigma = {}\n# seed = {}\n",
            fmt3(p.beta),
            fmt3(p.background),
            p.depth_range.0,
            p.depth_range.1,
            p.noise_sigma,
            p.seed
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.clean.display(),
                e.degraded.display(),
                e.distance,
                e.noise_seed
            ));
        }
        s
    }

    /// Parses a manifest; relative image paths resolve against `root`.
    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest {
            path: source.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut params = DegradeParams::default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let Some((k, v)) = rest.split_once('=') else { continue };
                let v = v.trim();
                match k.trim() {
                    "beta" => params.beta = parse3(v).map_err(|m| err(n, m))?,
                    "background" => params.background = parse3(v).map_err(|m| err(n, m))?,
                    "depth_range" => {
                        let (a, b) = v.split_once(',').ok_or_else(|| err(n, "expected lo,hi".into()))?;
                        params.depth_range = (
                            a.trim().parse().map_err(|e| err(n, format!("{e}")))?,
                            b.trim().parse().map_err(|e| err(n, format!("{e}")))?,
                        );
                    }
                    "noise_sigma" => params.noise_sigma = v.parse().map_err(|e| err(n, format!("{e}")))?,
                    "seed" => params.seed = v.parse().map_err(|e| err(n, format!("{e}")))?,
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(n, format!("expected 5 tab-separated fields, got {}", f.len())));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                clean: PathBuf::from(f[1]),
                degraded: PathBuf::from(f[2]),
                distance: f[3].parse().map_err(|e| err(n, format!("bad distance: {e}")))?,
                noise_seed: f[4].parse().map_err(|e| err(n, format!("bad noise seed: {e}")))?,
            });
        }
        params.validate()?;
        Ok(Manifest {
            root: root.to_path_buf(),
            params,
            entries,
        })
    }

    /// Loads `path`, or `path/manifest.tsv` when given a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root, &file)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        f.sync_all()?;
        Ok(path)
    }

    pub fn clean_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.clean)
    }

    pub fn degraded_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.degraded)
    }

    /// Recomputes an entry's degraded image from its stored clean image.
    pub fn regenerate(&self, e: &ManifestEntry) -> Result<Tensor> {
        let clean = load_image(&self.clean_path(e))?;
        Ok(quantize(&degrade(&clean, &self.params, e.distance, e.noise_seed)?))
    }

    /// A manifest over the given subset of entries.
    pub fn subset(&self, idx: &[usize]) -> Manifest {
        Manifest {
            root: self.root.clone(),
            params: self.params.clone(),
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    Procedural,
    /// Every PNG in the directory, in name order, reused cyclically.
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub count: usize,
    /// Side length of the stored square images.
    pub size: usize,
    pub source: CleanSource,
    pub params: DegradeParams,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Per-pair noise seed derived from the dataset seed and pair index.
fn noise_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Writes `count` clean/degraded PNG pairs and `manifest.tsv` under `out`.
pub fn synth_dataset(opts: &SynthOptions, out: &Path) -> Result<Manifest> {
    opts.params.validate()?;
    if opts.count == 0 {
        return Err(Error::Dataset("count must be at least 1".into()));
    }
    if opts.size == 0 {
        return Err(Error::Dataset("image size must be positive".into()));
    }
    let sources = match &opts.source {
        CleanSource::Procedural => Vec::new(),
        CleanSource::Dir(dir) => {
            let files = list_pngs(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
            }
            files
        }
    };
    // Decode everything before touching the output directory.
    let mut cleans = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let img = if sources.is_empty() {
            procedural_image(opts.size, opts.params.seed.wrapping_add(i as u64))
        } else {
            let t = load_image(&sources[i % sources.len()])?;
            resize_bilinear(&t, opts.size, opts.size)?
        };
        cleans.push(quantize(&img));
    }

    fs::create_dir_all(out.join(CLEAN_DIR))?;
    fs::create_dir_all(out.join(DEGRADED_DIR))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.params.seed);
    let (lo, hi) = opts.params.depth_range;
    let mut entries = Vec::with_capacity(opts.count);
    for (i, clean) in cleans.iter().enumerate() {
        let id = format!("pair-{i:05}");
        let distance = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let seed = noise_seed(opts.params.seed, i);
        let degraded = degrade(clean, &opts.params, distance, seed)?;
        let e = ManifestEntry {
            clean: Path::new(CLEAN_DIR).join(format!("{id}.png")),
            degraded: Path::new(DEGRADED_DIR).join(format!("{id}.png")),
            id,
            distance,
            noise_seed: seed,
        };
        save_image(clean, &out.join(&e.clean))?;
        save_image(&degraded, &out.join(&e.degraded))?;
        entries.push(e);
    }
    let m = Manifest {
        root: out.to_path_buf(),
        params: opts.params.clone(),
        entries,
    };
    m.save()?;
    Ok(m)
}

/// A normalized training pair, both `(3, H, W)` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub x: Tensor,
    pub y: Tensor,
}

/// Pairs decoded and resized in manifest order.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub pairs: Vec<ImagePair>,
    /// Entries skipped because an image failed to decode.
    pub skipped: usize,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stacks the given pairs into `(x, y)` batches of shape `(B, 3, H, W)`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &self.pairs[i].x).collect();
        let ys: Vec<&Tensor> = idx.iter().map(|&i| &self.pairs[i].y).collect();
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
    }
}

/// Decodes every pair at `size x size`. Undecodable files are logged,
/// counted and skipped.
pub fn load_pairs(manifest: &Manifest, size: usize) -> Result<PairSet> {
    if size == 0 {
        return Err(Error::Dataset("target size must be positive".into()));
    }
    let mut set = PairSet::default();
    for e in &manifest.entries {
        let load = |p: PathBuf| -> Result<Tensor> { resize_bilinear(&load_image(&p)?, size, size) };
        match (load(manifest.degraded_path(e)), load(manifest.clean_path(e))) {
            (Ok(x), Ok(y)) => set.pairs.push(ImagePair {
                id: e.id.clone(),
                x: normalize(&x),
                y: normalize(&y),
            }),
            (Err(err), _) | (_, Err(err)) => {
                warn!("skipping pair {}: {err}", e.id);
                set.skipped += 1;
            }
        }
    }
    Ok(set)
}

/// A seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Splits `0..n` after a seeded shuffle: the last `ceil(n * frac)` indices
/// are held out (at least one, and at least one left for training).
pub fn holdout_split(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 pairs to split, got {n}")));
    }
    let held = ((n as f64 * frac).ceil() as usize).clamp(1, n - 1);
    let perm = permutation(n, seed);
    let (train, test) = perm.split_at(n - held);
    Ok((train.to_vec(), test.to_vec()))
}
