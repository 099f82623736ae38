//! Synthetic scenes: per-pixel Gaussian features over a spatial class
//! layout, plus the augmentation, pasting and cropping used for training.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::seed;

/// Label of a pasted negative pixel.
pub const NEG: i16 = -2;
/// Label excluded from closed-set scoring (test anomalies).
pub const IGNORE: i16 = -1;

/// Diagonal Gaussian over feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let std = vec![std; mean.len()];
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut Vec<f64>) {
        for (m, s) in self.mean.iter().zip(&self.std) {
            let z: f64 = rng.sample(StandardNormal);
            out.push(m + s * z);
        }
    }

    fn max_std(&self) -> f64 {
        self.std.iter().copied().fold(0.0, f64::max)
    }
}

/// Distance between two means in units of the larger per-dim std of the pair.
pub fn separation_sigmas(a: &Gaussian, b: &Gaussian) -> f64 {
    let d: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let s = a.max_std().max(b.max_std());
    if s == 0.0 {
        f64::INFINITY
    } else {
        d / s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Vertical stripes of equal width, one per class.
    Stripes,
    /// Nearest-site partition; site `i` carries class `i % K`.
    Voronoi { sites: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub layout: Layout,
    pub classes: Vec<Gaussian>,
}

impl SceneSpec {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        if k < 2 || self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "need K >= 2 and D >= 2, got K={k} D={}",
                self.feature_dim
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty scene".into()));
        }
        if let Layout::Voronoi { sites } = self.layout {
            if sites < k {
                return Err(Error::Config(format!("{sites} Voronoi sites for {k} classes")));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.dim() != self.feature_dim || c.std.len() != self.feature_dim {
                return Err(Error::Config(format!("class {i} has wrong dimension")));
            }
            if c.std.iter().any(|&s| s < 0.0) {
                return Err(Error::Config(format!("class {i} has negative std")));
            }
            for other in &self.classes[..i] {
                if other.mean == c.mean {
                    return Err(Error::Config(format!("class {i} mean is duplicated")));
                }
            }
        }
        Ok(())
    }
}

/// The full toy benchmark: inlier scenes, the auxiliary negative
/// distribution and the held-out test-anomaly distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub auxiliary: Gaussian,
    pub anomaly: Gaussian,
}

impl BenchmarkSpec {
    /// Classes at `class_scale * e_c`, auxiliary negatives at
    /// `-aux_scale * 1_K`, test anomalies at `anomaly_scale * 1_K`
    /// (`1_K`: ones on the first K dims).
    pub fn axis_aligned(
        height: usize,
        width: usize,
        feature_dim: usize,
        classes: usize,
        layout: Layout,
        class_scale: f64,
        class_std: f64,
        aux_scale: f64,
        anomaly_scale: f64,
        anomaly_std: f64,
    ) -> Result<Self> {
        if classes > feature_dim {
            return Err(Error::Config(format!(
                "axis-aligned layout needs D >= K, got D={feature_dim} K={classes}"
            )));
        }
        let class_dists = (0..classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = class_scale;
                Gaussian::isotropic(m, class_std)
            })
            .collect();
        let ones = |scale: f64| {
            let mut m = vec![0.0; feature_dim];
            m[..classes].fill(scale);
            m
        };
        let spec = Self {
            scene: SceneSpec {
                height,
                width,
                feature_dim,
                layout,
                classes: class_dists,
            },
            auxiliary: Gaussian::isotropic(ones(-aux_scale), class_std),
            anomaly: Gaussian::isotropic(ones(anomaly_scale), anomaly_std),
        };
        spec.scene.validate()?;
        Ok(spec)
    }

    pub fn default_toy() -> Self {
        Self::axis_aligned(64, 64, 8, 4, Layout::Voronoi { sites: 8 }, 3.0, 0.5, 1.5, 0.75, 0.5)
            .expect("default benchmark is valid")
    }

    /// Smallest pairwise separation (in sigmas) between any two of the
    /// inlier classes, the auxiliary source and the anomaly source.
    pub fn min_separation_sigmas(&self) -> f64 {
        let mut all: Vec<&Gaussian> = self.scene.classes.iter().collect();
        all.push(&self.auxiliary);
        all.push(&self.anomaly);
        let mut best = f64::INFINITY;
        for i in 0..all.len() {
            for j in 0..i {
                best = best.min(separation_sigmas(all[i], all[j]));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub class_count: usize,
    /// `height * width * dim`, row-major pixels.
    pub features: Vec<f64>,
    pub labels: Vec<i16>,
    pub anomaly: Vec<bool>,
}

impl Scene {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.features[i..i + self.dim]
    }

    pub fn label(&self, row: usize, col: usize) -> i16 {
        self.labels[row * self.width + col]
    }

    pub fn is_inlier_label(&self, label: i16) -> bool {
        label >= 0 && (label as usize) < self.class_count
    }

    /// Overwrites the `side x side` window at `(row, col)` with `patch`
    /// and labels it [`NEG`].
    pub fn paste(&mut self, patch: &Patch, row: usize, col: usize) -> Result<()> {
        if patch.dim != self.dim {
            return Err(invalid(format!(
                "patch dim {} for scene dim {}",
                patch.dim, self.dim
            )));
        }
        if row + patch.side > self.height || col + patch.side > self.width {
            return Err(invalid(format!(
                "patch of side {} at ({row},{col}) exceeds {}x{}",
                patch.side, self.height, self.width
            )));
        }
        for pr in 0..patch.side {
            for pc in 0..patch.side {
                let p = (row + pr) * self.width + col + pc;
                let src = (pr * patch.side + pc) * self.dim;
                self.features[p * self.dim..(p + 1) * self.dim]
                    .copy_from_slice(&patch.features[src..src + self.dim]);
                self.labels[p] = NEG;
            }
        }
        Ok(())
    }
}

/// Square block of pixel features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl Patch {
    pub fn new(side: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != side * side * dim {
            return Err(invalid(format!(
                "{} values for a {side}x{side}x{dim} patch",
                features.len()
            )));
        }
        Ok(Self {
            side,
            dim,
            features,
        })
    }

    pub fn sample(dist: &Gaussian, side: usize, rng: &mut impl Rng) -> Self {
        let mut features = Vec::with_capacity(side * side * dist.dim());
        for _ in 0..side * side {
            dist.sample_into(rng, &mut features);
        }
        Self {
            side,
            dim: dist.dim(),
            features,
        }
    }
}

/// Where synthetic-training negatives come from.
#[derive(Debug, Clone, PartialEq)]
pub enum NegativeSource {
    /// A fixed feature distribution standing in for real outlier data.
    Auxiliary(Gaussian),
    /// Samples of the jointly trained flow.
    Flow,
}

fn layout_labels(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<i16> {
    let (h, w, k) = (spec.height, spec.width, spec.class_count());
    match spec.layout {
        Layout::Stripes => (0..h * w).map(|p| ((p % w) * k / w) as i16).collect(),
        Layout::Voronoi { sites } => {
            let pts: Vec<(f64, f64)> = (0..sites)
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
                .collect();
            (0..h * w)
                .map(|p| {
                    let (r, c) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                    let mut best = (f64::INFINITY, 0usize);
                    for (i, (sr, sc)) in pts.iter().enumerate() {
                        let d = (r - sr).powi(2) + (c - sc).powi(2);
                        if d < best.0 {
                            best = (d, i);
                        }
                    }
                    (best.1 % k) as i16
                })
                .collect()
        }
    }
}

/// Deterministic inlier scene: labels from the layout, features from each
/// pixel's class Gaussian.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::rng_at(seed, &[0x5ce4e]);
    let labels = layout_labels(spec, &mut rng);
    let mut features = Vec::with_capacity(labels.len() * spec.feature_dim);
    for &l in &labels {
        spec.classes[l as usize].sample_into(&mut rng, &mut features);
    }
    Ok(Scene {
        height: spec.height,
        width: spec.width,
        dim: spec.feature_dim,
        class_count: spec.class_count(),
        anomaly: vec![false; labels.len()],
        features,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Random,
    Never,
    Always,
}

pub fn flip_horizontal(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    let (w, d) = (scene.width, scene.dim);
    for r in 0..scene.height {
        for c in 0..w {
            let src = r * w + (w - 1 - c);
            let dst = r * w + c;
            out.labels[dst] = scene.labels[src];
            out.anomaly[dst] = scene.anomaly[src];
            out.features[dst * d..(dst + 1) * d]
                .copy_from_slice(&scene.features[src * d..(src + 1) * d]);
        }
    }
    out
}

fn window(scene: &Scene, row: usize, col: usize, side_h: usize, side_w: usize) -> Scene {
    let d = scene.dim;
    let mut features = Vec::with_capacity(side_h * side_w * d);
    let mut labels = Vec::with_capacity(side_h * side_w);
    let mut anomaly = Vec::with_capacity(side_h * side_w);
    for r in row..row + side_h {
        let start = r * scene.width + col;
        features.extend_from_slice(&scene.features[start * d..(start + side_w) * d]);
        labels.extend_from_slice(&scene.labels[start..start + side_w]);
        anomaly.extend_from_slice(&scene.anomaly[start..start + side_w]);
    }
    Scene {
        height: side_h,
        width: side_w,
        dim: d,
        class_count: scene.class_count,
        features,
        labels,
        anomaly,
    }
}

fn rescale_nearest(scene: &Scene, factor: f64) -> Scene {
    let nh = ((scene.height as f64 * factor).round() as usize).max(1);
    let nw = ((scene.width as f64 * factor).round() as usize).max(1);
    if nh == scene.height && nw == scene.width {
        return scene.clone();
    }
    let d = scene.dim;
    let src_index = |i: usize, n: usize, old: usize| {
        (((i as f64 + 0.5) * old as f64 / n as f64) as usize).min(old - 1)
    };
    let mut features = Vec::with_capacity(nh * nw * d);
    let mut labels = Vec::with_capacity(nh * nw);
    let mut anomaly = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let sr = src_index(r, nh, scene.height);
        for c in 0..nw {
            let p = sr * scene.width + src_index(c, nw, scene.width);
            features.extend_from_slice(&scene.features[p * d..(p + 1) * d]);
            labels.push(scene.labels[p]);
            anomaly.push(scene.anomaly[p]);
        }
    }
    Scene {
        height: nh,
        width: nw,
        features,
        labels,
        anomaly,
        ..scene.clone()
    }
}

/// Random rescale (nearest neighbour) by a factor drawn from `jitter`,
/// optional horizontal flip, then a random `crop x crop` window.
pub fn augment(
    scene: &Scene,
    seed: u64,
    jitter: (f64, f64),
    crop: usize,
    flip: Flip,
) -> Result<Scene> {
    let (lo, hi) = jitter;
    if !(lo > 0.0 && lo <= hi) {
        return Err(invalid(format!("jitter range [{lo}, {hi}]")));
    }
    let mut rng = seed::rng_at(seed, &[0xa06]);
    let factor = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let flip_now = match flip {
        Flip::Random => rng.random_bool(0.5),
        Flip::Never => false,
        Flip::Always => true,
    };
    let mut scaled = rescale_nearest(scene, factor);
    if crop == 0 || crop > scaled.height.min(scaled.width) {
        return Err(invalid(format!(
            "crop {crop} does not fit {}x{} after rescale by {factor:.3}",
            scaled.height, scaled.width
        )));
    }
    if flip_now {
        scaled = flip_horizontal(&scaled);
    }
    let row = rng.random_range(0..=scaled.height - crop);
    let col = rng.random_range(0..=scaled.width - crop);
    Ok(window(&scaled, row, col, crop, crop))
}

/// Pure form of [`Scene::paste`].
pub fn paste_negative(scene: &Scene, patch: &Patch, row: usize, col: usize) -> Result<Scene> {
    let mut out = scene.clone();
    out.paste(patch, row, col)?;
    Ok(out)
}

/// Integer side range `[lo, hi]` for fractions of the crop side.
pub fn patch_size_bounds(min_frac: f64, max_frac: f64, crop: usize) -> Result<(usize, usize)> {
    if !(min_frac > 0.0 && min_frac <= max_frac && max_frac < 1.0) {
        return Err(invalid(format!("patch fractions ({min_frac}, {max_frac})")));
    }
    let lo = ((min_frac * crop as f64 - 1e-9).ceil() as usize).max(1);
    let hi = ((max_frac * crop as f64 + 1e-9).floor() as usize).max(lo);
    Ok((lo, hi))
}

pub fn sample_patch_size(
    rng: &mut impl Rng,
    min_frac: f64,
    max_frac: f64,
    crop: usize,
) -> Result<usize> {
    let (lo, hi) = patch_size_bounds(min_frac, max_frac, crop)?;
    Ok(rng.random_range(lo..=hi))
}

/// Top-left corners of every `size x size` window with only inlier labels
/// and no anomaly pixels.
pub fn inlier_windows(scene: &Scene, size: usize) -> Vec<(usize, usize)> {
    let (h, w) = (scene.height, scene.width);
    if size == 0 || size > h || size > w {
        return Vec::new();
    }
    // prefix sums of invalid pixels
    let mut pre = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let bad = !scene.is_inlier_label(scene.labels[p]) || scene.anomaly[p];
            pre[(r + 1) * (w + 1) + c + 1] = pre[r * (w + 1) + c + 1] + pre[(r + 1) * (w + 1) + c]
                - pre[r * (w + 1) + c]
                + bad as u32;
        }
    }
    let mut out = Vec::new();
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (r2, c2) = (r + size, c + size);
            let bad = pre[r2 * (w + 1) + c2] + pre[r * (w + 1) + c]
                - pre[r * (w + 1) + c2]
                - pre[r2 * (w + 1) + c];
            if bad == 0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Features of a uniformly chosen all-inlier square window, with its
/// top-left corner.
pub fn crop_inlier(
    scene: &Scene,
    rng: &mut impl Rng,
    size: usize,
) -> Result<((usize, usize), Vec<f64>)> {
    let candidates = inlier_windows(scene, size);
    if candidates.is_empty() {
        return Err(Error::NoValidWindow(size));
    }
    let (r, c) = candidates[rng.random_range(0..candidates.len())];
    Ok(((r, c), window(scene, r, c, size, size).features))
}

/// Places a `size x size` block from `dist` at `(row, col)`: anomaly mask
/// set, labels [`IGNORE`].
pub fn inject_anomaly_at(
    scene: &Scene,
    rng: &mut impl Rng,
    dist: &Gaussian,
    size: usize,
    row: usize,
    col: usize,
) -> Result<Scene> {
    if row + size > scene.height || col + size > scene.width {
        return Err(invalid(format!(
            "anomaly of side {size} at ({row},{col}) exceeds {}x{}",
            scene.height, scene.width
        )));
    }
    let mut out = scene.clone();
    let patch = Patch::sample(dist, size, rng);
    out.paste(&patch, row, col)?;
    for r in row..row + size {
        for c in col..col + size {
            let p = r * out.width + c;
            out.labels[p] = IGNORE;
            out.anomaly[p] = true;
        }
    }
    Ok(out)
}

/// Test-time anomaly at a uniformly random location.
pub fn inject_test_anomaly(
    scene: &Scene,
    seed: u64,
    dist: &Gaussian,
    size: usize,
) -> Result<Scene> {
    if size > scene.height || size > scene.width {
        return Err(invalid(format!("anomaly side {size} exceeds scene")));
    }
    if size == 0 {
        return Ok(scene.clone());
    }
    let mut rng = seed::rng_at(seed, &[0xa40]);
    let row = rng.random_range(0..=scene.height - size);
    let col = rng.random_range(0..=scene.width - size);
    inject_anomaly_at(scene, &mut rng, dist, size, row, col)
}

const SCENE_MAGIC: &[u8; 8] = b"NFHSCENE";
const SCENE_VERSION: u32 = 1;

/// Binary layout: magic, version, H, W, D, K (u32), features (f64),
/// labels (i16), anomaly mask packed LSB-first. All little-endian.
pub fn write_scene(w: &mut impl Write, scene: &Scene) -> Result<()> {
    w.write_all(SCENE_MAGIC)?;
    codec::put_u32(w, SCENE_VERSION)?;
    for v in [scene.height, scene.width, scene.dim, scene.class_count] {
        codec::put_u32(w, v as u32)?;
    }
    codec::put_f64s(w, &scene.features)?;
    let labels: Vec<u8> = scene.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    w.write_all(&labels)?;
    let mut bits = vec![0u8; scene.anomaly.len().div_ceil(8)];
    for (i, &a) in scene.anomaly.iter().enumerate() {
        if a {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.write_all(&bits)?;
    Ok(())
}

pub fn read_scene(r: &mut impl Read) -> Result<Scene> {
    codec::expect_magic(r, SCENE_MAGIC, "scene")?;
    codec::expect_version(r, SCENE_VERSION, "scene")?;
    let height = codec::get_u32(r)? as usize;
    let width = codec::get_u32(r)? as usize;
    let dim = codec::get_u32(r)? as usize;
    let class_count = codec::get_u32(r)? as usize;
    let too_big = || Error::Format {
        what: "scene",
        msg: format!("{height}x{width}x{dim} overflows"),
    };
    let n = height.checked_mul(width).ok_or_else(too_big)?;
    let features = codec::get_f64s(r, n.checked_mul(dim).ok_or_else(too_big)?)?;
    let lb = codec::get_bytes(r, n.checked_mul(2).ok_or_else(too_big)?)?;
    let labels = lb
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let bits = codec::get_bytes(r, n.div_ceil(8))?;
    let anomaly = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    codec::expect_eof(r, "scene")?;
    Ok(Scene {
        height,
        width,
        dim,
        class_count,
        features,
        labels,
        anomaly,
    })
}

/// One pixel per line: `row col label anomaly f0 .. f{D-1}`.
pub fn export_scene_text(w: &mut impl Write, scene: &Scene) -> Result<()> {
    writeln!(
        w,
        "# height={} width={} dim={} classes={} (label {NEG}=negative, {IGNORE}=ignore)",
        scene.height, scene.width, scene.dim, scene.class_count
    )?;
    for r in 0..scene.height {
        for c in 0..scene.width {
            let p = r * scene.width + c;
            write!(w, "{r} {c} {} {}", scene.labels[p], scene.anomaly[p] as u8)?;
            for v in scene.feature(r, c) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
