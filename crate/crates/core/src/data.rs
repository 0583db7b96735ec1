//! Synthetic spatiotemporal scenes, normalization, resizing, and the
//! dataset container format.
//!
//! Scenes are Voronoi partitions of the image plane into field-like
//! patches, one site per class. Each class carries a per-band temporal
//! reflectance curve (a parameterized bump); two designated classes share
//! identical per-frame statistics and differ only in peak time, so an
//! aggregator that ignores temporal structure cannot separate them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::serial::{read_u32, read_u64, write_u32, write_u64};
use crate::tensor::{read_tensor_record, write_tensor_record, Tensor};

/// Integer class map of one scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    /// Label map as a [H,W] tensor record payload.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("label map dimensions are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        if t.rank() != 2 {
            return Err(Error::Format(format!(
                "label record must be rank-2, got {:?}",
                t.shape()
            )));
        }
        let data = t
            .values()
            .iter()
            .map(|&v| {
                if v < 0.0 || v > u16::MAX as f64 || v.fract() != 0.0 {
                    Err(Error::Format(format!("non-integer label value {v}")))
                } else {
                    Ok(v as u16)
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(t.shape()[0], t.shape()[1], data)
    }
}

/// One training sample: T frames of C x H x W imagery plus a class map.
#[derive(Debug, Clone)]
pub struct SceneSequence {
    pub id: u64,
    /// [T, C, H, W] reflectance tensor.
    pub frames: Tensor,
    pub labels: LabelMap,
}

impl SceneSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_bands(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Detached [C,H,W] copy of frame t.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.frames.index_axis0(t)
    }
}

/// Generation parameters for the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub n_scenes: usize,
    pub frames: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for GenConfig {
    /// Desk profile: 32x32, 8 frames, 4 bands, 6 classes.
    fn default() -> GenConfig {
        GenConfig {
            n_scenes: 250,
            frames: 8,
            bands: 4,
            height: 32,
            width: 32,
            classes: 6,
            noise: 0.05,
        }
    }
}

/// Per-class, per-band temporal reflectance curve parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpCurve {
    pub base: f64,
    pub amplitude: f64,
    pub peak: f64,
    pub width: f64,
}

impl BumpCurve {
    pub fn value(&self, t: f64) -> f64 {
        let z = (t - self.peak) / self.width;
        self.base + self.amplitude * (-0.5 * z * z).exp()
    }
}

/// The full per-class temporal signature table for a dataset.
///
/// Classes 0 and 1 are the temporally confusable pair: identical base,
/// amplitude and width in every band, with peak times mirrored about the
/// window center so their t-marginal distributions coincide exactly.
#[derive(Debug, Clone)]
pub struct Phenology {
    pub frames: usize,
    /// curves[class][band]
    pub curves: Vec<Vec<BumpCurve>>,
}

impl Phenology {
    pub fn generate(seed: u64, classes: usize, bands: usize, frames: usize) -> Result<Phenology> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "phenology needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let t_max = (frames - 1) as f64;
        let center = t_max / 2.0;
        let mut curves = vec![Vec::with_capacity(bands); classes];

        for _ in 0..bands {
            // Confusable pair: same shape, mirrored peaks.
            let base = rng.gen_range(0.05..0.25);
            let amplitude = rng.gen_range(0.35..0.7_f64).min(1.0 - base);
            let width = rng.gen_range(0.10..0.18) * t_max.max(1.0);
            let delta = rng.gen_range(0.22..0.32) * t_max.max(1.0);
            curves[0].push(BumpCurve {
                base,
                amplitude,
                peak: center - delta,
                width,
            });
            curves[1].push(BumpCurve {
                base,
                amplitude,
                peak: center + delta,
                width,
            });
            for class_curves in curves.iter_mut().take(classes).skip(2) {
                let base = rng.gen_range(0.05..0.3);
                class_curves.push(BumpCurve {
                    base,
                    amplitude: rng.gen_range(0.3..0.7_f64).min(1.0 - base),
                    peak: rng.gen_range(0.1..0.9) * t_max.max(1.0),
                    width: rng.gen_range(0.08..0.25) * t_max.max(1.0),
                });
            }
        }
        Ok(Phenology { frames, curves })
    }

    pub fn value(&self, class: usize, band: usize, t: usize) -> f64 {
        self.curves[class][band].value(t as f64)
    }
}

/// Voronoi class map from `classes` random sites (one per class).
fn voronoi_labels(rng: &mut ChaCha8Rng, height: usize, width: usize, classes: usize) -> LabelMap {
    let sites: Vec<(f64, f64)> = (0..classes)
        .map(|_| (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64)))
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut best = 0u16;
            let mut best_d = f64::INFINITY;
            for (c, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y - sy) * (y - sy) + (x - sx) * (x - sx);
                if d < best_d {
                    best_d = d;
                    best = c as u16;
                }
            }
            data.push(best);
        }
    }
    LabelMap::new(height, width, data).expect("voronoi map dimensions are consistent")
}

/// Generate one scene from an explicit phenology table and per-scene seed.
pub fn generate_scene_with(
    phenology: &Phenology,
    scene_seed: u64,
    scene_id: u64,
    cfg: &GenConfig,
) -> Result<SceneSequence> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!(
            "scene generation needs K >= 2, got {}",
            cfg.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let labels = voronoi_labels(&mut rng, cfg.height, cfg.width, cfg.classes);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("noise level must be finite");
    let (t_n, c_n, h, w) = (cfg.frames, cfg.bands, cfg.height, cfg.width);
    let mut values = Vec::with_capacity(t_n * c_n * h * w);
    for t in 0..t_n {
        for b in 0..c_n {
            for pix in 0..h * w {
                let class = labels.data[pix] as usize;
                let clean = phenology.value(class, b, t);
                let v = if cfg.noise > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
                values.push(v);
            }
        }
    }
    Ok(SceneSequence {
        id: scene_id,
        frames: Tensor::new(&[t_n, c_n, h, w], values)?,
        labels,
    })
}

/// Generate one self-contained scene: the phenology table is derived from
/// the same seed.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSequence> {
    let phen = Phenology::generate(seed, cfg.classes, cfg.bands, cfg.frames)?;
    generate_scene_with(&phen, seed, 0, cfg)
}

/// Generate a dataset with one shared phenology table and per-scene seeds.
pub fn generate_dataset(seed: u64, cfg: &GenConfig) -> Result<Vec<SceneSequence>> {
    use rayon::prelude::*;
    let phen = Phenology::generate(seed, cfg.classes, cfg.bands, cfg.frames)?;
    (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            generate_scene_with(
                &phen,
                seed.wrapping_add(1).wrapping_add(i as u64),
                i as u64,
                cfg,
            )
        })
        .collect()
}

/// Per-channel mean and standard deviation over a scene list (training
/// split only, by contract). Standard deviation is floored at 1e-8.
pub fn channel_stats(scenes: &[SceneSequence]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::Data("channel statistics of an empty dataset".into()));
    }
    let bands = scenes[0].n_bands();
    let mut sum = vec![0.0; bands];
    let mut sum_sq = vec![0.0; bands];
    let mut count = vec![0u64; bands];
    for scene in scenes {
        let shape = scene.frames.shape();
        let (t_n, c_n, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if c_n != bands {
            return Err(Error::Shape(format!(
                "inconsistent band counts in dataset: {bands} vs {c_n}"
            )));
        }
        let v = scene.frames.values();
        for t in 0..t_n {
            for b in 0..c_n {
                let s = (t * c_n + b) * hw;
                for &x in &v[s..s + hw] {
                    sum[b] += x;
                    sum_sq[b] += x * x;
                }
                count[b] += hw as u64;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((sq, &n), m)| {
            let var = sq / n as f64 - m * m;
            let std = var.max(0.0).sqrt();
            if std < 1e-8 {
                log::warn!("constant channel detected; flooring std at 1e-8");
                1e-8
            } else {
                std
            }
        })
        .collect();
    Ok((mean, std))
}

/// Apply (x - mean) / std per channel, returning a new scene.
pub fn normalize_scene(scene: &SceneSequence, mean: &[f64], std: &[f64]) -> Result<SceneSequence> {
    let shape = scene.frames.shape().to_vec();
    let (t_n, c_n, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if mean.len() != c_n || std.len() != c_n {
        return Err(Error::Shape(format!(
            "normalization stats cover {} channels, scene has {c_n}",
            mean.len()
        )));
    }
    let v = scene.frames.values();
    let mut out = Vec::with_capacity(v.len());
    for t in 0..t_n {
        for b in 0..c_n {
            let s = (t * c_n + b) * hw;
            for &x in &v[s..s + hw] {
                out.push((x - mean[b]) / std[b]);
            }
        }
    }
    Ok(SceneSequence {
        id: scene.id,
        frames: Tensor::new(&shape, out)?,
        labels: scene.labels.clone(),
    })
}

/// Normalize every scene with the provided (training) statistics.
pub fn normalize_with(scenes: &[SceneSequence], mean: &[f64], std: &[f64]) -> Result<Vec<SceneSequence>> {
    scenes.iter().map(|s| normalize_scene(s, mean, std)).collect()
}

/// Deterministic shuffled split into (train, test) by `train_fraction`.
pub fn split_scenes(
    scenes: &[SceneSequence],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneSequence>, Vec<SceneSequence>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if scenes.is_empty() {
        return Err(Error::Data("split of an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let n_train = ((scenes.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, scenes.len() - 1);
    let train = idx[..n_train].iter().map(|&i| scenes[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| scenes[i].clone()).collect();
    Ok((train, test))
}

/// Resize mode for frames and label maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    /// Bilinear interpolation with corner alignment off; labels fall back
    /// to nearest-neighbor.
    Bilinear,
    /// Center the source in a zero canvas; never crops.
    Pad,
}

/// Resize a [C,H,W] frame to the target extent.
pub fn resize_frame(frame: &Tensor, target: (usize, usize), mode: ResizeMode) -> Result<Tensor> {
    if frame.rank() != 3 {
        return Err(Error::Shape(format!(
            "resize_frame input must be [C,H,W], got {:?}",
            frame.shape()
        )));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config("resize target must be >= 1 per axis".into()));
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let x = frame.values();
    let mut out = vec![0.0; c * th * tw];
    match mode {
        ResizeMode::Bilinear => {
            let scale_h = h as f64 / th as f64;
            let scale_w = w as f64 / tw as f64;
            for ch in 0..c {
                for oi in 0..th {
                    let sy = ((oi as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = sy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let fy = sy - y0 as f64;
                    for oj in 0..tw {
                        let sx = ((oj as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = sx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let fx = sx - x0 as f64;
                        let v00 = x[(ch * h + y0) * w + x0];
                        let v01 = x[(ch * h + y0) * w + x1];
                        let v10 = x[(ch * h + y1) * w + x0];
                        let v11 = x[(ch * h + y1) * w + x1];
                        out[(ch * th + oi) * tw + oj] = v00 * (1.0 - fy) * (1.0 - fx)
                            + v01 * (1.0 - fy) * fx
                            + v10 * fy * (1.0 - fx)
                            + v11 * fy * fx;
                    }
                }
            }
        }
        ResizeMode::Pad => {
            if th < h || tw < w {
                return Err(Error::Config(format!(
                    "pad mode never crops: target {th}x{tw} smaller than source {h}x{w}"
                )));
            }
            let off_h = (th - h) / 2;
            let off_w = (tw - w) / 2;
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(ch * th + i + off_h) * tw + j + off_w] = x[(ch * h + i) * w + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

/// Resize a label map. Interpolation mode uses nearest-neighbor (class
/// indices are not averageable); pad mode centers in a zero canvas.
pub fn resize_labels(labels: &LabelMap, target: (usize, usize), mode: ResizeMode) -> Result<LabelMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config("resize target must be >= 1 per axis".into()));
    }
    let (h, w) = (labels.height, labels.width);
    let mut out = vec![0u16; th * tw];
    match mode {
        ResizeMode::Bilinear => {
            let scale_h = h as f64 / th as f64;
            let scale_w = w as f64 / tw as f64;
            for oi in 0..th {
                let sy = (((oi as f64 + 0.5) * scale_h - 0.5).round().max(0.0) as usize).min(h - 1);
                for oj in 0..tw {
                    let sx =
                        (((oj as f64 + 0.5) * scale_w - 0.5).round().max(0.0) as usize).min(w - 1);
                    out[oi * tw + oj] = labels.data[sy * w + sx];
                }
            }
        }
        ResizeMode::Pad => {
            if th < h || tw < w {
                return Err(Error::Config(format!(
                    "pad mode never crops: target {th}x{tw} smaller than source {h}x{w}"
                )));
            }
            let off_h = (th - h) / 2;
            let off_w = (tw - w) / 2;
            for i in 0..h {
                for j in 0..w {
                    out[(i + off_h) * tw + j + off_w] = labels.data[i * w + j];
                }
            }
        }
    }
    LabelMap::new(th, tw, out)
}

const DATASET_MAGIC: &[u8; 4] = b"SPST";
const DATASET_VERSION: u32 = 1;

/// Write a dataset container: magic, version, scene count, then per scene
/// (id, label record, frames record).
pub fn save_dataset(path: &Path, scenes: &[SceneSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    write_u32(&mut w, DATASET_VERSION)?;
    write_u32(&mut w, scenes.len() as u32)?;
    for scene in scenes {
        write_u64(&mut w, scene.id)?;
        write_tensor_record(&mut w, &scene.labels.to_tensor())?;
        write_tensor_record(&mut w, &scene.frames)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset container written by [`save_dataset`]. A malformed or
/// truncated file yields a format error and no partial scenes.
pub fn load_dataset(path: &Path) -> Result<Vec<SceneSequence>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("unreadable dataset header: {e}")))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let n = read_u32(&mut r)? as usize;
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let id = read_u64(&mut r)?;
        let labels = LabelMap::from_tensor(&read_tensor_record(&mut r)?)?;
        let frames = read_tensor_record(&mut r)?;
        if frames.rank() != 4 {
            return Err(Error::Format(format!(
                "scene frames must be [T,C,H,W], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[2] != labels.height || frames.shape()[3] != labels.width {
            return Err(Error::Format(format!(
                "scene frame extent {:?} does not match label extent {}x{}",
                frames.shape(),
                labels.height,
                labels.width
            )));
        }
        scenes.push(SceneSequence { id, frames, labels });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_scenes: 4,
            frames: 6,
            bands: 3,
            height: 16,
            width: 16,
            classes: 4,
            noise: 0.03,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_scenes() {
        let cfg = small_cfg();
        let a = generate_scene(9, &cfg).unwrap();
        let b = generate_scene(9, &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.frames.values(), b.frames.values());
    }

    #[test]
    fn noiseless_two_class_scene_separable_at_peak_frame() {
        let cfg = GenConfig {
            n_scenes: 1,
            frames: 8,
            bands: 1,
            height: 16,
            width: 16,
            classes: 2,
            noise: 0.0,
        };
        let phen = Phenology::generate(3, 2, 1, 8).unwrap();
        let scene = generate_scene_with(&phen, 3, 0, &cfg).unwrap();
        // At the peak frame of class 0 the two class values differ; a
        // threshold between them classifies every pixel correctly.
        let peak_t = phen.curves[0][0].peak.round().clamp(0.0, 7.0) as usize;
        let v0 = phen.value(0, 0, peak_t);
        let v1 = phen.value(1, 0, peak_t);
        assert!((v0 - v1).abs() > 0.05, "profiles differ at the peak frame");
        let thr = 0.5 * (v0 + v1);
        let frame = scene.frame(peak_t).unwrap();
        for (pix, &label) in scene.labels.data.iter().enumerate() {
            let x = frame.values()[pix];
            let predicted = if (x > thr) == (v0 > thr) { 0 } else { 1 };
            assert_eq!(predicted, label as usize);
        }
    }

    #[test]
    fn confusable_pair_has_identical_time_marginal_means() {
        // The peak mirror construction makes the multiset of clean values
        // over t identical for classes 0 and 1 in every band.
        let phen = Phenology::generate(11, 6, 4, 8).unwrap();
        for b in 0..4 {
            let sum0: f64 = (0..8).map(|t| phen.value(0, b, t)).sum();
            let sum1: f64 = (0..8).map(|t| phen.value(1, b, t)).sum();
            assert!(
                (sum0 - sum1).abs() < 1e-9,
                "band {b}: time-mean {sum0} vs {sum1}"
            );
        }
    }

    #[test]
    fn every_class_appears_at_default_settings() {
        let cfg = GenConfig::default();
        let mut all_present = 0;
        for seed in 0..100 {
            let phen = Phenology::generate(seed, cfg.classes, cfg.bands, cfg.frames).unwrap();
            let scene = generate_scene_with(&phen, seed + 1, 0, &cfg).unwrap();
            let mut seen = vec![false; cfg.classes];
            for &l in &scene.labels.data {
                seen[l as usize] = true;
            }
            if seen.iter().all(|&s| s) {
                all_present += 1;
            }
        }
        assert!(all_present >= 99, "only {all_present}/100 scenes had every class");
    }

    #[test]
    fn normalization_zero_mean_unit_std() {
        let scenes = generate_dataset(5, &small_cfg()).unwrap();
        let (mean, std) = channel_stats(&scenes).unwrap();
        let normalized = normalize_with(&scenes, &mean, &std).unwrap();
        let (m2, s2) = channel_stats(&normalized).unwrap();
        for b in 0..3 {
            assert!(m2[b].abs() < 1e-6, "band {b} mean {}", m2[b]);
            assert!((s2[b] - 1.0).abs() < 1e-6, "band {b} std {}", s2[b]);
        }
    }

    #[test]
    fn normalization_invertible() {
        let scenes = generate_dataset(6, &small_cfg()).unwrap();
        let (mean, std) = channel_stats(&scenes).unwrap();
        let normalized = normalize_scene(&scenes[0], &mean, &std).unwrap();
        let shape = scenes[0].frames.shape();
        let (c_n, hw) = (shape[1], shape[2] * shape[3]);
        for (i, (&orig, &norm)) in scenes[0]
            .frames
            .values()
            .iter()
            .zip(normalized.frames.values())
            .enumerate()
        {
            let band = (i / hw) % c_n;
            let recovered = norm * std[band] + mean[band];
            assert!((recovered - orig).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let frames = Tensor::full(&[2, 1, 4, 4], 3.0);
        let labels = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let scene = SceneSequence {
            id: 0,
            frames,
            labels,
        };
        let (mean, std) = channel_stats(std::slice::from_ref(&scene)).unwrap();
        assert_eq!(std[0], 1e-8);
        let normalized = normalize_scene(&scene, &mean, &std).unwrap();
        assert!(normalized.frames.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_in_both_modes() {
        let frame = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for mode in [ResizeMode::Bilinear, ResizeMode::Pad] {
            let r = resize_frame(&frame, (2, 2), mode).unwrap();
            assert_eq!(r.values(), frame.values());
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let frame = Tensor::full(&[1, 2, 2], 7.5);
        let r = resize_frame(&frame, (4, 4), ResizeMode::Bilinear).unwrap();
        for v in r.values() {
            assert!((v - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_checkerboard_matches_hand_stencil() {
        // 2x2 checkerboard [[1,0],[0,1]] to 4x4, corner alignment off.
        // Source coordinates per output cell: -0.25, 0.25, 0.75, 1.25,
        // clamped to [0,1]; interpolation weights follow directly.
        let frame = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_frame(&frame, (4, 4), ResizeMode::Bilinear).unwrap();
        let want = [
            1.0, 0.75, 0.25, 0.0, //
            0.75, 0.625, 0.375, 0.25, //
            0.25, 0.375, 0.625, 0.75, //
            0.0, 0.25, 0.75, 1.0,
        ];
        for (g, w) in r.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{:?} vs {want:?}", r.values());
        }
    }

    #[test]
    fn pad_mode_centers_and_never_crops() {
        let frame = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = resize_frame(&frame, (4, 4), ResizeMode::Pad).unwrap();
        assert_eq!(r.values()[1 * 4 + 1], 1.0);
        assert_eq!(r.values()[2 * 4 + 2], 4.0);
        assert_eq!(r.values()[0], 0.0);
        assert!(matches!(
            resize_frame(&frame, (1, 4), ResizeMode::Pad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn label_resize_nearest_keeps_classes() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let r = resize_labels(&labels, (4, 4), ResizeMode::Bilinear).unwrap();
        assert_eq!(r.get(0, 0), 0);
        assert_eq!(r.get(0, 3), 1);
        assert_eq!(r.get(3, 0), 2);
        assert_eq!(r.get(3, 3), 3);
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.spst");
        let scenes = generate_dataset(3, &small_cfg()).unwrap();
        save_dataset(&path, &scenes).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.frames.values().iter().zip(b.frames.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_dataset_is_clean_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.spst");
        let scenes = generate_dataset(4, &small_cfg()).unwrap();
        save_dataset(&path, &scenes).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.spst");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let scenes = generate_dataset(8, &small_cfg()).unwrap();
        let (tr1, te1) = split_scenes(&scenes, 0.8, 5).unwrap();
        let (tr2, te2) = split_scenes(&scenes, 0.8, 5).unwrap();
        assert_eq!(
            tr1.iter().map(|s| s.id).collect::<Vec<_>>(),
            tr2.iter().map(|s| s.id).collect::<Vec<_>>()
        );
        assert_eq!(
            te1.iter().map(|s| s.id).collect::<Vec<_>>(),
            te2.iter().map(|s| s.id).collect::<Vec<_>>()
        );
        let mut ids: Vec<u64> = tr1.iter().chain(&te1).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..4).collect::<Vec<u64>>());
    }
}
