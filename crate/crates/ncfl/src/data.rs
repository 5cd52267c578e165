//! Degradation synthesis, paired-clip ingestion, patch sampling and
//! training augmentations.
//!
//! AWGN is parameterized by sigma on the 0-255 scale and divided by 255
//! internally; noisy frames are clamped to [0,1] after addition
//! (display-referred pixels). Deraining/dehazing-style degradations come
//! in only through "paired" ingestion of pre-degraded clips.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor};
use crate::types::VideoClip;

#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    Awgn { sigma: f32 },
    Paired,
}

/// A clean clip with its degraded counterpart (same T, H, W).
#[derive(Clone, Debug)]
pub struct ClipPair {
    pub clean: VideoClip,
    pub degraded: VideoClip,
    pub degradation: Degradation,
}

impl ClipPair {
    pub fn check(&self) -> Result<()> {
        self.clean.check()?;
        self.degraded.check()?;
        if self.clean.frames.shape() != self.degraded.frames.shape() {
            return Err(Error::shape(format!(
                "pair {}: clean {:?} vs degraded {:?}",
                self.clean.id,
                self.clean.frames.shape(),
                self.degraded.frames.shape()
            )));
        }
        Ok(())
    }
}

/// Add i.i.d. Gaussian noise of std `sigma_255/255`, clamp to [0,1].
pub fn synthesize_awgn(clip: &VideoClip, sigma_255: f32, seed: u64) -> Result<ClipPair> {
    if sigma_255 < 0.0 || !sigma_255.is_finite() {
        return Err(Error::Data(format!("negative or non-finite sigma {sigma_255}")));
    }
    let mut degraded = clip.frames.clone();
    if sigma_255 > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, sigma_255 / 255.0).expect("valid std");
        for v in degraded.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(ClipPair {
        clean: clip.clone(),
        degraded: VideoClip {
            frames: degraded,
            frame_rate: clip.frame_rate,
            id: format!("{}+awgn{}", clip.id, sigma_255),
        },
        degradation: Degradation::Awgn { sigma: sigma_255 },
    })
}

/// Sample `batch` temporally contiguous, spatially co-located crops.
pub fn sample_patch_batch(
    pairs: &[ClipPair],
    patch: usize,
    clip_len: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<ClipPair>> {
    if pairs.is_empty() {
        return Err(Error::Data("no source clips".into()));
    }
    for p in pairs {
        let (t, _, h, w) = p.clean.frames.dims4();
        if t < clip_len || h < patch || w < patch {
            return Err(Error::Data(format!(
                "clip {} too small: [{t},{h},{w}] vs clip_len {clip_len}, patch {patch}",
                p.clean.id
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let (t, _, h, w) = pair.clean.frames.dims4();
        let t0 = rng.gen_range(0..=t - clip_len);
        let y0 = rng.gen_range(0..=h - patch);
        let x0 = rng.gen_range(0..=w - patch);
        let crop = |frames: &Tensor| crop_clip(frames, t0, clip_len, y0, x0, patch);
        out.push(ClipPair {
            clean: VideoClip {
                frames: crop(&pair.clean.frames),
                frame_rate: pair.clean.frame_rate,
                id: format!("{}@t{t0}y{y0}x{x0}", pair.clean.id),
            },
            degraded: VideoClip {
                frames: crop(&pair.degraded.frames),
                frame_rate: pair.degraded.frame_rate,
                id: format!("{}@t{t0}y{y0}x{x0}", pair.degraded.id),
            },
            degradation: pair.degradation.clone(),
        });
    }
    Ok(out)
}

fn crop_clip(frames: &Tensor, t0: usize, tn: usize, y0: usize, x0: usize, p: usize) -> Tensor {
    let (_, c, h, w) = frames.dims4();
    let _ = h;
    let mut out = Tensor::zeros(&[tn, c, p, p]);
    for t in 0..tn {
        for ci in 0..c {
            for y in 0..p {
                let src = (((t0 + t) * c + ci) * h + y0 + y) * w + x0;
                let dst = ((t * c + ci) * p + y) * p;
                out.data_mut()[dst..dst + p].copy_from_slice(&frames.data()[src..src + p]);
            }
        }
    }
    out
}

/// Random horizontal / vertical / transposed flips, each with
/// probability 1/2, identical ops on clean and degraded.
pub fn augment(batch: &[ClipPair], seed: u64) -> Result<Vec<ClipPair>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch.len());
    for pair in batch {
        let (_, _, h, w) = pair.clean.frames.dims4();
        let ops = FlipOps {
            horizontal: rng.gen_bool(0.5),
            vertical: rng.gen_bool(0.5),
            transpose: rng.gen_bool(0.5),
        };
        if ops.transpose && h != w {
            return Err(Error::Data(format!(
                "transposed flip needs square patches, got {h}x{w}"
            )));
        }
        out.push(ClipPair {
            clean: VideoClip {
                frames: apply_flips(&pair.clean.frames, ops),
                frame_rate: pair.clean.frame_rate,
                id: pair.clean.id.clone(),
            },
            degraded: VideoClip {
                frames: apply_flips(&pair.degraded.frames, ops),
                frame_rate: pair.degraded.frame_rate,
                id: pair.degraded.id.clone(),
            },
            degradation: pair.degradation.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlipOps {
    pub horizontal: bool,
    pub vertical: bool,
    pub transpose: bool,
}

/// Apply flips in a fixed order (h, then v, then transpose). The
/// generated augmentation group is the dihedral group of the square
/// (order 8).
pub fn apply_flips(frames: &Tensor, ops: FlipOps) -> Tensor {
    let mut cur = frames.clone();
    if ops.horizontal {
        cur = flip_w(&cur);
    }
    if ops.vertical {
        cur = flip_h(&cur);
    }
    if ops.transpose {
        cur = transpose_hw(&cur);
    }
    cur
}

/// Inverse of [`apply_flips`] (same ops in reverse order).
pub fn apply_flips_inverse(frames: &Tensor, ops: FlipOps) -> Tensor {
    let mut cur = frames.clone();
    if ops.transpose {
        cur = transpose_hw(&cur);
    }
    if ops.vertical {
        cur = flip_h(&cur);
    }
    if ops.horizontal {
        cur = flip_w(&cur);
    }
    cur
}

fn flip_w(frames: &Tensor) -> Tensor {
    let (t, c, h, w) = frames.dims4();
    let mut out = Tensor::zeros(&[t, c, h, w]);
    for i in 0..t * c * h {
        let row = &frames.data()[i * w..(i + 1) * w];
        let dst = &mut out.data_mut()[i * w..(i + 1) * w];
        for x in 0..w {
            dst[x] = row[w - 1 - x];
        }
    }
    out
}

fn flip_h(frames: &Tensor) -> Tensor {
    let (t, c, h, w) = frames.dims4();
    let mut out = Tensor::zeros(&[t, c, h, w]);
    for i in 0..t * c {
        for y in 0..h {
            let src = &frames.data()[(i * h + (h - 1 - y)) * w..][..w];
            out.data_mut()[(i * h + y) * w..][..w].copy_from_slice(src);
        }
    }
    out
}

fn transpose_hw(frames: &Tensor) -> Tensor {
    let (t, c, h, w) = frames.dims4();
    let mut out = Tensor::zeros(&[t, c, w, h]);
    for i in 0..t * c {
        let src = &frames.data()[i * h * w..(i + 1) * h * w];
        let dst = &mut out.data_mut()[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[x * h + y] = src[y * w + x];
            }
        }
    }
    out
}

// ---- PNG ingestion / export ----

/// Load a clip from `frame_%05d.png` files (or an `.ncfl` container).
pub fn load_clip_dir(dir: &Path) -> Result<VideoClip> {
    if dir.is_file() || dir.extension().map(|e| e == "ncfl").unwrap_or(false) {
        let frames = read_tensor(dir)?;
        return VideoClip::new(dir.file_stem().unwrap_or_default().to_string_lossy(), frames);
    }
    let mut indexed: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".png") else { continue };
        let Some(num) = stem.strip_prefix("frame_") else { continue };
        let idx: u64 =
            num.parse().map_err(|_| Error::Data(format!("bad frame index in {name}")))?;
        indexed.push((idx, path));
    }
    if indexed.is_empty() {
        return Err(Error::Data(format!("{}: no frame_*.png files", dir.display())));
    }
    indexed.sort();
    let first = indexed[0].0;
    for (k, (idx, _)) in indexed.iter().enumerate() {
        if *idx != first + k as u64 {
            return Err(Error::Data(format!(
                "{}: gap in frame indices at {}",
                dir.display(),
                first + k as u64
            )));
        }
    }
    let mut frames: Vec<Tensor> = Vec::with_capacity(indexed.len());
    let mut size: Option<(usize, usize)> = None;
    for (_, path) in &indexed {
        let f = load_png(path)?;
        let (_, h, w) = f.dims3();
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::Data(format!(
                    "{}: inconsistent frame size {h}x{w} vs {}x{}",
                    dir.display(),
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        frames.push(f);
    }
    VideoClip::new(
        dir.file_name().unwrap_or_default().to_string_lossy(),
        Tensor::stack(&frames),
    )
}

/// Decode one PNG to [3, H, W] floats in [0,1]; 16-bit scales by 1/65535.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader =
        decoder.read_info().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            for c in 0..3 {
                let s = c.min(channels - 1); // grayscale replicates
                let v = if sixteen {
                    let off = (pix * channels + s) * 2;
                    u16::from_be_bytes([buf[off], buf[off + 1]]) as f32 / 65535.0
                } else {
                    buf[pix * channels + s] as f32 / 255.0
                };
                out.data_mut()[c * h * w + pix] = v;
            }
        }
    }
    Ok(out)
}

/// Encode [3, H, W] floats in [0,1] as an 8-bit RGB PNG.
pub fn save_png(frame: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dims3();
    assert_eq!(c, 3, "save_png expects [3,H,W]");
    let mut bytes = vec![0u8; h * w * 3];
    for pix in 0..h * w {
        for ch in 0..3 {
            let v = frame.data()[ch * h * w + pix].clamp(0.0, 1.0);
            bytes[pix * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    write_png_bytes(path, &bytes, w as u32, h as u32, png::ColorType::Rgb)
}

/// Encode [H, W] floats in [0,1] as an 8-bit grayscale PNG.
pub fn save_png_gray(map: &Tensor, path: &Path) -> Result<()> {
    assert_eq!(map.shape().len(), 2, "save_png_gray expects [H,W]");
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let bytes: Vec<u8> =
        map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png_bytes(path, &bytes, w as u32, h as u32, png::ColorType::Grayscale)
}

fn write_png_bytes(
    path: &Path,
    bytes: &[u8],
    w: u32,
    h: u32,
    color: png::ColorType,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer =
        enc.write_header().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn save_clip_dir(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..clip.len() {
        save_png(&clip.frame(t), &dir.join(format!("frame_{t:05}.png")))?;
    }
    Ok(())
}

// ---- dataset manifest ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub degradation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clips: Vec<ManifestEntry>,
}

/// A clean clip plus how to degrade it (or its pre-degraded partner).
#[derive(Clone, Debug)]
pub struct ClipSource {
    pub clean: VideoClip,
    pub kind: SourceKind,
}

#[derive(Clone, Debug)]
pub enum SourceKind {
    /// Synthesize AWGN; sigma falls back to the config's when None.
    Awgn { sigma: Option<f32> },
    Paired { degraded: VideoClip },
}

impl ClipSource {
    pub fn realize(&self, default_sigma: f32, seed: u64) -> Result<ClipPair> {
        match &self.kind {
            SourceKind::Awgn { sigma } => {
                synthesize_awgn(&self.clean, sigma.unwrap_or(default_sigma), seed)
            }
            SourceKind::Paired { degraded } => {
                let pair = ClipPair {
                    clean: self.clean.clone(),
                    degraded: degraded.clone(),
                    degradation: Degradation::Paired,
                };
                pair.check()?;
                Ok(pair)
            }
        }
    }
}

pub fn load_dataset_manifest(path: &Path) -> Result<Vec<ClipSource>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in &manifest.clips {
        let clean = load_clip_dir(&base.join(&entry.dir))?;
        let kind = match entry.degradation.as_str() {
            "awgn" => SourceKind::Awgn { sigma: entry.sigma },
            "paired" => {
                let ddir = entry.degraded_dir.as_ref().ok_or_else(|| {
                    Error::Data(format!("{}: paired entry needs degraded_dir", entry.dir))
                })?;
                SourceKind::Paired { degraded: load_clip_dir(&base.join(ddir))? }
            }
            other => return Err(Error::Data(format!("unknown degradation {other:?}"))),
        };
        out.push(ClipSource { clean, kind });
    }
    if out.is_empty() {
        return Err(Error::Data("manifest lists no clips".into()));
    }
    Ok(out)
}

// ---- synthetic moving-pattern corpus ----

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Band-limited moving textures: a sum of drifting sinusoidal plaids plus
/// a couple of Gaussian blobs, all translating with a per-clip subpixel
/// velocity in [-2, 2] px/frame. Motion is analytic, so every frame is an
/// exact resample of the same pattern.
pub fn synthetic_corpus(spec: SynthSpec) -> Vec<VideoClip> {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    (0..spec.n_clips)
        .map(|i| {
            let clip_rng = ChaCha12Rng::seed_from_u64(rng.gen());
            synth_clip(format!("synth{i:03}"), spec, clip_rng)
        })
        .collect()
}

struct Wave {
    kx: f32,
    ky: f32,
    phase: f32,
    amp: [f32; 3],
}

struct Blob {
    cx: f32,
    cy: f32,
    inv2s2: f32,
    amp: [f32; 3],
}

fn synth_clip(id: String, spec: SynthSpec, mut rng: ChaCha12Rng) -> VideoClip {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let vx = rng.gen_range(-2.0..2.0f32);
    let vy = rng.gen_range(-2.0..2.0f32);
    let n_waves = rng.gen_range(6..10usize);
    let mut waves = Vec::with_capacity(n_waves);
    let mut amp_total = 0.0f32;
    for _ in 0..n_waves {
        let wavelength = rng.gen_range(6.0..24.0f32);
        let theta = rng.gen_range(0.0..std::f32::consts::TAU);
        let k = std::f32::consts::TAU / wavelength;
        let base = rng.gen_range(0.4..1.0f32);
        let amp = [
            base * rng.gen_range(0.7..1.3f32),
            base * rng.gen_range(0.7..1.3f32),
            base * rng.gen_range(0.7..1.3f32),
        ];
        amp_total += base * 1.3;
        waves.push(Wave {
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            amp,
        });
    }
    let wave_scale = 0.35 / amp_total;
    let blobs: Vec<Blob> = (0..2)
        .map(|_| {
            let s = rng.gen_range(3.0..8.0f32);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                cx: rng.gen_range(0.0..w as f32),
                cy: rng.gen_range(0.0..h as f32),
                inv2s2: 1.0 / (2.0 * s * s),
                amp: [
                    sign * rng.gen_range(0.04..0.1f32),
                    sign * rng.gen_range(0.04..0.1f32),
                    sign * rng.gen_range(0.04..0.1f32),
                ],
            }
        })
        .collect();

    let mut frames = Tensor::zeros(&[t, 3, h, w]);
    for ti in 0..t {
        let (ox, oy) = (vx * ti as f32, vy * ti as f32);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // Pattern translated by (ox, oy): sample at p - offset.
                    let px = x as f32 - ox;
                    let py = y as f32 - oy;
                    let mut v = 0.5f32;
                    for wv in &waves {
                        v += wave_scale * wv.amp[c] * (wv.kx * px + wv.ky * py + wv.phase).sin();
                    }
                    for bl in &blobs {
                        // Wrap blob offsets so blobs stay in view.
                        let dx = wrap_delta(px - bl.cx, w as f32);
                        let dy = wrap_delta(py - bl.cy, h as f32);
                        v += bl.amp[c] * (-(dx * dx + dy * dy) * bl.inv2s2).exp();
                    }
                    frames.data_mut()[((ti * 3 + c) * h + y) * w + x] = v.clamp(0.02, 0.98);
                }
            }
        }
    }
    VideoClip { frames, frame_rate: None, id }
}

fn wrap_delta(d: f32, len: f32) -> f32 {
    let mut d = d % len;
    if d > len / 2.0 {
        d -= len;
    } else if d < -len / 2.0 {
        d += len;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_clip(t: usize, h: usize, w: usize, fill: impl Fn(usize) -> f32) -> VideoClip {
        VideoClip::new("test", Tensor::from_fn(&[t, 3, h, w], fill)).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let clip = test_clip(2, 8, 8, |i| (i % 97) as f32 / 96.0);
        let pair = synthesize_awgn(&clip, 0.0, 5).unwrap();
        assert_eq!(pair.clean.frames, pair.degraded.frames);
    }

    #[test]
    fn awgn_is_deterministic_per_seed() {
        let clip = test_clip(2, 8, 8, |_| 0.5);
        let a = synthesize_awgn(&clip, 25.0, 9).unwrap();
        let b = synthesize_awgn(&clip, 25.0, 9).unwrap();
        let c = synthesize_awgn(&clip, 25.0, 10).unwrap();
        assert_eq!(a.degraded.frames, b.degraded.frames);
        assert_ne!(a.degraded.frames, c.degraded.frames);
    }

    #[test]
    fn awgn_negative_sigma_rejected() {
        let clip = test_clip(1, 8, 8, |_| 0.5);
        assert!(synthesize_awgn(&clip, -1.0, 0).is_err());
    }

    #[test]
    fn awgn_sample_std_matches_sigma() {
        // Mid-gray clip, ~1e6 samples at sigma 50: empirical std of the
        // added noise within 2% of 50/255 (clamping is negligible here).
        let t = 1_000_000usize / (3 * 64 * 64) + 1;
        let clip = test_clip(t, 64, 64, |_| 0.5);
        let pair = synthesize_awgn(&clip, 50.0, 123).unwrap();
        let m = clip.frames.numel() as f64;
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        for (d, c) in pair.degraded.frames.data().iter().zip(clip.frames.data()) {
            let e = (*d - *c) as f64;
            sum += e;
            sum2 += e * e;
        }
        let var = sum2 / m - (sum / m) * (sum / m);
        let std = var.sqrt();
        let want = 50.0 / 255.0;
        assert!((std - want).abs() / want < 0.02, "empirical std {std:.5} vs {want:.5}");
    }

    /// Gaussian error function via Abramowitz-Stegun 7.1.26.
    fn normal_cdf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.2316419 * x.abs());
        let poly = t
            * (0.319381530
                + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
        let tail = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * poly;
        if x >= 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }

    #[test]
    fn clamp_statistics_for_midrange_pixels() {
        // At the sigma=25 training level, pixels in [0.3, 0.7] clamp in
        // < 0.1% of samples. At sigma=60 the clamp fraction is large but
        // must match the analytic Gaussian tail prediction.
        for (sigma, check_small) in [(25.0f32, true), (60.0, false)] {
            let clip = test_clip(8, 64, 64, |i| 0.3 + 0.4 * ((i % 101) as f32 / 100.0));
            let pair = synthesize_awgn(&clip, sigma, 77).unwrap();
            let clamped =
                pair.degraded.frames.data().iter().filter(|&&v| v == 0.0 || v == 1.0).count();
            let frac = clamped as f64 / clip.frames.numel() as f64;
            let sn = sigma as f64 / 255.0;
            let predicted: f64 = clip
                .frames
                .data()
                .iter()
                .map(|&p| normal_cdf(-(p as f64) / sn) + normal_cdf((p as f64 - 1.0) / sn))
                .sum::<f64>()
                / clip.frames.numel() as f64;
            if check_small {
                assert!(frac < 1e-3, "sigma {sigma}: clamped fraction {frac}");
            }
            assert!(
                (frac - predicted).abs() < 0.1 * predicted.max(1e-4) + 5e-4,
                "sigma {sigma}: measured {frac:.5} vs predicted {predicted:.5}"
            );
        }
    }

    #[test]
    fn degenerate_crop_returns_full_clip() {
        let clip = test_clip(3, 16, 16, |i| (i % 13) as f32 / 12.0);
        let pair = synthesize_awgn(&clip, 10.0, 1).unwrap();
        let batch = sample_patch_batch(&[pair.clone()], 16, 3, 2, 0).unwrap();
        for b in &batch {
            assert_eq!(b.clean.frames, pair.clean.frames);
            assert_eq!(b.degraded.frames, pair.degraded.frames);
        }
    }

    #[test]
    fn patch_batch_crops_are_colocated() {
        let clip = test_clip(6, 24, 24, |i| (i % 251) as f32 / 250.0);
        let pair = synthesize_awgn(&clip, 30.0, 2).unwrap();
        // Stored noise field; a co-located crop of (clean, degraded) must
        // reproduce degraded = clean + noise at the same offsets.
        let noise: Vec<f32> = pair
            .degraded
            .frames
            .data()
            .iter()
            .zip(pair.clean.frames.data())
            .map(|(d, c)| d - c)
            .collect();
        let noise_clip = ClipPair {
            clean: pair.clean.clone(),
            degraded: VideoClip {
                frames: Tensor::new(pair.clean.frames.shape(), noise.clone()),
                frame_rate: None,
                id: "noise".into(),
            },
            degradation: Degradation::Paired,
        };
        let seed = 3;
        let batch = sample_patch_batch(&[pair.clone()], 8, 5, 4, seed).unwrap();
        let nbatch = sample_patch_batch(&[noise_clip], 8, 5, 4, seed).unwrap();
        assert_eq!(batch.len(), 4);
        for (b, nb) in batch.iter().zip(&nbatch) {
            assert_eq!(b.clean.frames.shape(), &[5, 3, 8, 8]);
            // clean crop + noise crop == degraded crop, elementwise.
            for i in 0..b.clean.frames.numel() {
                let want = b.clean.frames.data()[i] + nb.degraded.frames.data()[i];
                assert!((b.degraded.frames.data()[i] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn paper_preset_batch_shape() {
        // batch 16 of 5-frame 128x128 patches -> [16][5,3,128,128].
        let clip = test_clip(5, 128, 128, |i| (i % 9) as f32 / 8.0);
        let pair = synthesize_awgn(&clip, 10.0, 0).unwrap();
        let batch = sample_patch_batch(&[pair], 128, 5, 16, 1).unwrap();
        assert_eq!(batch.len(), 16);
        for b in &batch {
            assert_eq!(b.clean.frames.shape(), &[5, 3, 128, 128]);
        }
    }

    #[test]
    fn too_short_clip_rejected() {
        let clip = test_clip(2, 16, 16, |_| 0.5);
        let pair = synthesize_awgn(&clip, 10.0, 0).unwrap();
        assert!(sample_patch_batch(&[pair], 16, 5, 1, 0).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let frames = Tensor::from_fn(&[2, 3, 6, 6], |i| i as f32);
        for ops in [
            FlipOps { horizontal: true, vertical: false, transpose: false },
            FlipOps { horizontal: false, vertical: true, transpose: false },
            FlipOps { horizontal: false, vertical: false, transpose: true },
        ] {
            let twice = apply_flips(&apply_flips(&frames, ops), ops);
            assert_eq!(twice, frames, "{ops:?} applied twice");
        }
        // Inverse restores for any combination.
        let ops = FlipOps { horizontal: true, vertical: true, transpose: true };
        let back = apply_flips_inverse(&apply_flips(&frames, ops), ops);
        assert_eq!(back, frames);
    }

    #[test]
    fn augment_is_deterministic_and_distance_preserving() {
        let clip = test_clip(2, 8, 8, |i| (i % 7) as f32 / 6.0);
        let pair = synthesize_awgn(&clip, 20.0, 4).unwrap();
        let a = augment(&[pair.clone()], 11).unwrap();
        let b = augment(&[pair.clone()], 11).unwrap();
        assert_eq!(a[0].clean.frames, b[0].clean.frames);
        // Flips are isometries: the clean/degraded MSE (hence PSNR) is
        // unchanged.
        let before = pair.clean.frames.mse(&pair.degraded.frames);
        let after = a[0].clean.frames.mse(&a[0].degraded.frames);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn augment_rejects_nonsquare_with_transpose() {
        let clip = test_clip(1, 8, 10, |_| 0.5);
        let pair = synthesize_awgn(&clip, 0.0, 0).unwrap();
        let mut saw_err = false;
        for seed in 0..32 {
            if augment(&[pair.clone()], seed).is_err() {
                saw_err = true;
                break;
            }
        }
        assert!(saw_err, "no transpose sampled in 32 seeds");
    }

    #[test]
    fn png_round_trip_and_clip_dir() {
        let dir = tempfile::tempdir().unwrap();
        let clip = test_clip(5, 16, 16, |i| ((i * 37) % 256) as f32 / 255.0);
        save_clip_dir(&clip, dir.path()).unwrap();
        let back = load_clip_dir(dir.path()).unwrap();
        assert_eq!(back.frames.shape(), &[5, 3, 16, 16]);
        // 8-bit quantization: exact to half a code.
        assert!(back.frames.max_abs_diff(&clip.frames) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn clip_dir_gap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let clip = test_clip(4, 8, 8, |_| 0.5);
        save_clip_dir(&clip, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frame_00002.png")).unwrap();
        match load_clip_dir(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("gap"), "{msg}"),
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_png_scales_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_00000.png");
        let (w, h) = (4u32, 3u32);
        let value16: u16 = 52428;
        let mut bytes = Vec::new();
        for _ in 0..w * h {
            bytes.extend_from_slice(&value16.to_be_bytes());
        }
        let f = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(f), w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&bytes).unwrap();
        drop(writer);
        let t = load_png(&path).unwrap();
        for &v in t.data() {
            assert!((v - value16 as f32 / 65535.0).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = test_clip(3, 16, 16, |i| (i % 11) as f32 / 10.0);
        save_clip_dir(&clip, &dir.path().join("c0")).unwrap();
        let manifest = DatasetManifest {
            clips: vec![ManifestEntry {
                dir: "c0".into(),
                degradation: "awgn".into(),
                sigma: Some(25.0),
                degraded_dir: None,
            }],
        };
        let mpath = dir.path().join("dataset.json");
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let sources = load_dataset_manifest(&mpath).unwrap();
        assert_eq!(sources.len(), 1);
        let pair = sources[0].realize(50.0, 0).unwrap();
        match pair.degradation {
            Degradation::Awgn { sigma } => assert_eq!(sigma, 25.0),
            _ => panic!("expected awgn"),
        }
    }

    #[test]
    fn synthetic_corpus_is_in_range_and_deterministic() {
        let spec = SynthSpec { n_clips: 2, frames: 5, height: 24, width: 24, seed: 3 };
        let a = synthetic_corpus(spec);
        let b = synthetic_corpus(spec);
        assert_eq!(a.len(), 2);
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.frames, cb.frames);
            assert!(ca.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            ca.check().unwrap();
        }
        // Frames actually move.
        assert!(a[0].frame(0).max_abs_diff(&a[0].frame(1)) > 1e-3);
    }
}
