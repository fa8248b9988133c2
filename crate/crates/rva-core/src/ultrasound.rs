//! Synthetic short-axis B-mode rendering and image-side detection.
//!
//! A frame is built from ground-truth cross-sections: multiplicative
//! Rayleigh speckle over a uniform background, anechoic lumen ellipses with
//! one-pixel hyperechoic walls, then the device tone pipeline (gain level,
//! grayscale-map gamma, dynamic-range stretch, enhancement sharpening) and
//! optional temporal frame correlation against the previous frame.
//!
//! Detection never sees ground truth: the quality score and the vessel /
//! needle-tip detectors work on pixels alone.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::{cross_section, TissueBlock};
use crate::transform::RigidTransform;

#[derive(Debug, Error)]
pub enum UltrasoundError {
    #[error("imaging plane does not intersect the tissue block")]
    NoIntersection,
    #[error("no vessel-like region detected in frame")]
    NoVesselDetected,
    #[error("invalid ultrasound config: {0}")]
    InvalidConfig(String),
}

/// Device settings. Defaults mirror the clinical parameterization the
/// simulator reproduces: 80 dB gain, 1.6 cm depth, 80 dB dynamic range,
/// 14.2 MHz operating (12.4 MHz probe), enhancement 3, grayscale map 14,
/// frame correlation 2, 0.1 mm/px.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsConfig {
    pub gain_db: f64,
    pub depth_cm: f64,
    pub dynamic_range_db: f64,
    pub frequency_mhz: f64,
    pub probe_frequency_mhz: f64,
    pub enhancement_level: u32,
    pub grayscale_map: u32,
    pub frame_correlation: u32,
    pub resolution_mm_per_px: f64,
    pub width_mm: f64,
    /// Multiplier on the speckle standard deviation (1.0 = nominal).
    pub speckle_scale: f64,
}

impl Default for UsConfig {
    fn default() -> Self {
        Self {
            gain_db: 80.0,
            depth_cm: 1.6,
            dynamic_range_db: 80.0,
            frequency_mhz: 14.2,
            probe_frequency_mhz: 12.4,
            enhancement_level: 3,
            grayscale_map: 14,
            frame_correlation: 2,
            resolution_mm_per_px: 0.1,
            width_mm: 12.8,
            speckle_scale: 1.0,
        }
    }
}

impl UsConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("gain_db", self.gain_db),
            ("depth_cm", self.depth_cm),
            ("dynamic_range_db", self.dynamic_range_db),
            ("frequency_mhz", self.frequency_mhz),
            ("probe_frequency_mhz", self.probe_frequency_mhz),
            ("resolution_mm_per_px", self.resolution_mm_per_px),
            ("width_mm", self.width_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be > 0"));
            }
        }
        if self.speckle_scale < 0.0 || !self.speckle_scale.is_finite() {
            return Err("speckle_scale must be >= 0".into());
        }
        if self.frame_correlation == 0 {
            return Err("frame_correlation must be >= 1".into());
        }
        let rows_exact = self.depth_cm * 10.0 / self.resolution_mm_per_px;
        if (rows_exact - rows_exact.round()).abs() > 1.0 {
            return Err(
                "depth_cm and resolution_mm_per_px must give an integer row count within 1 px"
                    .into(),
            );
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        (self.depth_cm * 10.0 / self.resolution_mm_per_px).round() as usize
    }

    pub fn cols(&self) -> usize {
        (self.width_mm / self.resolution_mm_per_px).round() as usize
    }
}

/// One rendered B-mode frame. Pixel (row, col) covers depth
/// `row * mm_per_px` and lateral `col * mm_per_px` from the top-left; the
/// plane origin sits at the top-center of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundFrame {
    pub pixels: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub origin: RigidTransform,
    pub mm_per_px: f64,
    pub frame_index: u32,
}

impl UltrasoundFrame {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Convert image coordinates (x lateral px, y depth px) to a world point
    /// on the imaging plane.
    pub fn image_to_world(&self, x_px: f64, y_px: f64) -> Vector3<f64> {
        let lateral = x_px * self.mm_per_px - (self.width as f64) * self.mm_per_px / 2.0;
        let depth = y_px * self.mm_per_px;
        self.origin.translation
            + self.origin.rotation.column(0) * lateral
            + self.origin.rotation.column(1) * depth
    }

    /// World point to plane coordinates (lateral mm from origin, depth mm,
    /// elevation mm).
    pub fn world_to_plane(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let rel = p - self.origin.translation;
        Vector3::new(
            rel.dot(&self.origin.rotation.column(0).into_owned()),
            rel.dot(&self.origin.rotation.column(1).into_owned()),
            rel.dot(&self.origin.rotation.column(2).into_owned()),
        )
    }

    /// Binary PGM (P5) with a comment carrying the calibration.
    pub fn write_pgm<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "P5")?;
        writeln!(w, "# mm_per_px={:.6} frame_index={}", self.mm_per_px, self.frame_index)?;
        writeln!(w, "{} {}", self.width, self.height)?;
        writeln!(w, "255")?;
        w.write_all(&self.pixels)
    }

    pub fn read_pgm<R: std::io::BufRead>(r: &mut R) -> std::io::Result<UltrasoundFrame> {
        use std::io::{Error, ErrorKind};
        let mut magic = String::new();
        r.read_line(&mut magic)?;
        if magic.trim() != "P5" {
            return Err(Error::new(ErrorKind::InvalidData, "not a P5 PGM"));
        }
        let mut mm_per_px = 0.1;
        let mut frame_index = 0u32;
        let mut line = String::new();
        loop {
            line.clear();
            r.read_line(&mut line)?;
            if line.starts_with('#') {
                for tok in line.trim_start_matches('#').split_whitespace() {
                    if let Some(v) = tok.strip_prefix("mm_per_px=") {
                        mm_per_px = v.parse().unwrap_or(mm_per_px);
                    } else if let Some(v) = tok.strip_prefix("frame_index=") {
                        frame_index = v.parse().unwrap_or(frame_index);
                    }
                }
            } else {
                break;
            }
        }
        let dims: Vec<usize> = line
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        if dims.len() != 2 {
            return Err(Error::new(ErrorKind::InvalidData, "bad PGM dimensions"));
        }
        let (width, height) = (dims[0], dims[1]);
        line.clear();
        r.read_line(&mut line)?; // maxval
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels)?;
        Ok(UltrasoundFrame {
            pixels,
            width,
            height,
            origin: RigidTransform::identity(),
            mm_per_px,
            frame_index,
        })
    }
}

/// A detected feature in image coordinates. `center_mm` is always
/// `center_px * mm_per_px`, componentwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center_px: [f64; 2],
    pub center_mm: [f64; 2],
    pub diameter_mm: f64,
    pub confidence: f64,
}

// Tone-pipeline constants. Gain maps linearly from dB to the background
// mean level; dynamic range stretches contrast around mid-gray relative to
// a 100 dB reference window; the grayscale map index sets the display gamma
// (14 = linear); speckle grain scales inversely with operating frequency.
const GAIN_LEVEL_PER_DB: f64 = 1.5;
const DR_REFERENCE_DB: f64 = 100.0;
const GAMMA_REFERENCE_MAP: f64 = 14.0;
const GRAIN_REFERENCE: f64 = 28.4; // grain_px = GRAIN_REFERENCE / f_mhz
const SPECKLE_LOOKS: usize = 3; // multilook average tames the Rayleigh cv
const LUMEN_ECHO: f64 = 0.05;
const WALL_ECHO: f64 = 1.8;
const OUTSIDE_ECHO: f64 = 0.02;
const ENHANCEMENT_GAIN: f64 = 0.1;
const WALL_COHERENT_FRACTION: f64 = 0.7;

/// Render one frame. `prev_frame` enables the temporal frame-correlation
/// blend `(prev*(c-1) + fresh) / c`.
pub fn render_frame<R: Rng>(
    block: &TissueBlock,
    probe_pose: &RigidTransform,
    cfg: &UsConfig,
    rng: &mut R,
    prev_frame: Option<&UltrasoundFrame>,
) -> Result<UltrasoundFrame, UltrasoundError> {
    cfg.validate().map_err(UltrasoundError::InvalidConfig)?;
    let rows = cfg.rows();
    let cols = cfg.cols();
    let res = cfg.resolution_mm_per_px;

    if !plane_intersects_block(block, probe_pose, cfg) {
        return Err(UltrasoundError::NoIntersection);
    }

    let sections = cross_section(block, probe_pose);

    // Echogenicity layer; wall pixels keep a coherent (specular) component
    // so speckle dips cannot open the ring.
    let mut echo = vec![0.0f64; rows * cols];
    let mut is_wall = vec![false; rows * cols];
    let x_axis = probe_pose.rotation.column(0).into_owned();
    let y_axis = probe_pose.rotation.column(1).into_owned();
    let origin = probe_pose.translation;
    let half_width = cols as f64 * res / 2.0;
    for r in 0..rows {
        let depth = (r as f64 + 0.5) * res;
        for c in 0..cols {
            let lateral = (c as f64 + 0.5) * res - half_width;
            let world = origin + x_axis * lateral + y_axis * depth;
            let mut e = if block.contains(&world) { 1.0 } else { OUTSIDE_ECHO };
            for s in &sections {
                let dx = lateral - s.center[0];
                let dy = depth - s.center[1];
                let (sa, ca) = s.angle_rad.sin_cos();
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                let a = s.major_mm / 2.0;
                let b = s.minor_mm / 2.0;
                let rho = ((u / a) * (u / a) + (v / b) * (v / b)).sqrt();
                if rho <= 1.0 {
                    e = LUMEN_ECHO;
                    is_wall[r * cols + c] = false;
                } else if (rho - 1.0) * b.min(a) <= res * std::f64::consts::SQRT_2 {
                    // wall band ~1 px; sqrt(2) keeps the ring free of
                    // diagonal aliasing gaps at any radius
                    e = WALL_ECHO;
                    is_wall[r * cols + c] = true;
                }
            }
            echo[r * cols + c] = e;
        }
    }

    // Multiplicative speckle on a coarse grain grid, bilinearly upsampled.
    // Rayleigh(1) normalized to unit mean; speckle_scale stretches the
    // deviation around that mean.
    let grain = ((GRAIN_REFERENCE / cfg.frequency_mhz).round() as usize).max(1);
    let g_rows = rows / grain + 2;
    let g_cols = cols / grain + 2;
    let rayleigh_mean = (std::f64::consts::PI / 2.0).sqrt();
    let mut field = vec![0.0f64; g_rows * g_cols];
    for cell in field.iter_mut() {
        // Multilook Rayleigh(1) by inverse CDF, normalized to unit mean.
        let mut s = 0.0;
        for _ in 0..SPECKLE_LOOKS {
            let u: f64 = rng.random();
            s += (-2.0 * (1.0 - u).ln()).sqrt() / rayleigh_mean;
        }
        s /= SPECKLE_LOOKS as f64;
        *cell = (1.0 + cfg.speckle_scale * (s - 1.0)).max(0.0);
    }
    let sample_field = |r: usize, c: usize| -> f64 {
        let fr = r as f64 / grain as f64;
        let fc = c as f64 / grain as f64;
        let r0 = fr.floor() as usize;
        let c0 = fc.floor() as usize;
        let tr = fr - r0 as f64;
        let tc = fc - c0 as f64;
        let at = |rr: usize, cc: usize| field[rr.min(g_rows - 1) * g_cols + cc.min(g_cols - 1)];
        at(r0, c0) * (1.0 - tr) * (1.0 - tc)
            + at(r0 + 1, c0) * tr * (1.0 - tc)
            + at(r0, c0 + 1) * (1.0 - tr) * tc
            + at(r0 + 1, c0 + 1) * tr * tc
    };

    let level = cfg.gain_db * GAIN_LEVEL_PER_DB;
    let mut img = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let s = sample_field(r, c);
            let modulation = if is_wall[idx] {
                WALL_COHERENT_FRACTION + (1.0 - WALL_COHERENT_FRACTION) * s
            } else {
                s
            };
            img[idx] = (echo[idx] * modulation * level).min(255.0);
        }
    }

    // Tone: grayscale-map gamma then dynamic-range stretch.
    let gamma = GAMMA_REFERENCE_MAP / cfg.grayscale_map as f64;
    let window = 255.0 * cfg.dynamic_range_db / DR_REFERENCE_DB;
    let lo = 127.5 - window / 2.0;
    let tone = |v: f64| -> f64 {
        let g = 255.0 * (v / 255.0).powf(gamma);
        (((g - lo) / window) * 255.0).clamp(0.0, 255.0)
    };
    // 1024-bin LUT; the map is monotone and smooth.
    let lut: Vec<f64> = (0..1024).map(|i| tone(i as f64 * 255.0 / 1023.0)).collect();
    for v in img.iter_mut() {
        let idx = (*v * 1023.0 / 255.0).round() as usize;
        *v = lut[idx.min(1023)];
    }

    // Enhancement: unsharp-mask passes.
    for _ in 0..cfg.enhancement_level {
        let blurred = box3(&img, rows, cols);
        for i in 0..img.len() {
            img[i] = (img[i] + ENHANCEMENT_GAIN * (img[i] - blurred[i])).clamp(0.0, 255.0);
        }
    }

    let mut pixels: Vec<u8> = img.iter().map(|v| v.round() as u8).collect();

    let frame_index = prev_frame.map_or(0, |p| p.frame_index + 1);
    if let Some(prev) = prev_frame {
        let c = prev_frame_blend_weight(cfg);
        if c > 1 && prev.width == cols && prev.height == rows {
            for (px, pv) in pixels.iter_mut().zip(&prev.pixels) {
                let blended = (u32::from(*pv) * (c - 1) + u32::from(*px) + c / 2) / c;
                *px = blended as u8;
            }
        }
    }

    Ok(UltrasoundFrame {
        pixels,
        width: cols,
        height: rows,
        origin: *probe_pose,
        mm_per_px: res,
        frame_index,
    })
}

fn prev_frame_blend_weight(cfg: &UsConfig) -> u32 {
    cfg.frame_correlation
}

fn plane_intersects_block(block: &TissueBlock, pose: &RigidTransform, cfg: &UsConfig) -> bool {
    // The image rectangle must overlap the block's AABB in plane coordinates.
    let inv = pose.inverse();
    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for i in 0..8 {
        let corner = Vector3::new(
            if i & 1 == 0 { block.extent_min.x } else { block.extent_max.x },
            if i & 2 == 0 { block.extent_min.y } else { block.extent_max.y },
            if i & 4 == 0 { block.extent_min.z } else { block.extent_max.z },
        );
        let p = inv.transform_point(&corner);
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let half_width = cfg.width_mm / 2.0;
    let depth = cfg.depth_cm * 10.0;
    lo.z <= 0.0
        && hi.z >= 0.0
        && lo.x <= half_width
        && hi.x >= -half_width
        && lo.y <= depth
        && hi.y >= 0.0
}

fn box3(img: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && rr < rows as i64 && cc >= 0 && cc < cols as i64 {
                        sum += img[rr as usize * cols + cc as usize];
                        n += 1.0;
                    }
                }
            }
            out[r * cols + c] = sum / n;
        }
    }
    out
}

/// Superimpose the needle-tip echo: a saturating Gaussian blob (sigma 2 px,
/// peak 255) when the tip lies within +/-0.5 mm elevation of the plane.
/// `tip_in_plane` is in plane coordinates (lateral, depth, elevation).
pub fn render_needle(
    frame: &UltrasoundFrame,
    tip_in_plane: Option<Vector3<f64>>,
) -> UltrasoundFrame {
    let mut out = frame.clone();
    let Some(tip) = tip_in_plane else {
        return out;
    };
    if tip.z.abs() > 0.5 {
        return out;
    }
    let res = frame.mm_per_px;
    let cx = (tip.x + frame.width as f64 * res / 2.0) / res;
    let cy = tip.y / res;
    let sigma = 2.0f64;
    let radius = (4.0 * sigma).ceil() as i64;
    let (icx, icy) = (cx.round() as i64, cy.round() as i64);
    for r in (icy - radius).max(0)..=(icy + radius).min(frame.height as i64 - 1) {
        for c in (icx - radius).max(0)..=(icx + radius).min(frame.width as i64 - 1) {
            let dx = (c as f64 + 0.5) - cx;
            let dy = (r as f64 + 0.5) - cy;
            let blob = 255.0 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let idx = r as usize * frame.width + c as usize;
            out.pixels[idx] = out.pixels[idx].saturating_add(blob.round() as u8);
        }
    }
    out
}

// --- detection internals ---

struct Component {
    area: usize,
    perimeter: usize,
    sum_r: f64,
    sum_c: f64,
    mean_value: f64,
}

fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.round() as usize).min(255)] += 1;
    }
    let total = values.len() as f64;
    let occupied = hist.iter().filter(|&&h| h > 0).count();
    if occupied < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0.0f64, 0usize);
    for (t, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * h as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1 as f64)
}

/// 4-connected components of `mask`, with mean intensity from `values`.
/// 4-connectivity keeps dark regions from jumping diagonally across the
/// one-pixel wall ring.
fn components(mask: &[bool], values: &[f64], rows: usize, cols: usize) -> Vec<Component> {
    components_labeled(mask, values, rows, cols).0
}

fn components_labeled(
    mask: &[bool],
    values: &[f64],
    rows: usize,
    cols: usize,
) -> (Vec<Component>, Vec<usize>) {
    let mut label = vec![usize::MAX; mask.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Component {
            area: 0,
            perimeter: 0,
            sum_r: 0.0,
            sum_c: 0.0,
            mean_value: 0.0,
        };
        stack.push(start);
        label[start] = id;
        let mut value_sum = 0.0;
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / cols, idx % cols);
            comp.area += 1;
            comp.sum_r += r as f64;
            comp.sum_c += c as f64;
            value_sum += values[idx];
            let mut boundary = r == 0 || r + 1 == rows || c == 0 || c + 1 == cols;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr < 0 || rr >= rows as i64 || cc < 0 || cc >= cols as i64 {
                    continue;
                }
                if !mask[rr as usize * cols + cc as usize] {
                    boundary = true;
                }
            }
            if boundary {
                comp.perimeter += 1;
            }
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr < 0 || rr >= rows as i64 || cc < 0 || cc >= cols as i64 {
                    continue;
                }
                let nidx = rr as usize * cols + cc as usize;
                if mask[nidx] && label[nidx] == usize::MAX {
                    label[nidx] = id;
                    stack.push(nidx);
                }
            }
        }
        comp.mean_value = value_sum / comp.area as f64;
        comps.push(comp);
    }
    (comps, label)
}

fn equivalent_diameter_px(area: usize) -> f64 {
    2.0 * (area as f64 / std::f64::consts::PI).sqrt()
}

fn circularity(c: &Component) -> f64 {
    // 4*pi*A / P^2, capped at 1; P estimated from boundary pixel count.
    if c.perimeter == 0 {
        return 1.0;
    }
    (4.0 * std::f64::consts::PI * c.area as f64 / (c.perimeter as f64 * c.perimeter as f64))
        .min(1.0)
}

/// Contrast-to-noise ratio of the darkest blob against the rest of the
/// frame: `|mean_blob - mean_background| / sd_background`, computed on raw
/// pixels (the hyperechoic wall ring keeps lumen components from bleeding
/// into speckle dips, so no pre-smoothing is needed). Frames with no dark
/// blob of at least 3 px equivalent diameter score zero.
pub fn quality_score(frame: &UltrasoundFrame) -> f64 {
    let values: Vec<f64> = frame.pixels.iter().map(|&p| f64::from(p)).collect();
    let Some(threshold) = otsu_threshold(&values) else {
        return 0.0;
    };
    let mask: Vec<bool> = values.iter().map(|&v| v < threshold).collect();
    let comps = components_labeled(&mask, &values, frame.height, frame.width);
    let Some((blob_id, darkest)) = comps
        .0
        .iter()
        .enumerate()
        .filter(|(_, c)| equivalent_diameter_px(c.area) >= 3.0)
        .min_by(|(_, a), (_, b)| a.mean_value.total_cmp(&b.mean_value))
    else {
        return 0.0;
    };
    let labels = comps.1;
    let mut bg_sum = 0.0;
    let mut bg_sq = 0.0;
    let mut bg_n = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if labels[i] != blob_id {
            bg_sum += v;
            bg_sq += v * v;
            bg_n += 1.0;
        }
    }
    if bg_n < 2.0 {
        return 0.0;
    }
    let bg_mean = bg_sum / bg_n;
    let bg_var = (bg_sq / bg_n - bg_mean * bg_mean).max(0.0);
    let bg_sd = bg_var.sqrt();
    if bg_sd == 0.0 {
        return 0.0;
    }
    (darkest.mean_value - bg_mean).abs() / bg_sd
}

/// Dark-blob vessel detection: Otsu threshold, 8-connected components,
/// best component of at least 3 px equivalent diameter by circularity
/// weighted with darkness contrast.
pub fn detect_vessel(frame: &UltrasoundFrame) -> Result<Detection, UltrasoundError> {
    let values: Vec<f64> = frame.pixels.iter().map(|&p| f64::from(p)).collect();
    let threshold = otsu_threshold(&values).ok_or(UltrasoundError::NoVesselDetected)?;
    let mask: Vec<bool> = values.iter().map(|&v| v < threshold).collect();
    let comps = components(&mask, &values, frame.height, frame.width);
    let mut bg_sum = 0.0;
    let mut bg_n = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if !mask[i] {
            bg_sum += v;
            bg_n += 1.0;
        }
    }
    let bg_mean = if bg_n > 0.0 { bg_sum / bg_n } else { 255.0 };

    // Score by circularity times darkness contrast; circularity alone is
    // unreliable for few-pixel components.
    let score = |c: &Component| circularity(c) * ((bg_mean - c.mean_value) / 255.0).clamp(0.0, 1.0);
    let best = comps
        .iter()
        .filter(|c| equivalent_diameter_px(c.area) >= 3.0)
        .max_by(|a, b| score(a).total_cmp(&score(b)))
        .ok_or(UltrasoundError::NoVesselDetected)?;

    let cx = best.sum_c / best.area as f64 + 0.5;
    let cy = best.sum_r / best.area as f64 + 0.5;
    let contrast = ((bg_mean - best.mean_value) / 255.0).clamp(0.0, 1.0);
    Ok(Detection {
        center_px: [cx, cy],
        center_mm: [cx * frame.mm_per_px, cy * frame.mm_per_px],
        diameter_mm: equivalent_diameter_px(best.area) * frame.mm_per_px,
        confidence: (circularity(best) * contrast).clamp(0.0, 1.0),
    })
}

/// Brightest saturated spot: absent unless some pixel exceeds 250. The
/// center is the intensity-weighted centroid of the saturated neighborhood
/// around the global maximum.
pub fn detect_needle_tip(frame: &UltrasoundFrame) -> Option<Detection> {
    let (mut best_idx, mut best_val) = (0usize, 0u8);
    for (i, &p) in frame.pixels.iter().enumerate() {
        if p > best_val {
            best_val = p;
            best_idx = i;
        }
    }
    if best_val <= 250 {
        return None;
    }
    let (br, bc) = (best_idx / frame.width, best_idx % frame.width);
    let mut sum_w = 0.0;
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    let mut count = 0usize;
    for dr in -4i64..=4 {
        for dc in -4i64..=4 {
            let rr = br as i64 + dr;
            let cc = bc as i64 + dc;
            if rr < 0 || rr >= frame.height as i64 || cc < 0 || cc >= frame.width as i64 {
                continue;
            }
            let v = f64::from(frame.get(rr as usize, cc as usize));
            if v > 250.0 {
                sum_w += v;
                sum_r += (rr as f64 + 0.5) * v;
                sum_c += (cc as f64 + 0.5) * v;
                count += 1;
            }
        }
    }
    let cx = sum_c / sum_w;
    let cy = sum_r / sum_w;
    Some(Detection {
        center_px: [cx, cy],
        center_mm: [cx * frame.mm_per_px, cy * frame.mm_per_px],
        diameter_mm: equivalent_diameter_px(count) * frame.mm_per_px,
        confidence: 1.0,
    })
}
