//! Parametric panoramic-like scenes.
//!
//! Each arch is a parabola `y = a (x - 384)^2 + c` carrying 16 tooth blobs,
//! narrow at the incisors and wide at the molars. Absent
//! teeth are not drawn but keep the box the arch model puts them in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, Result, Scene, ToothAnnotation, CANVAS_H, CANVAS_W};
use crate::geometry::{Arch, BBox, ToothId, PER_ARCH, TEETH};

/// Widths grow quadratically from the central incisors to the molars, so
/// neighbour spacing changes smoothly along the arch.
const INCISOR_W: f64 = 26.0;
const MOLAR_W: f64 = 46.0;
const UPPER_HEIGHTS: [f64; PER_ARCH] =
    [78.0, 80.0, 84.0, 88.0, 90.0, 100.0, 96.0, 92.0, 92.0, 96.0, 100.0, 90.0, 88.0, 84.0, 80.0, 78.0];
const LOWER_HEIGHTS: [f64; PER_ARCH] =
    [76.0, 78.0, 80.0, 86.0, 88.0, 96.0, 88.0, 84.0, 84.0, 88.0, 96.0, 88.0, 86.0, 80.0, 78.0, 76.0];
const GAP: f64 = 4.0;
/// Sag of the occlusal curve at the outermost molars, in pixels.
const SAG: f64 = 24.0;
const MID_X: f64 = CANVAS_W as f64 / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// Max global shift, pixels.
    pub translate: f64,
    /// Relative spread of the parabola curvature.
    pub curvature: f64,
    /// Max in-plane rotation, degrees.
    pub rotation_deg: f64,
    /// Relative spread of tooth sizes.
    pub size: f64,
    /// Relative spread of tooth brightness.
    pub contrast: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { translate: 16.0, curvature: 0.3, rotation_deg: 3.0, size: 0.08, contrast: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub missing_probability: f64,
    pub jitter: Jitter,
    /// Std-dev of additive Gaussian pixel noise, grey levels.
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, missing_probability: 0.15, jitter: Jitter::default(), noise_level: 6.0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_probability) {
            return Err(DataError::Config(format!("missing_probability {} outside [0, 1]", self.missing_probability)));
        }
        let j = &self.jitter;
        let named = [
            ("jitter.translate", j.translate),
            ("jitter.curvature", j.curvature),
            ("jitter.rotation_deg", j.rotation_deg),
            ("jitter.size", j.size),
            ("jitter.contrast", j.contrast),
            ("noise_level", self.noise_level),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DataError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if j.size >= 0.5 || j.contrast >= 0.5 || j.rotation_deg > 10.0 || j.translate > 60.0 {
            return Err(DataError::Config("jitter too large to keep every box on the canvas".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToothStyle {
    pub intensity: f64,
    pub pulp: f64,
}

/// Everything needed to draw a scene; annotations come straight from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    /// Indexed by `ToothId::index() - 1`.
    pub boxes: [BBox; TEETH],
    pub present: [bool; TEETH],
    pub styles: [ToothStyle; TEETH],
    pub background: f64,
    /// Background slope per pixel along x and y.
    pub gradient: (f64, f64),
    pub noise_level: f64,
    pub noise_seed: u64,
}

fn symmetric(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    if spread > 0.0 {
        rng.random_range(-spread..=spread)
    } else {
        0.0
    }
}

fn arch_centres(size: f64, widths: &[f64; PER_ARCH]) -> [f64; PER_ARCH] {
    let mut xs = [0.0; PER_ARCH];
    for s in 1..PER_ARCH {
        xs[s] = xs[s - 1] + (widths[s - 1] + widths[s]) / 2.0 + GAP * (1.0 + size);
    }
    let mid = (xs[0] + xs[PER_ARCH - 1]) / 2.0;
    xs.map(|x| x - mid + MID_X)
}

pub fn scene_layout(config: &SynthConfig, index: u64) -> SceneLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let j = config.jitter;

    let scale = 1.0 + symmetric(&mut rng, j.size);
    let shift = (symmetric(&mut rng, j.translate), symmetric(&mut rng, j.translate));
    let theta = symmetric(&mut rng, j.rotation_deg).to_radians();
    let occlusal_y = f64::from(CANVAS_H) / 2.0 + shift.1;
    let (sin, cos) = theta.sin_cos();

    let mut boxes = [BBox::new(0.0, 0.0, 1.0, 1.0); TEETH];
    for arch in [Arch::Upper, Arch::Lower] {
        let heights = match arch {
            Arch::Upper => &UPPER_HEIGHTS,
            Arch::Lower => &LOWER_HEIGHTS,
        };
        let molar = MOLAR_W * (1.0 + symmetric(&mut rng, j.size));
        let widths: [f64; PER_ARCH] = std::array::from_fn(|s| {
            let t = (s as f64 - 7.5) / 7.5;
            (INCISOR_W + (molar - INCISOR_W) * t * t) * scale
        });
        // heights carry an independent per-tooth wobble
        let hs: [f64; PER_ARCH] = std::array::from_fn(|s| heights[s] * scale * (1.0 + symmetric(&mut rng, j.size / 3.0)));
        let xs = arch_centres(j.size, &widths);
        let span = xs[PER_ARCH - 1] - MID_X;
        let a = -SAG / (span * span) * (1.0 + symmetric(&mut rng, j.curvature));
        let c = match arch {
            Arch::Upper => occlusal_y - GAP - UPPER_HEIGHTS[7] * scale / 2.0,
            Arch::Lower => occlusal_y + GAP + LOWER_HEIGHTS[7] * scale / 2.0,
        };
        for s in 0..PER_ARCH {
            let dx = xs[s] - MID_X;
            let (px, py) = (dx, a * dx * dx + c - occlusal_y);
            let cx = MID_X + px * cos - py * sin + shift.0;
            let cy = occlusal_y + px * sin + py * cos;
            let id = ToothId::from_arch_slot(arch, s);
            boxes[id.index() as usize - 1] = BBox::new(cx, cy, widths[s], hs[s]);
        }
    }

    let present = std::array::from_fn(|_| !rng.random_bool(config.missing_probability));
    let gain = 1.0 + symmetric(&mut rng, j.contrast);
    let styles = std::array::from_fn(|_| ToothStyle {
        intensity: rng.random_range(115.0..150.0) * gain,
        pulp: rng.random_range(15.0..35.0),
    });
    let background = rng.random_range(35.0..50.0);
    let gradient = (symmetric(&mut rng, 0.02), symmetric(&mut rng, 0.03));
    let noise_seed = rng.random();
    SceneLayout { boxes, present, styles, background, gradient, noise_level: config.noise_level, noise_seed }
}

/// Grey value a tooth adds at `(px, py)`, zero outside its box.
fn tooth_value(b: &BBox, style: &ToothStyle, px: f64, py: f64) -> f64 {
    let u = (px - b.cx) / (b.w / 2.0);
    let v = (py - b.cy) / (b.h / 2.0);
    let s = (u.abs().powi(3) + v.abs().powi(3)).cbrt();
    if s >= 1.0 {
        return 0.0;
    }
    // roughly a two-pixel soft rim
    let edge = 4.0 / b.w.min(b.h);
    let alpha = ((1.0 - s) / edge).min(1.0);
    let body = style.intensity * (1.0 - 0.25 * s * s) - style.pulp * (-(u * u / 0.08 + v * v / 0.35)).exp();
    alpha * body
}

/// Rasterise a layout. Only teeth flagged present are drawn.
pub fn render(layout: &SceneLayout) -> GrayImage {
    let (w, h) = (CANVAS_W as usize, CANVAS_H as usize);
    let mut acc = vec![0.0f64; w * h];
    let (gx, gy) = layout.gradient;
    for y in 0..h {
        for x in 0..w {
            acc[y * w + x] = layout.background + gx * (x as f64 - w as f64 / 2.0) + gy * (y as f64 - h as f64 / 2.0);
        }
    }
    for ((b, style), _) in layout.boxes.iter().zip(&layout.styles).zip(&layout.present).filter(|(_, &p)| p) {
        let (x0, y0, x1, y1) = b.corners();
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize);
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                acc[y * w + x] += tooth_value(b, style, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    }
    if layout.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
        let normal = Normal::new(0.0, layout.noise_level).expect("noise level checked non-negative");
        acc.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let raw = acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(CANVAS_W, CANVAS_H, raw).expect("buffer sized to canvas")
}

/// Deterministic function of `(config.seed, index)`.
pub fn synthesize_scene(config: &SynthConfig, index: u64) -> Scene {
    let layout = scene_layout(config, index);
    let image = render(&layout);
    let teeth = ToothId::all()
        .map(|id| {
            let i = id.index() as usize - 1;
            ToothAnnotation { tooth: id, present: layout.present[i], bbox: layout.boxes[i] }
        })
        .collect();
    Scene { image, teeth }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_missing_teeth_at_zero_probability() {
        let cfg = SynthConfig { missing_probability: 0.0, ..Default::default() };
        for i in 0..5 {
            assert!(synthesize_scene(&cfg, i).teeth.iter().all(|t| t.present));
        }
    }

    #[test]
    fn determinism() {
        let cfg = SynthConfig { seed: 42, ..Default::default() };
        assert_eq!(synthesize_scene(&cfg, 7), synthesize_scene(&cfg, 7));
        assert_ne!(synthesize_scene(&cfg, 7).image, synthesize_scene(&cfg, 8).image);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SynthConfig { missing_probability: 1.2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { noise_level: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
