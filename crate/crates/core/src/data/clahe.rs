//! Contrast-limited adaptive histogram equalisation.
//!
//! The image is split into a regular grid of tiles. Each tile's 256-bin
//! histogram is clipped at `clip_limit` times the mean bin count, the clipped
//! excess is spread evenly over all bins, and the cumulative histogram becomes
//! that tile's lookup table (`floor(cdf * 255 / tile_area)`). Every pixel then
//! blends the tables of its four nearest tile centres bilinearly.

use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, Result};

const BINS: usize = 256;
const MIN_TILE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheConfig {
    pub clip_limit: f64,
    pub tiles_x: u32,
    pub tiles_y: u32,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self { clip_limit: 2.0, tiles_x: 8, tiles_y: 8 }
    }
}

impl ClaheConfig {
    pub fn apply(&self, image: &GrayImage) -> Result<GrayImage> {
        clahe(image, self.clip_limit, self.tiles_x, self.tiles_y)
    }
}

fn tile_lut(hist: &mut [u32; BINS], area: u32, clip_limit: f64) -> [u8; BINS] {
    let clip = ((clip_limit * f64::from(area) / BINS as f64).floor() as u32).max(1);
    let mut excess = 0u32;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let per_bin = excess / BINS as u32;
    let residual = (excess % BINS as u32) as usize;
    for h in hist.iter_mut() {
        *h += per_bin;
    }
    if residual > 0 {
        let step = (BINS / residual).max(1);
        for i in (0..BINS).step_by(step).take(residual) {
            hist[i] += 1;
        }
    }
    let mut lut = [0u8; BINS];
    let mut cdf = 0u64;
    for (l, &h) in lut.iter_mut().zip(hist.iter()) {
        cdf += u64::from(h);
        *l = ((cdf * 255) / u64::from(area)).min(255) as u8;
    }
    lut
}

/// Tile index pair and blend weight for one pixel coordinate.
pub(crate) fn blend_axis(pos: u32, tile: u32, tiles: u32) -> (usize, usize, f64) {
    let t = (f64::from(pos) + 0.5) / f64::from(tile) - 0.5;
    let lo = t.floor();
    let frac = t - lo;
    let clampi = |v: f64| v.clamp(0.0, f64::from(tiles - 1)) as usize;
    (clampi(lo), clampi(lo + 1.0), frac)
}

pub fn clahe(image: &GrayImage, clip_limit: f64, tiles_x: u32, tiles_y: u32) -> Result<GrayImage> {
    let (w, h) = image.dimensions();
    if tiles_x == 0 || tiles_y == 0 || w % tiles_x != 0 || h % tiles_y != 0 {
        return Err(DataError::Config(format!("{tiles_x}x{tiles_y} tiles do not evenly divide a {w}x{h} image")));
    }
    let (tw, th) = (w / tiles_x, h / tiles_y);
    if tw < MIN_TILE || th < MIN_TILE {
        return Err(DataError::Config(format!("tiles of {tw}x{th} px are below the 8x8 minimum")));
    }
    if !(clip_limit > 0.0) {
        return Err(DataError::Config(format!("clip limit must be positive, got {clip_limit}")));
    }

    let raw = image.as_raw();
    let mut luts = Vec::with_capacity((tiles_x * tiles_y) as usize);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; BINS];
            for y in ty * th..(ty + 1) * th {
                let row = &raw[(y * w + tx * tw) as usize..(y * w + (tx + 1) * tw) as usize];
                for &v in row {
                    hist[v as usize] += 1;
                }
            }
            luts.push(tile_lut(&mut hist, tw * th, clip_limit));
        }
    }

    let cols: Vec<_> = (0..w).map(|x| blend_axis(x, tw, tiles_x)).collect();
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        let (r0, r1, fy) = blend_axis(y, th, tiles_y);
        for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
            let v = raw[(y * w) as usize + x] as usize;
            let at = |r: usize, c: usize| f64::from(luts[r * tiles_x as usize + c][v]);
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            let value = top * (1.0 - fy) + bottom * fy;
            out.as_mut()[(y * w) as usize + x] = value.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
