use image::{GrayImage, Rgb, RgbImage};

use super::{Confusion, Detection};
use crate::geometry::TEETH;

const CELL: u32 = 12;
const MARGIN: u32 = 2 * CELL;

/// 3x5 glyphs for `0-9` and `%`, one row per `u8`, high bit on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b101, 0b001, 0b010, 0b100, 0b101],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Draw `text` with its top-left corner at `(x, y)`; unknown characters
/// leave a gap.
fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, scale: i64, c: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '%' => GLYPHS[10],
            _ => continue,
        };
        let gx = x + i as i64 * 4 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, gx + col * scale + dx, y + row as i64 * scale + dy, c);
                        }
                    }
                }
            }
        }
    }
}

/// Piecewise-linear dark-blue to yellow ramp.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] =
        [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let ch = |k: usize| (STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

/// Row-normalised confusion matrix as a heat map, tooth indices along both
/// axes (rows: truth, columns: prediction).
pub fn render_confusion(confusion: &Confusion) -> RgbImage {
    let side = MARGIN + TEETH as u32 * CELL;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    for (r, row) in confusion.normalized().iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let color = colormap(v);
            for dy in 0..CELL - 1 {
                for dx in 0..CELL - 1 {
                    img.put_pixel(MARGIN + c as u32 * CELL + dx, MARGIN + r as u32 * CELL + dy, color);
                }
            }
        }
    }
    let black = Rgb([0, 0, 0]);
    for k in (0..TEETH).step_by(2) {
        let label = (k + 1).to_string();
        let at = (MARGIN + k as u32 * CELL) as i64 + 1;
        draw_text(&mut img, &label, at, 2, 1, black);
        draw_text(&mut img, &label, 2, at + 3, 1, black);
    }
    img
}

fn box_color(iou: Option<f64>) -> Rgb<u8> {
    match iou {
        Some(v) if v >= 0.5 => Rgb([40, 220, 60]),
        Some(_) => Rgb([250, 170, 30]),
        None => Rgb([230, 40, 40]),
    }
}

/// Boxes with their tooth index and, where known, IoU in percent. Colour
/// encodes IoU >= 0.5 (green), below (amber) or unmatched (red); with no
/// IoUs at all every box is drawn cyan.
pub fn render_overlay(image: &GrayImage, detections: &[Detection], ious: Option<&[Option<f64>]>) -> RgbImage {
    let mut img = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    for (i, d) in detections.iter().enumerate() {
        let iou = ious.and_then(|v| v.get(i).copied());
        let color = match iou {
            Some(m) => box_color(m),
            None => Rgb([0, 220, 230]),
        };
        let b = &d.bbox;
        let (x0, y0) = ((b.cx - b.w / 2.0).round() as i64, (b.cy - b.h / 2.0).round() as i64);
        let (x1, y1) = ((b.cx + b.w / 2.0).round() as i64, (b.cy + b.h / 2.0).round() as i64);
        for x in x0..=x1 {
            put(&mut img, x, y0, color);
            put(&mut img, x, y1, color);
        }
        for y in y0..=y1 {
            put(&mut img, x0, y, color);
            put(&mut img, x1, y, color);
        }
        draw_text(&mut img, &d.tooth.index().to_string(), x0 + 2, y0 + 2, 2, color);
        if let Some(Some(v)) = iou {
            draw_text(&mut img, &format!("{}%", (v * 100.0).round() as i64), x0 + 2, y0 + 15, 1, color);
        }
    }
    img
}
