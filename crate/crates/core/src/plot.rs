//! PNG renderings of flow fields and instance masks.

use std::io::BufWriter;
use std::path::Path;

use crate::{Error, Result};

/// 8-bit RGBA image, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 4]) -> Self {
        Self {
            width,
            height,
            rgba: fill.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let i = 4 * (y * self.width + x);
        self.rgba[i..i + 4].try_into().unwrap()
    }

    fn set(&mut self, x: usize, y: usize, p: [u8; 4]) {
        let i = 4 * (y * self.width + x);
        self.rgba[i..i + 4].copy_from_slice(&p);
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, k: usize) -> Self {
        let k = k.max(1);
        let mut out = Image::new(self.width * k, self.height * k, [0; 4]);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.pixel(x / k, y / k));
            }
        }
        out
    }

    /// Side-by-side panels separated by a `gap`-pixel transparent strip.
    pub fn hstack(panels: &[Image], gap: usize) -> Self {
        let h = panels.iter().map(|p| p.height).max().unwrap_or(0);
        let w = panels.iter().map(|p| p.width).sum::<usize>() + gap * panels.len().saturating_sub(1);
        let mut out = Image::new(w, h, [0; 4]);
        let mut x0 = 0;
        for p in panels {
            for y in 0..p.height {
                for x in 0..p.width {
                    out.set(x0 + x, y, p.pixel(x, y));
                }
            }
            x0 += p.width + gap;
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Data(format!("png {}: {e}", path.display()));
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.rgba).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

/// HSV with full saturation and value to RGB; `h` in turns.
fn hue_rgb(h: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Grid row `r` is drawn at image row `h - 1 - r` so +y points up.
fn flip(h: usize, row: usize) -> usize {
    h - 1 - row
}

/// Flow field `[2, h, w]` (dx then dy): direction sets the hue (+x red,
/// +y yellow-green, -x cyan, -y violet), magnitude the opacity, saturating
/// at `max_mag` (or the field's largest magnitude).
pub fn flow_image(flow: &[f64], h: usize, w: usize, max_mag: Option<f64>) -> Image {
    let n = h * w;
    let mag = |p: usize| flow[p].hypot(flow[n + p]);
    let top = max_mag.unwrap_or_else(|| (0..n).map(mag).fold(0.0, f64::max));
    let mut img = Image::new(w, h, [0; 4]);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let m = mag(p);
            if m == 0.0 || top <= 0.0 {
                continue;
            }
            let ang = flow[n + p].atan2(flow[p]) / std::f64::consts::TAU;
            let [r, g, b] = hue_rgb(ang);
            let a = ((m / top).min(1.0) * 255.0).round() as u8;
            img.set(col, flip(h, row), [r, g, b, a]);
        }
    }
    img
}

/// Colour of instance `id`; hues spread by the golden ratio.
pub fn instance_color(id: u32) -> [u8; 3] {
    hue_rgb(id as f64 * 0.618_033_988_749_895)
}

/// Ground-truth occupancy in light grey under predicted instances in their
/// own colours. Either map may be empty.
pub fn mask_overlay(gt: &[u32], pred: &[u32], h: usize, w: usize) -> Image {
    let mut img = Image::new(w, h, [255, 255, 255, 255]);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let mut px = [255u8, 255, 255];
            if gt.get(p).is_some_and(|&g| g != 0) {
                px = [190, 190, 190];
            }
            if let Some(&id) = pred.get(p).filter(|&&v| v != 0) {
                let c = instance_color(id);
                for k in 0..3 {
                    px[k] = ((px[k] as u16 * 2 + c[k] as u16 * 3) / 5) as u8;
                }
            }
            img.set(col, flip(h, row), [px[0], px[1], px[2], 255]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_hue_and_opacity() {
        // 1x3 field: +x at full strength, -x at half, zero
        let flow = [2.0, -1.0, 0.0, 0.0, 0.0, 0.0];
        let img = flow_image(&flow, 1, 3, None);
        assert_eq!(img.pixel(0, 0), [255, 0, 0, 255]);
        assert_eq!(img.pixel(1, 0), [0, 255, 255, 128]);
        assert_eq!(img.pixel(2, 0)[3], 0);
        let up = flow_image(&[0.0, 1.0], 1, 1, Some(2.0));
        assert_eq!(up.pixel(0, 0)[3], 128);
        let y = flow_image(&[0.0, 1.0], 1, 1, None);
        assert_eq!(y.pixel(0, 0)[..3], hue_rgb(0.25));
    }

    #[test]
    fn rows_are_flipped_so_y_points_up() {
        // grid row 0 (smallest y) occupied
        let img = mask_overlay(&[1, 0], &[0, 0], 2, 1);
        assert_eq!(img.pixel(0, 1), [190, 190, 190, 255]);
        assert_eq!(img.pixel(0, 0), [255, 255, 255, 255]);
        let pred = mask_overlay(&[], &[0, 3], 2, 1);
        assert_ne!(pred.pixel(0, 0), [255, 255, 255, 255]);
        assert_ne!(instance_color(1), instance_color(2));
    }

    #[test]
    fn png_roundtrip() {
        let img = Image::hstack(&[flow_image(&[1.0, 0.0, 0.0, 1.0], 2, 1, None), mask_overlay(&[1, 0], &[2, 0], 2, 1)], 1).upscale(3);
        assert_eq!((img.width, img.height), (9, 6));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.write_png(&path).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (9, 6));
        assert_eq!(&buf[..info.buffer_size()], &img.rgba[..]);
    }
}
