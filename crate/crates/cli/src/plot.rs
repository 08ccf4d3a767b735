//! Minimal PNG renderings of the CSV artifacts: a line plot for training
//! logs, a colored scatter for the latent export, and bar charts for the
//! comparison tables.

use crate::Common;
use image::{Rgb, RgbImage};
use krc_core::{KrcError, Result};
use std::path::Path;

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 48;

struct Frame {
    img: RgbImage,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Frame {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN..H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        }
        Frame { img, x_min, x_max, y_min, y_max }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let sx = (x - self.x_min) / (self.x_max - self.x_min).max(1e-12);
        let sy = (y - self.y_min) / (self.y_max - self.y_min).max(1e-12);
        let px = MARGIN as f64 + sx * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - sy * (H - 2 * MARGIN) as f64;
        (px as i64, py as i64)
    }

    fn dot(&mut self, x: f64, y: f64, color: Rgb<u8>, r: i64) {
        let (cx, cy) = self.to_px(x, y);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    let (px, py) = (cx + dx, cy + dy);
                    if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                        self.img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
        let (px0, py0) = self.to_px(x0, y0);
        let (px1, py1) = self.to_px(x1, y1);
        let steps = (px1 - px0).abs().max((py1 - py0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let px = px0 + ((px1 - px0) as f64 * t) as i64;
            let py = py0 + ((py1 - py0) as f64 * t) as i64;
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                self.img.put_pixel(px as u32, py as u32, color);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.img
            .save(path)
            .map_err(|e| KrcError::Format { path: path.to_path_buf(), detail: e.to_string() })
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KrcError::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| KrcError::Format { path: path.to_path_buf(), detail: "empty csv".to_string() })?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

fn col(rows: &[Vec<String>], idx: usize) -> Vec<f64> {
    rows.iter().map(|r| r[idx].parse().unwrap_or(f64::NAN)).collect()
}

pub fn plot(common: &Common, input: &Path, kind: &str) -> Result<()> {
    let cfg = common.load()?;
    let (_header, rows) = read_csv(input)?;
    if rows.is_empty() {
        return Err(KrcError::Contract("nothing to plot".to_string()));
    }
    let out = common.out.join(format!("{kind}.png"));
    match kind {
        "train-log" => {
            let xs = col(&rows, 0);
            let ys = col(&rows, 1);
            let (y_min, y_max) = bounds(&ys);
            let mut f = Frame::new(xs[0], *xs.last().unwrap(), y_min, y_max);
            for w in xs.windows(2).zip(ys.windows(2)) {
                f.line(w.0[0], w.1[0], w.0[1], w.1[1], Rgb([30, 60, 200]));
            }
            f.save(&out)?;
        }
        "latent" => {
            // last three columns are proj_x, proj_y, color
            let n = rows[0].len();
            let xs = col(&rows, n - 3);
            let ys = col(&rows, n - 2);
            let cs = col(&rows, n - 1);
            let (x_min, x_max) = bounds(&xs);
            let (y_min, y_max) = bounds(&ys);
            let mut f = Frame::new(x_min, x_max, y_min, y_max);
            for i in 0..xs.len() {
                let t = ((cs[i] + 1.0) / 2.0).clamp(0.0, 1.0);
                let color = Rgb([(t * 255.0) as u8, 40, ((1.0 - t) * 255.0) as u8]);
                f.dot(xs[i], ys[i], color, 2);
            }
            f.save(&out)?;
        }
        "compare" | "occlusion" => {
            let rates = col(&rows, 3);
            let mut f = Frame::new(-0.5, rows.len() as f64 - 0.5, 0.0, 1.0);
            for (i, r) in rates.iter().enumerate() {
                let x = i as f64;
                for frac in 0..100 {
                    let y = r * frac as f64 / 100.0;
                    f.line(x - 0.3, y, x + 0.3, y, Rgb([200, 90, 30]));
                }
            }
            f.save(&out)?;
        }
        "speed" => {
            let xs = col(&rows, 0);
            let krc = col(&rows, 1);
            let kc2 = col(&rows, 3);
            let (_, y_max) = bounds(&[krc.clone(), kc2.clone()].concat());
            let mut f = Frame::new(0.0, 1.0, 0.0, y_max);
            for i in 0..xs.len() {
                f.dot(xs[i], krc[i], Rgb([30, 60, 200]), 4);
                f.dot(xs[i], kc2[i], Rgb([200, 60, 30]), 4);
            }
            f.save(&out)?;
        }
        other => return Err(KrcError::Config(format!("unknown plot kind '{other}'"))),
    }
    crate::commands::write_meta(common, &cfg, "plot")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in v {
        if x.is_finite() {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
    }
    if lo >= hi {
        (lo - 1.0, lo + 1.0)
    } else {
        (lo, hi)
    }
}
