//! Software renderer for the valve world: one geometry pass drawn twice, once
//! in the fixed canonical palette and once under sampled domain parameters.
//! Anti-aliasing is 2× supersampling with a box downsample, so pixel values
//! move smoothly under small state changes.

use super::EnvState;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const IMG_W: usize = 32;
pub const IMG_H: usize = 32;
pub const PIXELS: usize = IMG_W * IMG_H * 3;
const SS: usize = 2;

pub const RING_RADIUS: f64 = 11.0;
pub const SPOKE_LEN: f64 = 13.0;
const SPOKE_HALF_WIDTH: f64 = 1.4;
const HUB_RADIUS: f64 = 2.0;
const TIP_RADIUS: f64 = 2.4;
const LIGHT_STRENGTH: f64 = 0.35;
pub const LIGHT_DIRECTIONS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub bg: [f64; 3],
    pub valve: [f64; 3],
    pub tip: [f64; 3],
}

impl Palette {
    /// Black background, white valve, orange fingertips.
    pub fn canonical() -> Palette {
        Palette { bg: [0.0, 0.0, 0.0], valve: [1.0, 1.0, 1.0], tip: [1.0, 0.55, 0.0] }
    }

    /// Texture draw: each color channel uniform over [0,255]. Foreground
    /// colors are redrawn until they keep a minimum mean-channel contrast to
    /// the background: a flat fill has no shading, so without the floor a
    /// draw can render the objects literally invisible, which the randomized
    /// views are not supposed to do.
    pub fn random(seed: u64) -> Palette {
        const MIN_CONTRAST: f64 = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |rng: &mut ChaCha8Rng| {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = rng.gen_range(0u32..256) as f64 / 255.0;
            }
            c
        };
        let contrast = |a: [f64; 3], b: [f64; 3]| -> f64 {
            (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 3.0
        };
        let bg = color(&mut rng);
        let mut valve = color(&mut rng);
        while contrast(valve, bg) < MIN_CONTRAST {
            valve = color(&mut rng);
        }
        let mut tip = color(&mut rng);
        while contrast(tip, bg) < MIN_CONTRAST {
            tip = color(&mut rng);
        }
        Palette { bg, valve, tip }
    }
}

/// One sampled visual domain. Ranges map the randomization table onto the
/// 32×32 canvas: offsets in [-2, 2] px, zoom in [0.91, 1.0], one of 16
/// brightness-gradient directions. `light: None` disables the gradient
/// (canonical rendering).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    pub texture_seed: u64,
    pub cam_dx: f64,
    pub cam_dy: f64,
    pub zoom: f64,
    pub light: Option<u8>,
}

impl DomainParams {
    pub fn sample(rng: &mut ChaCha8Rng) -> DomainParams {
        DomainParams {
            texture_seed: rng.gen(),
            cam_dx: rng.gen_range(-2.0..=2.0),
            cam_dy: rng.gen_range(-2.0..=2.0),
            zoom: rng.gen_range(0.91..=1.0),
            light: Some(rng.gen_range(0..LIGHT_DIRECTIONS)),
        }
    }

    /// Identity geometry, gradient off. With the canonical palette this
    /// reproduces `render_canonical` exactly.
    pub fn identity() -> DomainParams {
        DomainParams { texture_seed: 0, cam_dx: 0.0, cam_dy: 0.0, zoom: 1.0, light: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    All,
    /// fingertips only (the transparent-valve target images)
    NoValve,
}

fn layer_color(state: &EnvState, x: f64, y: f64, palette: &Palette, layer: Layer) -> [f64; 3] {
    let cx = IMG_W as f64 / 2.0;
    let cy = IMG_H as f64 / 2.0;
    let dx = x - cx;
    let dy = y - cy;

    // fingertips on top
    for pos in [state.f1, state.f2] {
        let ang = pos * std::f64::consts::TAU;
        let fx = cx + RING_RADIUS * ang.cos();
        let fy = cy - RING_RADIUS * ang.sin();
        let d2 = (x - fx) * (x - fx) + (y - fy) * (y - fy);
        if d2 <= TIP_RADIUS * TIP_RADIUS {
            return palette.tip;
        }
    }

    if layer == Layer::All {
        // hub
        if dx * dx + dy * dy <= HUB_RADIUS * HUB_RADIUS {
            return palette.valve;
        }
        // three spokes from the center
        for j in 0..3 {
            let ang = state.theta + j as f64 * std::f64::consts::TAU / 3.0;
            let ux = ang.cos();
            let uy = -ang.sin();
            let along = dx * ux + dy * uy;
            if (0.0..=SPOKE_LEN).contains(&along) {
                let perp = (dx * uy - dy * ux).abs();
                if perp <= SPOKE_HALF_WIDTH {
                    return palette.valve;
                }
            }
        }
    }

    palette.bg
}

/// Core pass: supersampled geometry under a camera transform, palette, and
/// optional brightness gradient.
pub fn render(state: &EnvState, domain: &DomainParams, palette: &Palette, layer: Layer) -> Tensor {
    let cx = IMG_W as f64 / 2.0;
    let cy = IMG_H as f64 / 2.0;
    let light_dir = domain.light.map(|idx| {
        let a = idx as f64 * std::f64::consts::TAU / LIGHT_DIRECTIONS as f64;
        (a.cos(), a.sin())
    });
    let max_r = (cx * cx + cy * cy).sqrt();

    let mut out = Tensor::zeros(vec![IMG_H, IMG_W, 3]);
    let inv_ss = 1.0 / (SS * SS) as f64;
    for py in 0..IMG_H {
        for px in 0..IMG_W {
            let mut acc = [0.0f64; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    // inverse camera: shift then unzoom about the center
                    let qx = (x - domain.cam_dx - cx) / domain.zoom + cx;
                    let qy = (y - domain.cam_dy - cy) / domain.zoom + cy;
                    let mut c = layer_color(state, qx, qy, palette, layer);
                    if let Some((lx, ly)) = light_dir {
                        let proj = ((x - cx) * lx + (y - cy) * ly) / max_r;
                        let f = 1.0 - LIGHT_STRENGTH * (1.0 + proj) / 2.0;
                        for v in &mut c {
                            *v *= f;
                        }
                    }
                    for (a, v) in acc.iter_mut().zip(c) {
                        *a += v;
                    }
                }
            }
            let base = (py * IMG_W + px) * 3;
            for ch in 0..3 {
                out.data_mut()[base + ch] = acc[ch] * inv_ss;
            }
        }
    }
    out
}

/// Fixed-palette rendering of the state; ignores any domain parameters by
/// construction (there is no such argument).
pub fn render_canonical(state: &EnvState) -> Tensor {
    render(state, &DomainParams::identity(), &Palette::canonical(), Layer::All)
}

/// Canonical-style rendering with the valve omitted (fingertips only).
pub fn render_transparent(state: &EnvState) -> Tensor {
    render(state, &DomainParams::identity(), &Palette::canonical(), Layer::NoValve)
}

/// Domain-randomized rendering. The palette is redrawn from
/// (domain texture seed, step seed), so per-step texture randomization passes
/// a fresh step seed and per-sequence randomization passes a constant.
pub fn render_randomized(state: &EnvState, domain: &DomainParams, step_texture_seed: u64) -> Tensor {
    let palette = Palette::random(domain.texture_seed ^ step_texture_seed.wrapping_mul(0x9e3779b97f4a7c15));
    render(state, domain, &palette, Layer::All)
}

/// Paint an axis-aligned opaque black rectangle covering 20–30% of the image
/// at a uniformly random position.
pub fn apply_occlusion(image: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let total = (IMG_W * IMG_H) as f64;
    let (w, h) = loop {
        let w = rng.gen_range(8..=26usize);
        let target = rng.gen_range(0.20..=0.30);
        let h = ((target * total / w as f64).round() as usize).clamp(1, IMG_H);
        let frac = (w * h) as f64 / total;
        if (0.20..=0.30).contains(&frac) {
            break (w, h);
        }
    };
    let x0 = rng.gen_range(0..=IMG_W - w);
    let y0 = rng.gen_range(0..=IMG_H - h);
    let mut out = image.clone();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let base = (y * IMG_W + x) * 3;
            for ch in 0..3 {
                out.data_mut()[base + ch] = 0.0;
            }
        }
    }
    out
}

/// Fraction of pixels that are exactly black (occlusion accounting in tests).
pub fn black_fraction(image: &Tensor) -> f64 {
    let mut n = 0usize;
    for p in 0..IMG_W * IMG_H {
        let base = p * 3;
        if image.data()[base] == 0.0 && image.data()[base + 1] == 0.0 && image.data()[base + 2] == 0.0 {
            n += 1;
        }
    }
    n as f64 / (IMG_W * IMG_H) as f64
}
