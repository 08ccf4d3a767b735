//! Dataset directory: a human-readable manifest plus one tensor file per
//! episode field, all little-endian f32 on disk.

use super::tensorfile::{load_tensor, save_tensor, Dtype};
use crate::error::{KrcError, Result};
use crate::tensor::Tensor;
use crate::valveworld::{CollectConfig, DomainParams, Episode, TextureInterval, IMG_H, IMG_W};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
const FIELDS: [&str; 6] = ["xran", "xcan", "b", "z", "u", "theta"];

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn save_dataset(dir: &Path, episodes: &[Episode], cfg: &CollectConfig, seed: u64) -> Result<()> {
    let ep_dir = dir.join("episodes");
    std::fs::create_dir_all(&ep_dir)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(manifest, "n_episodes = {}", episodes.len());
    let _ = writeln!(manifest, "n_random = {}", cfg.n_random);
    let _ = writeln!(manifest, "n_noisy_task = {}", cfg.n_noisy_task);
    let _ = writeln!(manifest, "t_len = {}", cfg.t_len);
    let _ = writeln!(manifest, "noise_sigma_u = {}", cfg.noise_sigma_u);
    let _ = writeln!(
        manifest,
        "texture_interval = {}",
        match cfg.texture_interval {
            TextureInterval::EachStep => "each_step",
            TextureInterval::EachSequence => "each_sequence",
        }
    );
    let _ = writeln!(manifest, "speed_multiplier = {}", cfg.speed_multiplier);
    let _ = writeln!(manifest, "seed = {seed}");
    let _ = writeln!(manifest, "img_h = {IMG_H}");
    let _ = writeln!(manifest, "img_w = {IMG_W}");

    for (i, ep) in episodes.iter().enumerate() {
        let base = format!("ep{i:05}");
        let d = &ep.domain;
        let light = d.light.map(|l| l as i64).unwrap_or(-1);
        let _ = writeln!(
            manifest,
            "episode.{i} = {base} {} {} {} {} {light}",
            d.texture_seed, d.cam_dx, d.cam_dy, d.zoom
        );
        let theta = Tensor::vector(ep.thetas.clone());
        for (name, tensor) in FIELDS.iter().zip([&ep.x_ran, &ep.x_can, &ep.b, &ep.z, &ep.u, &theta]) {
            save_tensor(&ep_dir.join(format!("{base}.{name}.krct")), tensor, Dtype::F32)?;
        }
    }
    crate::io::atomic_write(&manifest_path(dir), manifest.as_bytes())
}

pub struct LoadedDataset {
    pub episodes: Vec<Episode>,
    pub cfg: CollectConfig,
    pub seed: u64,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let mpath = manifest_path(dir);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| KrcError::Format { path: mpath.clone(), detail: e.to_string() })?;
    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        keys.get(k).ok_or_else(|| KrcError::Format { path: mpath.clone(), detail: format!("missing key {k}") })
    };
    let parse = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| KrcError::Format { path: mpath.clone(), detail: format!("bad number for {k}") })
    };
    let version: u32 = parse("format_version")? as u32;
    if version != FORMAT_VERSION {
        return Err(KrcError::Format {
            path: mpath.clone(),
            detail: format!("format version {version} (supported: {FORMAT_VERSION})"),
        });
    }
    let n_episodes = parse("n_episodes")? as usize;
    let cfg = CollectConfig {
        n_random: parse("n_random")? as usize,
        n_noisy_task: parse("n_noisy_task")? as usize,
        t_len: parse("t_len")? as usize,
        noise_sigma_u: parse("noise_sigma_u")?,
        texture_interval: match get("texture_interval")?.as_str() {
            "each_step" => TextureInterval::EachStep,
            "each_sequence" => TextureInterval::EachSequence,
            other => {
                return Err(KrcError::Format { path: mpath.clone(), detail: format!("texture interval '{other}'") })
            }
        },
        speed_multiplier: parse("speed_multiplier")?,
    };
    let seed = parse("seed")? as u64;

    let ep_dir = dir.join("episodes");
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let entry = get(&format!("episode.{i}"))?.clone();
        let parts: Vec<&str> = entry.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(KrcError::Format { path: mpath.clone(), detail: format!("episode.{i} entry malformed") });
        }
        let base = parts[0];
        let domain = DomainParams {
            texture_seed: parts[1].parse().map_err(|_| KrcError::Format {
                path: mpath.clone(),
                detail: format!("episode.{i} texture seed"),
            })?,
            cam_dx: parts[2].parse().unwrap_or(0.0),
            cam_dy: parts[3].parse().unwrap_or(0.0),
            zoom: parts[4].parse().unwrap_or(1.0),
            light: match parts[5].parse::<i64>().unwrap_or(-1) {
                l if l >= 0 => Some(l as u8),
                _ => None,
            },
        };
        let load = |name: &str| load_tensor(&ep_dir.join(format!("{base}.{name}.krct")));
        let theta = load("theta")?;
        episodes.push(Episode {
            x_ran: load("xran")?,
            x_can: load("xcan")?,
            b: load("b")?,
            z: load("z")?,
            u: load("u")?,
            domain,
            thetas: theta.into_data(),
        });
    }
    Ok(LoadedDataset { episodes, cfg, seed })
}
