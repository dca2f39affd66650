//! Seeded synthetic scenes: paired high- and low-resolution 4-band rasters
//! produced by linear mixing of material signatures.
//!
//! Abundances come from smoothed Gaussian noise fields, one per material,
//! turned into a convex combination per pixel by a softmax. Each band is the
//! abundance-weighted sum of the endmember signatures plus Gaussian noise,
//! quantized to DN. The low-resolution scene is the block average of the
//! high-resolution one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{to_dn, Manifest, Raster, ToaBlock, MAX_DN};

pub const SCENE_BANDS: [&str; 4] = ["G", "R", "NIR", "SWIR"];

/// Built-in material signatures in DN, columns `(G, R, NIR, SWIR)`.
///
/// | material   |   G |   R | NIR | SWIR |
/// |------------|-----|-----|-----|------|
/// | water      | 180 | 120 |  60 |   55 |
/// | vegetation | 220 | 160 | 700 |  375 |
/// | land       | 300 | 340 | 430 |  265 |
/// | sand       | 560 | 620 | 680 |  395 |
/// | urban      | 420 | 440 | 480 |  285 |
///
/// The SWIR column equals `40 − 0.25·G + 0.25·R + 0.5·NIR` on every row, so
/// five materials mixed in a three-band input space still determine SWIR
/// (see [`is_well_posed`]).
pub fn default_endmembers() -> Vec<[u16; 4]> {
    vec![
        [180, 120, 60, 55],
        [220, 160, 700, 375],
        [300, 340, 430, 265],
        [560, 620, 680, 395],
        [420, 440, 480, 285],
    ]
}

pub const DEFAULT_MATERIAL_NAMES: [&str; 5] = ["water", "vegetation", "land", "sand", "urban"];

/// Illustrative radiometric constants attached to generated scenes so the
/// reflectance conversion can run on them. Not a sensor calibration.
pub fn default_toa_block() -> ToaBlock {
    ToaBlock {
        l_sat: vec![157.0, 170.0, 180.0, 35.0],
        esun: vec![1853.6, 1581.6, 1114.0, 238.1],
        sun_elevation_deg: 45.0,
        doy: 305,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// One row of `(G, R, NIR, SWIR)` DN per material.
    pub endmembers: Vec<[u16; 4]>,
    /// Radius of the box blur (applied three times) that smooths the
    /// abundance noise, in high-resolution pixels.
    pub blur_radius: usize,
    /// Softmax sharpness on the unit-variance smoothed fields. Larger values
    /// give purer pixels and narrower mixing zones.
    pub sharpness: f64,
    /// One-hot abundances (arg-max material per pixel) instead of the softmax.
    pub hard_abundances: bool,
    pub noise_sigma: f64,
    pub scale_factor: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            endmembers: default_endmembers(),
            blur_radius: 12,
            sharpness: 6.0,
            hard_abundances: false,
            noise_sigma: 2.0,
            scale_factor: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_materials(&self) -> usize {
        self.endmembers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.endmembers.len() < 2 {
            return bad(format!("need at least 2 materials, got {}", self.endmembers.len()));
        }
        if self.endmembers.iter().flatten().any(|&v| v > MAX_DN) {
            return bad(format!("endmember DN values must lie in [0, {MAX_DN}]"));
        }
        if self.scale_factor < 2 {
            return bad(format!("scale_factor must be at least 2, got {}", self.scale_factor));
        }
        if self.width == 0 || self.height == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if self.width % self.scale_factor != 0 || self.height % self.scale_factor != 0 {
            return bad(format!(
                "scale_factor {} does not divide {}×{}",
                self.scale_factor, self.height, self.width
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and ≥ 0, got {}", self.noise_sigma));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return bad(format!("sharpness must be positive, got {}", self.sharpness));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub hr: Raster,
    pub lr: Raster,
    pub config: SceneConfig,
}

fn blur_line(src: &[f64], r: usize, out: &mut Vec<f64>) {
    let n = src.len() as isize;
    let at = |i: isize| src[i.clamp(0, n - 1) as usize];
    let norm = 1.0 / (2 * r + 1) as f64;
    let r = r as isize;
    out.clear();
    let mut acc: f64 = (-r..=r).map(at).sum();
    for i in 0..n {
        out.push(acc * norm);
        acc += at(i + r + 1) - at(i - r);
    }
}

/// In-place box blur of radius `r` along rows then columns, edge-clamped.
fn box_blur(field: &mut [f64], w: usize, h: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut line = Vec::new();
    for y in 0..h {
        blur_line(&field[y * w..(y + 1) * w], r, &mut line);
        field[y * w..(y + 1) * w].copy_from_slice(&line);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        col.iter_mut().enumerate().for_each(|(y, v)| *v = field[y * w + x]);
        blur_line(&col, r, &mut line);
        for (y, &v) in line.iter().enumerate() {
            field[y * w + x] = v;
        }
    }
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Per-pixel abundances, `abundance[k][pixel]`, each pixel summing to 1.
pub fn abundance_fields(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (w, h, k) = (cfg.width, cfg.height, cfg.num_materials());
    let mut fields: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut f: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(rng)).collect();
            for _ in 0..3 {
                box_blur(&mut f, w, h, cfg.blur_radius);
            }
            standardize(&mut f);
            f
        })
        .collect();

    for p in 0..w * h {
        if cfg.hard_abundances {
            let best = (0..k)
                .max_by(|&a, &b| fields[a][p].total_cmp(&fields[b][p]).then(b.cmp(&a)))
                .expect("k ≥ 2");
            for (i, f) in fields.iter_mut().enumerate() {
                f[p] = if i == best { 1.0 } else { 0.0 };
            }
        } else {
            let top = fields.iter().map(|f| f[p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for f in fields.iter_mut() {
                f[p] = (cfg.sharpness * (f[p] - top)).exp();
                total += f[p];
            }
            fields.iter_mut().for_each(|f| f[p] /= total);
        }
    }
    fields
}

fn scene_manifest(w: usize, h: usize) -> Manifest {
    let mut m = Manifest::new(w, h, &SCENE_BANDS);
    m.toa = Some(default_toa_block());
    m
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let abundance = abundance_fields(cfg, &mut rng);
    let pixels = cfg.width * cfg.height;

    let mut bands = vec![vec![0u16; pixels]; 4];
    for (b, band) in bands.iter_mut().enumerate() {
        for (p, out) in band.iter_mut().enumerate() {
            let clean: f64 = abundance
                .iter()
                .zip(&cfg.endmembers)
                .map(|(a, e)| a[p] * e[b] as f64)
                .sum();
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * { let z: f64 = StandardNormal.sample(&mut rng); z }
            } else {
                0.0
            };
            *out = to_dn(clean + noise);
        }
    }
    let hr = Raster::from_bands(scene_manifest(cfg.width, cfg.height), &bands)?;
    let lr = downsample_area(&hr, cfg.scale_factor)?;
    Ok(ScenePair {
        hr,
        lr,
        config: cfg.clone(),
    })
}

/// Block average over `s×s` windows, rounded half-to-even.
pub fn downsample_area(r: &Raster, s: usize) -> Result<Raster> {
    if s == 0 || r.width() % s != 0 || r.height() % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "scale {s} does not divide {}×{}",
            r.height(),
            r.width()
        )));
    }
    let (w, h) = (r.width() / s, r.height() / s);
    let area = (s * s) as f64;
    let planes: Vec<Vec<u16>> = (0..r.bands())
        .map(|b| {
            let src = r.band(b);
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0u64;
                    for dy in 0..s {
                        let row = &src[(y * s + dy) * r.width() + x * s..][..s];
                        sum += row.iter().map(|&v| v as u64).sum::<u64>();
                    }
                    out.push((sum as f64 / area).round_ties_even() as u16);
                }
            }
            out
        })
        .collect();
    let mut meta = r.meta().clone();
    meta.width = w;
    meta.height = h;
    Raster::from_bands(meta, &planes)
}

fn rank<const N: usize>(mut rows: Vec<[f64; N]>) -> usize {
    let mut rank = 0;
    for col in 0..N {
        let Some(pivot) = (rank..rows.len())
            .filter(|&r| rows[r][col].abs() > 1e-9)
            .max_by(|&a, &b| rows[a][col].abs().total_cmp(&rows[b][col].abs()))
        else {
            continue;
        };
        rows.swap(rank, pivot);
        let p = rows[rank];
        for row in rows.iter_mut().skip(rank + 1) {
            let f = row[col] / p[col];
            for c in 0..N {
                row[c] -= f * p[c];
            }
        }
        rank += 1;
    }
    rank
}

fn differences<const N: usize>(endmembers: &[[u16; 4]]) -> Vec<[f64; N]> {
    let first = endmembers[0];
    endmembers[1..]
        .iter()
        .map(|e| std::array::from_fn(|i| e[i] as f64 - first[i] as f64))
        .collect()
}

/// Affine rank of the endmembers' `(G, R, NIR)` projections.
pub fn endmember_affine_rank(endmembers: &[[u16; 4]]) -> usize {
    if endmembers.is_empty() {
        return 0;
    }
    rank::<3>(differences(endmembers))
}

/// Whether noise-free SWIR is a function of `(G, R, NIR)` for every convex
/// mixture of the endmembers.
///
/// Holds exactly when appending the SWIR column does not raise the affine
/// rank, i.e. SWIR is affine in the other three bands over the endmembers.
/// Affinely independent projections (at most four materials) always qualify.
pub fn is_well_posed(endmembers: &[[u16; 4]]) -> bool {
    !endmembers.is_empty() && rank::<4>(differences(endmembers)) == endmember_affine_rank(endmembers)
}
