//! Band-sequential rasters of 10-bit DN values with a JSON sidecar manifest,
//! and 8-bit false-colour composites for inspection.
//!
//! On disk a raster `<base>` is two files: `<base>.bsq` holds little-endian
//! `u16` samples, all of band 0 row-major, then band 1, and so on;
//! `<base>.json` holds the [`Manifest`].

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest representable DN at 10-bit radiometric resolution.
pub const MAX_DN: u16 = 1023;
pub const BIT_DEPTH: u32 = 10;

/// Clamps to `[0, 1023]` and rounds half-to-even.
pub fn to_dn(v: f64) -> u16 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, MAX_DN as f64).round_ties_even() as u16
}

/// Nominal wavelength range in µm for the band names used by the toolkit.
pub fn nominal_wavelength(name: &str) -> [f64; 2] {
    match name {
        "G" => [0.52, 0.59],
        "R" => [0.62, 0.68],
        "NIR" => [0.77, 0.86],
        n if n.starts_with("SWIR") => [1.55, 1.70],
        _ => [0.0, 0.0],
    }
}

/// Constants needed to convert DN to top-of-atmosphere reflectance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToaBlock {
    /// Saturation radiance per band, W·m⁻²·sr⁻¹·µm⁻¹.
    pub l_sat: Vec<f64>,
    /// Exo-atmospheric solar irradiance per band, W·m⁻²·µm⁻¹.
    pub esun: Vec<f64>,
    pub sun_elevation_deg: f64,
    pub doy: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub band_names: Vec<String>,
    pub bit_depth: u32,
    pub wavelengths_um: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toa: Option<ToaBlock>,
}

impl Manifest {
    /// Manifest for the named bands with nominal wavelengths and no TOA block.
    pub fn new(width: usize, height: usize, band_names: &[&str]) -> Self {
        Self {
            width,
            height,
            bands: band_names.len(),
            band_names: band_names.iter().map(|s| s.to_string()).collect(),
            bit_depth: BIT_DEPTH,
            wavelengths_um: band_names.iter().map(|n| nominal_wavelength(n)).collect(),
            toa: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return bad(format!(
                "dimensions must be positive, got {}×{}×{}",
                self.width, self.height, self.bands
            ));
        }
        if self.band_names.len() != self.bands {
            return bad(format!(
                "{} band names for {} bands",
                self.band_names.len(),
                self.bands
            ));
        }
        if self.wavelengths_um.len() != self.bands {
            return bad(format!(
                "{} wavelength ranges for {} bands",
                self.wavelengths_um.len(),
                self.bands
            ));
        }
        if self.bit_depth != BIT_DEPTH {
            return bad(format!("bit_depth must be {BIT_DEPTH}, got {}", self.bit_depth));
        }
        if let Some(toa) = &self.toa {
            if toa.l_sat.len() != self.bands || toa.esun.len() != self.bands {
                return bad("toa l_sat/esun must have one entry per band".into());
            }
            if toa.l_sat.iter().chain(&toa.esun).any(|&v| !(v > 0.0)) {
                return bad("toa l_sat and esun must be positive".into());
            }
            if !(toa.sun_elevation_deg > 0.0 && toa.sun_elevation_deg <= 90.0) {
                return bad(format!(
                    "sun_elevation_deg must lie in (0, 90], got {}",
                    toa.sun_elevation_deg
                ));
            }
            if !(1..=366).contains(&toa.doy) {
                return bad(format!("doy must lie in [1, 366], got {}", toa.doy));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A validated `height × width × bands` grid of 10-bit DN values stored
/// band-sequentially.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    meta: Manifest,
    data: Vec<u16>,
}

impl Raster {
    pub fn new(meta: Manifest, data: Vec<u16>) -> Result<Self> {
        meta.validate()?;
        let expected = meta.pixels() * meta.bands;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(offset) = data.iter().position(|&v| v > MAX_DN) {
            return Err(Error::DnOutOfRange {
                offset,
                value: data[offset],
            });
        }
        Ok(Self { meta, data })
    }

    /// Builds a raster from per-band planes.
    pub fn from_bands(meta: Manifest, bands: &[Vec<u16>]) -> Result<Self> {
        let data = bands.iter().flatten().copied().collect();
        Self::new(meta, data)
    }

    pub fn meta(&self) -> &Manifest {
        &self.meta
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn bands(&self) -> usize {
        self.meta.bands
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Row-major plane of band `b`.
    pub fn band(&self, b: usize) -> &[u16] {
        let n = self.meta.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> u16 {
        self.data[band * self.meta.pixels() + row * self.meta.width + col]
    }

    /// New raster holding the listed bands in the given order.
    pub fn select_bands(&self, indices: &[usize]) -> Result<Raster> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.bands()) {
            return Err(Error::InvalidArgument(format!(
                "band index {bad} out of range for {} bands",
                self.bands()
            )));
        }
        let mut meta = self.meta.clone();
        meta.bands = indices.len();
        meta.band_names = indices.iter().map(|&i| self.meta.band_names[i].clone()).collect();
        meta.wavelengths_um = indices.iter().map(|&i| self.meta.wavelengths_um[i]).collect();
        if let Some(toa) = &mut meta.toa {
            toa.l_sat = indices.iter().map(|&i| toa.l_sat[i]).collect();
            toa.esun = indices.iter().map(|&i| toa.esun[i]).collect();
        }
        let planes: Vec<Vec<u16>> = indices.iter().map(|&i| self.band(i).to_vec()).collect();
        Raster::from_bands(meta, &planes)
    }
}

/// `<base>.<ext>`, appending rather than replacing any existing extension.
pub fn with_extension(base: &Path, ext: &str) -> PathBuf {
    let mut s: OsString = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn read_raster(base: impl AsRef<Path>) -> Result<Raster> {
    let base = base.as_ref();
    let json_path = with_extension(base, "json");
    let bsq_path = with_extension(base, "bsq");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", json_path.display())))?;
    meta.validate()?;
    let bytes = fs::read(&bsq_path).map_err(|e| Error::io(&bsq_path, e))?;
    let expected = meta.pixels() * meta.bands * 2;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected: expected / 2,
            actual: bytes.len() / 2,
        });
    }
    let data = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Raster::new(meta, data)
}

pub fn write_raster(r: &Raster, base: impl AsRef<Path>) -> Result<()> {
    let base = base.as_ref();
    let json_path = with_extension(base, "json");
    let bsq_path = with_extension(base, "bsq");
    let mut bytes = Vec::with_capacity(r.data.len() * 2);
    for v in &r.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bsq_path, bytes).map_err(|e| Error::io(&bsq_path, e))?;
    let mut text = serde_json::to_string_pretty(&r.meta).expect("manifest serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Sidecar for a band-sequential `f32` raster, such as reflectance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatManifest {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub band_names: Vec<String>,
    pub quantity: String,
}

/// Writes `<base>.f32` (little-endian `f32`, band-sequential) and
/// `<base>.json`.
pub fn write_float_raster(meta: &FloatManifest, planes: &[Vec<f32>], base: impl AsRef<Path>) -> Result<()> {
    let base = base.as_ref();
    if planes.len() != meta.bands || planes.iter().any(|p| p.len() != meta.width * meta.height) {
        return Err(Error::SizeMismatch {
            expected: meta.bands * meta.width * meta.height,
            actual: planes.iter().map(Vec::len).sum(),
        });
    }
    let data_path = with_extension(base, "f32");
    let json_path = with_extension(base, "json");
    let bytes: Vec<u8> = planes.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let text = serde_json::to_string_pretty(meta).expect("manifest serializes") + "\n";
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Reads a raster written by [`write_float_raster`].
pub fn read_float_raster(base: impl AsRef<Path>) -> Result<(FloatManifest, Vec<Vec<f32>>)> {
    let base = base.as_ref();
    let json_path = with_extension(base, "json");
    let data_path = with_extension(base, "f32");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: FloatManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", json_path.display())))?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n = meta.width * meta.height;
    if bytes.len() != n * meta.bands * 4 {
        return Err(Error::SizeMismatch {
            expected: n * meta.bands,
            actual: bytes.len() / 4,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let planes = if n == 0 { vec![] } else { values.chunks(n).map(<[f32]>::to_vec).collect() };
    Ok((meta, planes))
}

/// Value at the given percentile, nearest rank on the sorted samples.
fn percentile(sorted: &[u16], p: f64) -> u16 {
    let idx = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Linear 2nd–98th percentile stretch of one band to 8 bits. A degenerate
/// range maps every pixel to 0.
pub fn stretch_band(band: &[u16]) -> Vec<u8> {
    let mut sorted = band.to_vec();
    sorted.sort_unstable();
    let lo = percentile(&sorted, 2.0) as f64;
    let hi = percentile(&sorted, 98.0) as f64;
    if hi <= lo {
        return vec![0; band.len()];
    }
    band.iter()
        .map(|&v| ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encodes three bands as a binary P6 image, each band stretched
/// independently.
pub fn composite_ppm(r: &Raster, triplet: [usize; 3]) -> Result<Vec<u8>> {
    if let Some(&bad) = triplet.iter().find(|&&b| b >= r.bands()) {
        return Err(Error::InvalidArgument(format!(
            "band index {bad} out of range for {} bands",
            r.bands()
        )));
    }
    let planes: Vec<Vec<u8>> = triplet.iter().map(|&b| stretch_band(r.band(b))).collect();
    let mut out = format!("P6\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.reserve(r.meta.pixels() * 3);
    for i in 0..r.meta.pixels() {
        out.extend([planes[0][i], planes[1][i], planes[2][i]]);
    }
    Ok(out)
}

pub fn write_composite(r: &Raster, triplet: [usize; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = composite_ppm(r, triplet)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
