//! Image-quality and radiometric metrics on single bands in raw DN.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mosaic::build_grid;
use crate::raster::{Raster, ToaBlock, MAX_DN};

/// Peak value for 10-bit data.
pub const PEAK: f64 = MAX_DN as f64;
pub const SSIM_WINDOW: usize = 8;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("bands of {} and {} pixels", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Empty("metric on empty bands".into()));
    }
    Ok(())
}

fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mse(x, y)?.sqrt())
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Mean SSIM over every valid 8×8 window (stride 1), uniform weights,
/// `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`.
pub fn ssim(x: &[f64], y: &[f64], width: usize, peak: f64) -> Result<f64> {
    check_pair(x, y)?;
    if width == 0 || x.len() % width != 0 {
        return Err(Error::Shape(format!("{} pixels do not form rows of {width}", x.len())));
    }
    let height = x.len() / width;
    let win = SSIM_WINDOW;
    if width < win || height < win {
        return Err(Error::InvalidArgument(format!(
            "image {height}×{width} is smaller than the {win}×{win} window"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=height - win {
        for c in 0..=width - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                let o = (r + dy) * width + c;
                for (&a, &b) in x[o..o + win].iter().zip(&y[o..o + win]) {
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `20·log10(peak / rmse)`; identical inputs are an error.
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    let e = rmse(x, y)?;
    if e == 0.0 {
        return Err(Error::Undefined("PSNR is infinite for identical bands".into()));
    }
    Ok(20.0 * (peak / e).log10())
}

/// Signal-to-reconstruction error `10·log10(μx² / MSE)` in dB, `x` the
/// reference.
pub fn sre(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = mse(x, y)?;
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    if mean == 0.0 {
        return Err(Error::Undefined("SRE needs a reference with non-zero mean".into()));
    }
    if m == 0.0 {
        return Err(Error::Undefined("SRE is infinite for identical bands".into()));
    }
    Ok(10.0 * (mean * mean / m).log10())
}

fn angle_deg(dot: f64, nx: f64, ny: f64) -> f64 {
    (dot / (nx * ny)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle in degrees between the two bands viewed as flat vectors.
pub fn sam(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Undefined("spectral angle of a zero vector".into()));
    }
    Ok(angle_deg(dot, nx, ny))
}

/// Mean per-pixel spectral angle across bands. `x[b]` and `y[b]` are band
/// planes; pixels where either spectrum is all zero are skipped.
pub fn sam_multiband(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("{} vs {} bands", x.len(), y.len())));
    }
    let n = x[0].len();
    for (a, b) in x.iter().zip(y) {
        if a.len() != n || b.len() != n {
            return Err(Error::Shape("band planes differ in length".into()));
        }
    }
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..n {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            dot += a[p] * b[p];
            nx += a[p] * a[p];
            ny += b[p] * b[p];
        }
        if nx > 0.0 && ny > 0.0 {
            total += angle_deg(dot, nx.sqrt(), ny.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Undefined("every pixel spectrum is zero".into()));
    }
    Ok(total / count as f64)
}

/// Fraction of pixels with `|x − y| ≤ tol`.
pub fn tolerance_fraction(x: &[f64], y: &[f64], tol: f64) -> Result<f64> {
    check_pair(x, y)?;
    let hits = x.iter().zip(y).filter(|(a, b)| (*a - *b).abs() <= tol).count();
    Ok(hits as f64 / x.len() as f64)
}

/// Population variance of every patch of the half-overlapping `d×d` grid,
/// in grid order.
pub fn patch_variances(band: &[f64], width: usize, d: usize) -> Result<Vec<f64>> {
    if width == 0 || band.len() % width != 0 {
        return Err(Error::Shape(format!("{} pixels do not form rows of {width}", band.len())));
    }
    let grid = build_grid(band.len() / width, width, d)?;
    Ok(grid
        .anchors()
        .map(|(r, c)| {
            let n = (d * d) as f64;
            let (mut s, mut ss) = (0.0, 0.0);
            for y in 0..d {
                for &v in &band[(r + y) * width + c..][..d] {
                    s += v;
                    ss += v * v;
                }
            }
            let m = s / n;
            (ss / n - m * m).max(0.0)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin includes its upper edge.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "histogram needs bins ≥ 1 and hi > lo, got {bins} over [{lo}, {hi}]"
            )));
        }
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
            .collect();
        Ok(Self {
            edges,
            counts: vec![0; bins],
        })
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        if !(lo..=hi).contains(&v) {
            return;
        }
        let i = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        self.counts[i.min(bins - 1)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub const DEFAULT_BINS: usize = 64;

/// Histogram of patch variances over `bins` uniform bins on
/// `[0, max variance]` (upper edge 1 when every patch is flat).
pub fn patch_variance_histogram(band: &[f64], width: usize, d: usize, bins: usize) -> Result<Histogram> {
    let vars = patch_variances(band, width, d)?;
    let hi = vars.iter().cloned().fold(0.0, f64::max);
    let mut h = Histogram::uniform(0.0, if hi > 0.0 { hi } else { 1.0 }, bins)?;
    vars.into_iter().for_each(|v| h.add(v));
    Ok(h)
}

/// Mean DN per requested band over a list of `(row, col)` pixels.
pub fn spectral_response_sample(r: &Raster, pixels: &[(usize, usize)], bands: &[usize]) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(Error::Empty("no pixels to sample".into()));
    }
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= r.height() || x >= r.width()) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({y}, {x}) outside {}×{}",
            r.height(),
            r.width()
        )));
    }
    if let Some(&b) = bands.iter().find(|&&b| b >= r.bands()) {
        return Err(Error::InvalidArgument(format!("band {b} out of range")));
    }
    Ok(bands
        .iter()
        .map(|&b| pixels.iter().map(|&(y, x)| r.get(b, y, x) as f64).sum::<f64>() / pixels.len() as f64)
        .collect())
}

/// Constants for one band's reflectance conversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToaConstants {
    pub l_sat: f64,
    pub esun: f64,
    pub sun_elevation_deg: f64,
    pub doy: u32,
}

impl ToaConstants {
    pub fn from_block(block: &ToaBlock, band: usize) -> Result<Self> {
        match (block.l_sat.get(band), block.esun.get(band)) {
            (Some(&l_sat), Some(&esun)) => Ok(Self {
                l_sat,
                esun,
                sun_elevation_deg: block.sun_elevation_deg,
                doy: block.doy,
            }),
            _ => Err(Error::InvalidArgument(format!("no TOA constants for band {band}"))),
        }
    }
}

/// Earth–sun distance in AU, first-order eccentricity model.
pub fn earth_sun_distance(doy: u32) -> f64 {
    1.0 - 0.01672 * (0.9856f64 * (doy as f64 - 4.0)).to_radians().cos()
}

/// Top-of-atmosphere reflectance from 10-bit DN:
/// `ρ = π·L·d² / (esun·sin(elevation))` with `L = DN/1023·l_sat`.
pub fn toa_reflectance(dn: &[u16], c: &ToaConstants) -> Result<Vec<f64>> {
    toa_reflectance_with_distance(dn, c, earth_sun_distance(c.doy))
}

pub fn toa_reflectance_with_distance(dn: &[u16], c: &ToaConstants, d_au: f64) -> Result<Vec<f64>> {
    if !(c.esun > 0.0) || !(c.l_sat > 0.0) {
        return Err(Error::InvalidArgument("esun and l_sat must be positive".into()));
    }
    if !(c.sun_elevation_deg > 0.0 && c.sun_elevation_deg <= 90.0) {
        return Err(Error::InvalidArgument(format!(
            "sun elevation {} outside (0, 90]",
            c.sun_elevation_deg
        )));
    }
    let k = std::f64::consts::PI * d_au * d_au / (c.esun * c.sun_elevation_deg.to_radians().sin());
    Ok(dn.iter().map(|&v| k * v as f64 / PEAK * c.l_sat).collect())
}

/// Reflectance of every band of `r` using the manifest's TOA block.
pub fn toa_raster(r: &Raster) -> Result<Vec<Vec<f64>>> {
    let block = r.meta().toa.as_ref().ok_or_else(|| {
        Error::InvalidRaster("manifest has no toa block with radiometric constants".into())
    })?;
    (0..r.bands())
        .map(|b| toa_reflectance(r.band(b), &ToaConstants::from_block(block, b)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixels: usize,
    pub rmse: f64,
    pub mae: f64,
    pub ssim: f64,
    /// `None` when the bands are identical.
    pub psnr_db: Option<f64>,
    /// `None` when undefined (identical bands or zero-mean reference).
    pub sre_db: Option<f64>,
    pub sam_deg: Option<f64>,
    pub tolerance: f64,
    pub tolerance_fraction: f64,
    pub patch_size: usize,
    pub variance_edges: Vec<f64>,
    pub variance_counts_ref: Vec<usize>,
    pub variance_counts_test: Vec<usize>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// All scalar metrics plus variance histograms on shared edges.
pub fn metrics_report(x: &[f64], y: &[f64], width: usize, tol: f64, d: usize) -> Result<MetricsReport> {
    check_pair(x, y)?;
    let vx = patch_variances(x, width, d)?;
    let vy = patch_variances(y, width, d)?;
    let hi = vx.iter().chain(&vy).cloned().fold(0.0, f64::max);
    let mut hx = Histogram::uniform(0.0, if hi > 0.0 { hi } else { 1.0 }, DEFAULT_BINS)?;
    let mut hy = hx.clone();
    vx.into_iter().for_each(|v| hx.add(v));
    vy.into_iter().for_each(|v| hy.add(v));
    Ok(MetricsReport {
        pixels: x.len(),
        rmse: rmse(x, y)?,
        mae: mae(x, y)?,
        ssim: ssim(x, y, width, PEAK)?,
        psnr_db: defined(psnr(x, y, PEAK))?,
        sre_db: defined(sre(x, y))?,
        sam_deg: defined(sam(x, y))?,
        tolerance: tol,
        tolerance_fraction: tolerance_fraction(x, y, tol)?,
        patch_size: d,
        variance_edges: hx.edges,
        variance_counts_ref: hx.counts,
        variance_counts_test: hy.counts,
    })
}

impl MetricsReport {
    /// Flat `key=value` lines; undefined metrics are written as `undefined`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "pixels={}", self.pixels);
        let _ = writeln!(s, "rmse={:.6}", self.rmse);
        let _ = writeln!(s, "mae={:.6}", self.mae);
        let _ = writeln!(s, "ssim={:.6}", self.ssim);
        let _ = writeln!(s, "psnr_db={}", opt(self.psnr_db));
        let _ = writeln!(s, "sre_db={}", opt(self.sre_db));
        let _ = writeln!(s, "sam_deg={}", opt(self.sam_deg));
        let _ = writeln!(s, "tolerance={}", self.tolerance);
        let _ = writeln!(s, "tolerance_fraction={:.6}", self.tolerance_fraction);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `bin_lo,bin_hi,count_ref,count_test` rows with a header.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count_ref,count_test\n");
        for i in 0..self.variance_counts_ref.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.variance_edges[i],
                self.variance_edges[i + 1],
                self.variance_counts_ref[i],
                self.variance_counts_test[i]
            );
        }
        s
    }
}

pub fn band_f64(band: &[u16]) -> Vec<f64> {
    band.iter().map(|&v| v as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Manifest;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..1024) as f64).collect()
    }

    #[test]
    fn rmse_mae_examples() {
        let x = random(50, 1);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        assert!((rmse(&x, &y).unwrap() - 5.0).abs() < 1e-12);
        let r = rmse(&[0.0, 0.0, 0.0], &[0.0, 3.0, 4.0]).unwrap();
        assert!((r - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((mae(&[0.0, 0.0, 0.0], &[0.0, 3.0, 4.0]).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = random(12 * 10, 2);
        assert!((ssim(&x, &x, 12, PEAK).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (300.0, 500.0);
        let c1 = (0.01 * PEAK).powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&[a; 100], &[b; 100], 10, PEAK).unwrap();
        assert!((got - expected).abs() < 1e-12);
        // anti-correlated zero-mean checkerboards
        let cb: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 400.0 } else { -400.0 }).collect();
        let neg: Vec<f64> = cb.iter().map(|v| -v).collect();
        assert!(ssim(&cb, &neg, 8, PEAK).unwrap() < 0.0);
        assert!(ssim(&[0.0; 49], &[0.0; 49], 7, PEAK).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = vec![0.0; 4];
        let y = vec![10.23; 4];
        assert!((psnr(&x, &y, PEAK).unwrap() - 40.0).abs() < 1e-10);
        assert!(psnr(&x, &[PEAK; 4], PEAK).unwrap().abs() < 1e-12);
        assert!(matches!(psnr(&x, &x, PEAK), Err(Error::Undefined(_))));
    }

    #[test]
    fn sre_examples() {
        let x = vec![200.0; 9];
        let y: Vec<f64> = x.iter().map(|v| v + 20.0).collect();
        assert!((sre(&x, &y).unwrap() - 20.0).abs() < 1e-10);
        let y: Vec<f64> = x.iter().map(|v| v + 200.0).collect();
        assert!(sre(&x, &y).unwrap().abs() < 1e-12);
        assert!(sre(&[-1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(sre(&x, &x).is_err());
    }

    #[test]
    fn sam_examples() {
        assert!(sam(&[3.0, 4.0], &[3.0, 4.0]).unwrap().abs() < 1e-6);
        assert!((sam(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        assert!((sam(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 45.0).abs() < 1e-12);
        assert!(sam(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        let x = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
        let y = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!((sam_multiband(&x, &y).unwrap() - 67.5).abs() < 1e-12);
    }

    #[test]
    fn tolerance_examples() {
        let x = random(40, 3);
        assert_eq!(tolerance_fraction(&x, &x, 5.0).unwrap(), 1.0);
        assert_eq!(tolerance_fraction(&x, &x, 0.0).unwrap(), 1.0);
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 10.0 } else { *v }).collect();
        assert_eq!(tolerance_fraction(&x, &y, 5.0).unwrap(), 0.5);
        let y: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        assert_eq!(tolerance_fraction(&x, &y, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn variance_histogram_examples() {
        let h = patch_variance_histogram(&[7.0; 64 * 64], 64, 32, 64).unwrap();
        assert_eq!(h.counts[0], h.total());
        assert_eq!(h.total(), 9);
        assert_eq!(patch_variances(&random(32 * 48, 4), 48, 32).unwrap().len(), 2);
        let h = patch_variance_histogram(&random(70 * 90, 5), 90, 32, 10).unwrap();
        assert_eq!(h.total(), build_grid(70, 90, 32).unwrap().len());
        assert_eq!(h.edges.len(), 11);
        assert!(patch_variances(&[0.0; 31 * 40], 40, 32).is_err());
    }

    #[test]
    fn spectral_sample_examples() {
        let r = Raster::new(Manifest::new(2, 1, &["G", "R"]), vec![100, 200, 5, 7]).unwrap();
        assert_eq!(spectral_response_sample(&r, &[(0, 1)], &[0, 1]).unwrap(), vec![200.0, 7.0]);
        assert_eq!(spectral_response_sample(&r, &[(0, 0), (0, 1)], &[0]).unwrap(), vec![150.0]);
        assert!(spectral_response_sample(&r, &[], &[0]).is_err());
        assert!(spectral_response_sample(&r, &[(1, 0)], &[0]).is_err());
    }

    #[test]
    fn toa_examples() {
        let c = ToaConstants {
            l_sat: 100.0,
            esun: std::f64::consts::PI * 100.0,
            sun_elevation_deg: 90.0,
            doy: 4,
        };
        assert_eq!(toa_reflectance(&[0], &c).unwrap(), vec![0.0]);
        let one = toa_reflectance_with_distance(&[1023], &c, 1.0).unwrap()[0];
        assert!((one - 1.0).abs() < 1e-12);
        assert!((earth_sun_distance(4) - 0.98328).abs() < 1e-12);
        let lin = toa_reflectance(&[100, 200, 300], &c).unwrap();
        assert!((lin[2] - lin[0] - 2.0 * (lin[1] - lin[0])).abs() < 1e-12);
        assert!(toa_reflectance(&[1], &ToaConstants { esun: 0.0, ..c }).is_err());

        let mut m = Manifest::new(1, 1, &["G", "R"]);
        let r = Raster::new(m.clone(), vec![1023, 0]).unwrap();
        assert!(toa_raster(&r).is_err());
        m.toa = Some(ToaBlock { l_sat: vec![100.0, 50.0], esun: vec![1000.0, 500.0], sun_elevation_deg: 30.0, doy: 4 });
        let r = Raster::new(m, vec![1023, 0]).unwrap();
        let t = toa_raster(&r).unwrap();
        let expected = std::f64::consts::PI * 100.0 * 0.98328f64.powi(2) / (1000.0 * 0.5);
        assert!((t[0][0] - expected).abs() < 1e-12);
        assert_eq!(t[1][0], 0.0);
    }

    #[test]
    fn report_examples() {
        let x = random(40 * 40, 6);
        let r = metrics_report(&x, &x, 40, 5.0, 32).unwrap();
        assert_eq!((r.rmse, r.sam_deg.map(|v| v < 1e-6), r.tolerance_fraction), (0.0, Some(true), 1.0));
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr_db, None);
        let y: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        let r = metrics_report(&x, &y, 40, 5.0, 32).unwrap();
        assert!((r.rmse - 5.0).abs() < 1e-12);
        assert_eq!(r.tolerance_fraction, 1.0);
        assert!((r.psnr_db.unwrap() - 20.0 * (PEAK / r.rmse).log10()).abs() < 1e-12);
        assert_eq!(r.variance_counts_ref, r.variance_counts_test);
        assert!(r.to_text().contains("psnr_db="));
        assert_eq!(r.histogram_csv().lines().count(), DEFAULT_BINS + 1);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metric_invariants(
                x in proptest::collection::vec(1.0f64..1023.0, 64..=64),
                noise in proptest::collection::vec(-50.0f64..50.0, 64..=64),
                alpha in 0.1f64..10.0,
                t1 in 0.0f64..20.0,
                t2 in 0.0f64..20.0,
            ) {
                let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + n).collect();
                prop_assert!(rmse(&x, &y).unwrap() + 1e-12 >= mae(&x, &y).unwrap());
                prop_assert_eq!(rmse(&x, &x).unwrap(), 0.0);
                prop_assert!(sam(&x, &x).unwrap() < 1e-5);
                let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
                prop_assert!(sam(&x, &scaled).unwrap() < 1e-5);
                let s = ssim(&x, &y, 8, PEAK).unwrap();
                prop_assert!((-1.0..=1.0).contains(&s));
                if let Ok(p) = psnr(&x, &y, PEAK) {
                    prop_assert!((p - 20.0 * (PEAK / rmse(&x, &y).unwrap()).log10()).abs() < 1e-10);
                }
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                prop_assert!(tolerance_fraction(&x, &y, lo).unwrap() <= tolerance_fraction(&x, &y, hi).unwrap());
            }
        }
    }
}
