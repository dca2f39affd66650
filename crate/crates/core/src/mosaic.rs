//! Tiled inference: overlapping patch grids, feathered stitching and a
//! bicubic baseline upsampler.
//!
//! Patches of size `d` are taken at anchors `0, d/2, d, …` along each axis,
//! the last anchor clamped to the tile edge. Adjacent patches are blended
//! over the `d/2` columns where the left patch's second half lies, the left
//! patch weighted by `ω[k]` and the right by `1 − ω[k]`. Horizontal strips are
//! assembled first and then blended vertically with the same rule. Columns
//! (rows) beyond the blend window of a clamped final patch come from that
//! patch alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PatchPredictor;
use crate::raster::{to_dn, Manifest, Raster};
use crate::trainer::crop_bands;

pub const SYNTH_BAND_NAME: &str = "SWIR_synth";

/// Patch anchors over an `height × width` tile, row-major patch order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

fn axis_anchors(n: usize, d: usize, stride: usize) -> Vec<usize> {
    let mut a: Vec<usize> = (0..).map(|i| i * stride).take_while(|&x| x + d < n).collect();
    if a.last() != Some(&(n - d)) {
        a.push(n - d);
    }
    a
}

impl PatchGrid {
    /// Grid with arbitrary anchors, checked for ordering, bounds and a maximum
    /// gap of `max_gap` between consecutive anchors.
    pub fn with_anchors(
        height: usize,
        width: usize,
        d: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
        max_gap: usize,
    ) -> Result<Self> {
        if d == 0 || height < d || width < d {
            return Err(Error::InvalidArgument(format!(
                "tile {height}×{width} is smaller than patch size {d}"
            )));
        }
        for (axis, a, n) in [("row", &rows, height), ("column", &cols, width)] {
            if a.first() != Some(&0) || a.last() != Some(&(n - d)) {
                return Err(Error::InvalidArgument(format!(
                    "{axis} anchors must start at 0 and end at {}",
                    n - d
                )));
            }
            for w in a.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::InvalidArgument(format!(
                        "{axis} anchors must be strictly increasing"
                    )));
                }
                if w[1] - w[0] > max_gap {
                    return Err(Error::InvalidArgument(format!(
                        "{axis} anchors {} and {} leave a gap larger than {max_gap}",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(Self {
            d,
            height,
            width,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` anchors in row-major order.
    pub fn anchors(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }
}

/// Half-overlapping grid: stride `d/2`, last anchor clamped, duplicates
/// collapsed.
pub fn build_grid(height: usize, width: usize, d: usize) -> Result<PatchGrid> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("patch size must be even, got {d}")));
    }
    if height < d || width < d {
        return Err(Error::InvalidArgument(format!(
            "tile {height}×{width} is smaller than patch size {d}"
        )));
    }
    Ok(PatchGrid {
        d,
        height,
        width,
        rows: axis_anchors(height, d, d / 2),
        cols: axis_anchors(width, d, d / 2),
    })
}

/// Grid with stride `d`; only the clamped final patch overlaps its
/// neighbour.
pub fn naive_grid(height: usize, width: usize, d: usize) -> Result<PatchGrid> {
    if d == 0 || height < d || width < d {
        return Err(Error::InvalidArgument(format!(
            "tile {height}×{width} is smaller than patch size {d}"
        )));
    }
    Ok(PatchGrid {
        d,
        height,
        width,
        rows: axis_anchors(height, d, d),
        cols: axis_anchors(width, d, d),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightProfile {
    #[default]
    Gaussian,
    Linear,
    Sigmoid,
}

/// Weights `ω[k]`, `k = 0..d/2`, given to the left (upper) patch across an
/// overlap; the right (lower) patch receives `1 − ω[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatherWeights {
    pub omega: Vec<f64>,
}

impl FeatherWeights {
    pub fn new(profile: WeightProfile, d: usize) -> Result<Self> {
        match profile {
            WeightProfile::Gaussian => gaussian_weights(d),
            WeightProfile::Linear => linear_weights(d),
            WeightProfile::Sigmoid => sigmoid_weights(d),
        }
    }

    pub fn complement(&self) -> Vec<f64> {
        self.omega.iter().map(|w| 1.0 - w).collect()
    }

    pub fn overlap(&self) -> usize {
        self.omega.len()
    }
}

fn check_even(d: usize) -> Result<usize> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("patch size must be even and ≥ 2, got {d}")));
    }
    Ok(d / 2)
}

/// `ω[k] = exp(−k² / (2σ²))` with `σ = d/4`.
pub fn gaussian_weights(d: usize) -> Result<FeatherWeights> {
    gaussian_weights_sigma(d, d as f64 / 4.0)
}

pub fn gaussian_weights_sigma(d: usize, sigma: f64) -> Result<FeatherWeights> {
    let half = check_even(d)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let omega = (0..half)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    Ok(FeatherWeights { omega })
}

/// `ω[k] = 1 − k/(d/2)`.
pub fn linear_weights(d: usize) -> Result<FeatherWeights> {
    let half = check_even(d)?;
    let omega = (0..half).map(|k| 1.0 - k as f64 / half as f64).collect();
    Ok(FeatherWeights { omega })
}

/// Logistic fall-off centred at `d/4` with scale `d/16`, normalized so that
/// `ω[0] = 1`.
pub fn sigmoid_weights(d: usize) -> Result<FeatherWeights> {
    let half = check_even(d)?;
    let (c, s) = (d as f64 / 4.0, d as f64 / 16.0);
    let f = |k: f64| 1.0 / (1.0 + ((k - c) / s).exp());
    let omega = (0..half).map(|k| f(k as f64) / f(0.0)).collect();
    Ok(FeatherWeights { omega })
}

/// Blends two horizontally adjacent `d×d` patches (row-major, one band) that
/// overlap by `d/2` columns into a `d × 3d/2` block.
pub fn feather_pair(left: &[f64], right: &[f64], d: usize, weights: &FeatherWeights) -> Result<Vec<f64>> {
    let half = check_even(d)?;
    if left.len() != d * d || right.len() != d * d || weights.overlap() != half {
        return Err(Error::Shape(format!(
            "feather_pair needs two {d}×{d} patches and {half} weights"
        )));
    }
    let w = d + half;
    let mut out = vec![0.0; d * w];
    for y in 0..d {
        let row = &mut out[y * w..(y + 1) * w];
        row[..half].copy_from_slice(&left[y * d..y * d + half]);
        for k in 0..half {
            let om = weights.omega[k];
            row[half + k] = left[y * d + half + k] * om + right[y * d + k] * (1.0 - om);
        }
        row[d..].copy_from_slice(&right[y * d + half..(y + 1) * d]);
    }
    Ok(out)
}

/// Blends 1-D segments placed at `anchors` into a line of length `n`.
/// `get(i, j)` returns element `j` of segment `i`, `set(x, v)` writes output
/// position `x`.
fn blend_axis(
    anchors: &[usize],
    d: usize,
    omega: &[f64],
    get: impl Fn(usize, usize) -> f64,
    mut set: impl FnMut(usize, f64),
) {
    let half = d / 2;
    for j in 0..d {
        set(anchors[0] + j, get(0, j));
    }
    for i in 1..anchors.len() {
        let (prev, cur) = (anchors[i - 1], anchors[i]);
        let start = prev + half;
        for k in 0..half {
            let x = start + k;
            let v = get(i - 1, x - prev) * omega[k] + get(i, x - cur) * (1.0 - omega[k]);
            set(x, v);
        }
        for x in prev + d..cur + d {
            set(x, get(i, x - cur));
        }
    }
}

fn check_patches(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<()> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    if let Some(p) = patches.iter().find(|p| p.len() != grid.d * grid.d) {
        return Err(Error::Shape(format!(
            "patch of {} values, expected {}×{}",
            p.len(),
            grid.d,
            grid.d
        )));
    }
    Ok(())
}

/// Feathered reassembly before rounding. `patches` are `d×d` row-major in
/// the grid's row-major order.
pub fn stitch_f64(patches: &[Vec<f64>], grid: &PatchGrid, weights: &FeatherWeights) -> Result<Vec<f64>> {
    check_patches(patches, grid)?;
    let d = grid.d;
    let half = check_even(d)?;
    if weights.overlap() != half {
        return Err(Error::Shape(format!("{} weights for overlap {half}", weights.overlap())));
    }
    for a in [&grid.rows, &grid.cols] {
        if a.windows(2).any(|w| w[1] - w[0] > half) {
            return Err(Error::InvalidArgument(format!(
                "anchor gap exceeds the {half}-pixel overlap"
            )));
        }
    }
    let (w, nc) = (grid.width, grid.cols.len());
    let strips: Vec<Vec<f64>> = (0..grid.rows.len())
        .map(|r| {
            let mut strip = vec![0.0; d * w];
            for y in 0..d {
                blend_axis(
                    &grid.cols,
                    d,
                    &weights.omega,
                    |i, j| patches[r * nc + i][y * d + j],
                    |x, v| strip[y * w + x] = v,
                );
            }
            strip
        })
        .collect();

    let mut out = vec![0.0; grid.height * w];
    for x in 0..w {
        blend_axis(
            &grid.rows,
            d,
            &weights.omega,
            |i, j| strips[i][j * w + x],
            |y, v| out[y * w + x] = v,
        );
    }
    Ok(out)
}

pub fn quantize(values: &[f64]) -> Vec<u16> {
    values.iter().map(|&v| to_dn(v)).collect()
}

/// Feathered reassembly, clamped to `[0, 1023]` and rounded half-to-even.
pub fn stitch(patches: &[Vec<f64>], grid: &PatchGrid, weights: &FeatherWeights) -> Result<Vec<u16>> {
    Ok(quantize(&stitch_f64(patches, grid, weights)?))
}

/// Places patches without blending, later patches overwriting earlier ones.
pub fn naive_stitch_f64(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<Vec<f64>> {
    check_patches(patches, grid)?;
    let d = grid.d;
    for a in [&grid.rows, &grid.cols] {
        if a.windows(2).any(|w| w[1] - w[0] > d) {
            return Err(Error::InvalidArgument("patch grid leaves uncovered pixels".into()));
        }
    }
    let w = grid.width;
    let mut out = vec![0.0; grid.height * w];
    for (p, (r, c)) in patches.iter().zip(grid.anchors()) {
        for y in 0..d {
            out[(r + y) * w + c..][..d].copy_from_slice(&p[y * d..(y + 1) * d]);
        }
    }
    Ok(out)
}

pub fn naive_stitch(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<Vec<u16>> {
    Ok(quantize(&naive_stitch_f64(patches, grid)?))
}

/// Patch reassembly used by [`synthesize_tile`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StitchMode {
    #[default]
    Gaussian,
    Linear,
    Sigmoid,
    Naive,
}

impl std::str::FromStr for StitchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "linear" => Ok(Self::Linear),
            "sigmoid" => Ok(Self::Sigmoid),
            "naive" => Ok(Self::Naive),
            _ => Err(Error::InvalidArgument(format!(
                "unknown stitch mode {s:?}, expected gaussian, linear, sigmoid or naive"
            ))),
        }
    }
}

/// Cuts `tile` into grid patches and predicts each one. Work is split into
/// contiguous chunks over `threads` workers; results keep grid order.
pub fn predict_grid(
    predictor: &impl PatchPredictor,
    tile: &Raster,
    grid: &PatchGrid,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let anchors: Vec<(usize, usize)> = grid.anchors().collect();
    let d = grid.d;
    let run = |part: &[(usize, usize)]| -> Result<Vec<Vec<f64>>> {
        part.iter()
            .map(|&(r, c)| {
                let x = crop_bands(tile, &[0, 1, 2], r, c, d);
                let y = predictor.predict(&x)?;
                if y.shape() != [d, d, 1] {
                    return Err(Error::Shape(format!(
                        "predictor returned {:?}, expected [{d}, {d}, 1]",
                        y.shape()
                    )));
                }
                Ok(y.data().iter().map(|&v| v as f64).collect())
            })
            .collect()
    };
    if threads <= 1 || anchors.len() < 2 {
        return run(&anchors);
    }
    let chunk = anchors.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = anchors.chunks(chunk).map(|part| s.spawn(move || run(part))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(anchors.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Synthesizes the target band over a `(G, R, NIR)` tile of any size ≥ `d`.
pub fn synthesize_tile(
    predictor: &impl PatchPredictor,
    tile: &Raster,
    d: usize,
    mode: StitchMode,
    threads: usize,
) -> Result<Raster> {
    if tile.bands() != 3 {
        return Err(Error::InvalidRaster(format!(
            "synthesis needs 3 bands (G, R, NIR), got {}",
            tile.bands()
        )));
    }
    let (h, w) = (tile.height(), tile.width());
    let band = match mode {
        StitchMode::Naive => {
            let grid = naive_grid(h, w, d)?;
            naive_stitch(&predict_grid(predictor, tile, &grid, threads)?, &grid)?
        }
        _ => {
            let profile = match mode {
                StitchMode::Linear => WeightProfile::Linear,
                StitchMode::Sigmoid => WeightProfile::Sigmoid,
                _ => WeightProfile::Gaussian,
            };
            let grid = build_grid(h, w, d)?;
            let weights = FeatherWeights::new(profile, d)?;
            stitch(&predict_grid(predictor, tile, &grid, threads)?, &grid, &weights)?
        }
    };
    Raster::new(Manifest::new(w, h, &[SYNTH_BAND_NAME]), band)
}

/// Catmull-Rom cubic kernel (`a = −0.5`).
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Taps and weights for output coordinate `o` at scale `s` over `n` inputs,
/// pixel centres aligned and edges clamped.
fn cubic_taps(o: usize, s: usize, n: usize) -> [(usize, f64); 4] {
    let src = (o as f64 + 0.5) / s as f64 - 0.5;
    let base = src.floor();
    let frac = src - base;
    std::array::from_fn(|i| {
        let off = i as isize - 1;
        let idx = (base as isize + off).clamp(0, n as isize - 1) as usize;
        (idx, cubic(frac - off as f64))
    })
}

/// Bicubic upsampling of one band by an integer factor, rounded to DN.
pub fn upsample_bicubic(band: &[u16], width: usize, height: usize, s: usize) -> Result<Vec<u16>> {
    if s == 0 || band.len() != width * height || band.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "bicubic upsampling needs s ≥ 1 and a {height}×{width} band"
        )));
    }
    let (ow, oh) = (width * s, height * s);
    let xt: Vec<_> = (0..ow).map(|x| cubic_taps(x, s, width)).collect();
    let mut rows = vec![0.0f64; height * ow];
    for y in 0..height {
        for (x, taps) in xt.iter().enumerate() {
            rows[y * ow + x] = taps.iter().map(|&(i, w)| w * band[y * width + i] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let taps = cubic_taps(y, s, height);
        for x in 0..ow {
            out.push(to_dn(taps.iter().map(|&(i, w)| w * rows[i * ow + x]).sum()));
        }
    }
    Ok(out)
}
