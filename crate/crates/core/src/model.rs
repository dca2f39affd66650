//! The band-synthesis network.
//!
//! ```text
//!            ┌──────── sfe 3×3 ──► [resblock]×N ──► lff 3×3 ─────┐
//!  G,R,NIR ──┤                                                    (+)──► SWIR
//!            └──────── grfe 1×1 ──────────────────────────────────┘
//! ```
//!
//! A residual block computes `F + s·conv2(relu(conv1(F)))` with no activation
//! on its output. No activation follows the shallow extractor, the fusion
//! convolution or the 1×1 global path either.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{to_dn, MAX_DN};
use crate::tensor::{self, Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_res_blocks: usize,
    pub feature_size: usize,
    pub kernel: usize,
    pub in_bands: usize,
    pub out_bands: usize,
    pub residual_scaling: f64,
    pub init_seed: u64,
    /// Divide inputs by the DN peak and rescale the output by it.
    #[serde(default)]
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_res_blocks: 24,
            feature_size: 128,
            kernel: 3,
            in_bands: 3,
            out_bands: 1,
            residual_scaling: 0.1,
            init_seed: 0,
            normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn new(num_res_blocks: usize, feature_size: usize) -> Self {
        Self {
            num_res_blocks,
            feature_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be at least 1");
        }
        if self.feature_size == 0 {
            return bad("feature_size must be at least 1");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.in_bands == 0 || self.out_bands == 0 {
            return bad("band counts must be positive");
        }
        if !(self.residual_scaling > 0.0 && self.residual_scaling <= 1.0) {
            return bad("residual_scaling must lie in (0, 1]");
        }
        Ok(())
    }

    /// Convolution layers in the network: one shallow extractor, two per
    /// residual block, one fusion layer and one global 1×1 layer.
    pub fn layer_count(&self) -> usize {
        2 * self.num_res_blocks + 3
    }
}

/// Number of trainable scalars for `cfg`, biases included.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let k2 = cfg.kernel * cfg.kernel;
    let c = cfg.feature_size;
    let sfe = k2 * cfg.in_bands * c + c;
    let block = 2 * (k2 * c * c + c);
    let lff = k2 * c * cfg.out_bands + cfg.out_bands;
    let grfe = cfg.in_bands * cfg.out_bands + cfg.out_bands;
    sfe + cfg.num_res_blocks * block + lff + grfe
}

/// Shapes of every parameter tensor, in store order.
fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (k, c) = (cfg.kernel, cfg.feature_size);
    let mut shapes = vec![vec![k, k, cfg.in_bands, c], vec![c]];
    for _ in 0..cfg.num_res_blocks {
        for _ in 0..2 {
            shapes.push(vec![k, k, c, c]);
            shapes.push(vec![c]);
        }
    }
    shapes.push(vec![k, k, c, cfg.out_bands]);
    shapes.push(vec![cfg.out_bands]);
    shapes.push(vec![1, 1, cfg.in_bands, cfg.out_bands]);
    shapes.push(vec![cfg.out_bands]);
    shapes
}

/// Named layers, for addressing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Sfe,
    /// `conv` is 0 or 1 within block `block`.
    Block { block: usize, conv: usize },
    Lff,
    Grfe,
}

/// The network with its parameters.
///
/// Parameter order (which is also the checkpoint order): sfe kernel, sfe
/// bias, then per block conv1 kernel, conv1 bias, conv2 kernel, conv2 bias,
/// then lff kernel, lff bias, grfe kernel, grfe bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSwirModel<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

/// Builds the network with deterministic He fan-in initialization and zero
/// biases. The local-feature-fusion kernel starts at zero, so an untrained
/// network equals its global 1×1 path.
pub fn build_model(cfg: &ModelConfig) -> Result<DeepSwirModel<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut params = ParamStore::new();
    let (k, c) = (cfg.kernel, cfg.feature_size);

    let mut conv = |params: &mut ParamStore<f32>, name: &str, kh: usize, cin: usize, cout: usize| {
        let fan_in = (kh * kh * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = kh * kh * cin * cout;
        let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        params.push(
            format!("{name}.kernel"),
            Tensor::from_parts(vec![kh, kh, cin, cout], w),
        );
        params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
    };

    conv(&mut params, "sfe", k, cfg.in_bands, c);
    for n in 0..cfg.num_res_blocks {
        conv(&mut params, &format!("block{n}.conv1"), k, c, c);
        conv(&mut params, &format!("block{n}.conv2"), k, c, c);
    }
    conv(&mut params, "lff", k, c, cfg.out_bands);
    conv(&mut params, "grfe", 1, cfg.in_bands, cfg.out_bands);
    let lff = params.len() - 4;
    params.get_mut(ParamId(lff)).value.fill_zero();

    debug_assert_eq!(params.num_scalars(), count_parameters(cfg));
    Ok(DeepSwirModel {
        config: cfg.clone(),
        params,
    })
}

impl<T: Element> DeepSwirModel<T> {
    /// Wraps an existing parameter store, checking it against the layout
    /// implied by `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(&cfg);
        if params.len() != shapes.len()
            || params
                .iter()
                .zip(&shapes)
                .any(|(p, s)| p.value.shape() != s.as_slice())
        {
            return Err(Error::Shape(
                "parameter store does not match the model configuration".into(),
            ));
        }
        Ok(Self { config: cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> DeepSwirModel<U> {
        DeepSwirModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count()
    }

    pub fn kernel_id(&self, layer: Layer) -> ParamId {
        ParamId(2 * self.layer_index(layer))
    }

    pub fn bias_id(&self, layer: Layer) -> ParamId {
        ParamId(2 * self.layer_index(layer) + 1)
    }

    fn layer_index(&self, layer: Layer) -> usize {
        let n = self.config.num_res_blocks;
        match layer {
            Layer::Sfe => 0,
            Layer::Block { block, conv } => {
                assert!(block < n && conv < 2, "no such block layer");
                1 + 2 * block + conv
            }
            Layer::Lff => 1 + 2 * n,
            Layer::Grfe => 2 + 2 * n,
        }
    }

    fn kb(&self, layer: Layer) -> (&Tensor<T>, &Tensor<T>) {
        (
            &self.params.get(self.kernel_id(layer)).value,
            &self.params.get(self.bias_id(layer)).value,
        )
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            &[h, w, c] if c == self.config.in_bands => {
                if h < self.config.kernel || w < self.config.kernel {
                    return Err(Error::Shape(format!(
                        "input {h}×{w} is smaller than the {k}×{k} kernel",
                        k = self.config.kernel
                    )));
                }
                Ok(())
            }
            s => Err(Error::Shape(format!(
                "model expects H×W×{} input, got {s:?}",
                self.config.in_bands
            ))),
        }
    }

    /// Evaluates the network on an `H×W×3` tensor of DN values and returns an
    /// `H×W×1` tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let peak = T::from_f64(MAX_DN as f64);
        let normalized;
        let x = if self.config.normalize {
            normalized = tensor::scale(x, T::one() / peak);
            &normalized
        } else {
            x
        };
        let s = T::from_f64(self.config.residual_scaling);

        let (k, b) = self.kb(Layer::Sfe);
        let mut feat = tensor::conv2d(x, k, b)?;
        for block in 0..self.config.num_res_blocks {
            let (k1, b1) = self.kb(Layer::Block { block, conv: 0 });
            let (k2, b2) = self.kb(Layer::Block { block, conv: 1 });
            let inner = tensor::relu(&tensor::conv2d(&feat, k1, b1)?);
            let local = tensor::conv2d(&inner, k2, b2)?;
            for (f, l) in feat.data_mut().iter_mut().zip(local.data()) {
                *f = *f + s * *l;
            }
        }
        let (k, b) = self.kb(Layer::Lff);
        let mut out = tensor::conv2d(&feat, k, b)?;
        let (k, b) = self.kb(Layer::Grfe);
        let global = tensor::conv2d(x, k, b)?;
        out.add_assign(&global);
        if self.config.normalize {
            out = tensor::scale(&out, peak);
        }
        Ok(out)
    }

    /// Records the forward pass on `tape`, which must have been created with
    /// [`Tape::with_params`] over this model's parameters.
    pub fn forward_tape(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x)?)?;
        let peak = T::from_f64(MAX_DN as f64);
        let x = if self.config.normalize {
            tape.scale(x, T::one() / peak)?
        } else {
            x
        };
        let s = T::from_f64(self.config.residual_scaling);

        let conv = |tape: &mut Tape<'_, T>, input: Var, layer: Layer| -> Result<Var> {
            let k = tape.param(self.kernel_id(layer))?;
            let b = tape.param(self.bias_id(layer))?;
            tape.conv2d(input, k, b)
        };

        let mut feat = conv(tape, x, Layer::Sfe)?;
        for block in 0..self.config.num_res_blocks {
            let h = conv(tape, feat, Layer::Block { block, conv: 0 })?;
            let h = tape.relu(h)?;
            let h = conv(tape, h, Layer::Block { block, conv: 1 })?;
            let h = tape.scale(h, s)?;
            feat = tape.add(feat, h)?;
        }
        let local = conv(tape, feat, Layer::Lff)?;
        let global = conv(tape, x, Layer::Grfe)?;
        let out = tape.add(global, local)?;
        if self.config.normalize {
            tape.scale(out, peak)
        } else {
            Ok(out)
        }
    }
}

impl DeepSwirModel<f32> {
    /// Forward pass clamped to the DN range and rounded half-to-even.
    pub fn predict_patch(&self, patch: &Tensor<f32>) -> Result<Vec<u16>> {
        Ok(self
            .forward(patch)?
            .data()
            .iter()
            .map(|&v| to_dn(v as f64))
            .collect())
    }
}

/// Anything that maps an `H×W×3` DN patch to an `H×W×1` prediction.
pub trait PatchPredictor: Sync {
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for DeepSwirModel<f32> {
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(patch)
    }
}

impl<F> PatchPredictor for F
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(patch)
    }
}
