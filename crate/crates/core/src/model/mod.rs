//! A small from-scratch patch-based transformer classifier with named
//! activation hook sites, activation patching, and hand-written exact
//! gradients. All math in f64; checkpoints store f32 per the container
//! format.

mod backward;
mod forward;

pub use backward::{grad_wrt_site, loss_and_grads, Grads};
pub use forward::{softmax, ActivationTrace, ForwardCache};

use crate::checkpoint::{self, NamedTensor, TensorData};
use crate::error::{Result, XeditError};
use crate::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            d_mlp: 128,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(XeditError::InvalidConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(XeditError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.channels == 0
            || self.n_layers == 0
            || self.d_mlp == 0
            || self.n_classes == 0
        {
            return Err(XeditError::InvalidConfig(
                "channels, n_layers, d_mlp and n_classes must be nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Patch tokens plus the CLS token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Activation hook locations within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Post-layer-norm input to fc1.
    MlpIn,
    /// Post-GELU input to fc2.
    MlpHidden,
    /// fc2 output before the residual add.
    MlpOut,
    /// Residual stream after the block.
    BlockOut,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Site::MlpIn => "mlp_in",
            Site::MlpHidden => "mlp_hidden",
            Site::MlpOut => "mlp_out",
            Site::BlockOut => "block_out",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSel {
    All,
    ClsOnly,
}

/// A named hook site: block index, location, and token selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub site: Site,
    pub tokens: TokenSel,
}

impl HookSite {
    pub fn all(layer: usize, site: Site) -> Self {
        HookSite {
            layer,
            site,
            tokens: TokenSel::All,
        }
    }

    pub fn cls(layer: usize, site: Site) -> Self {
        HookSite {
            layer,
            site,
            tokens: TokenSel::ClsOnly,
        }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sel = match self.tokens {
            TokenSel::All => "all",
            TokenSel::ClsOnly => "cls",
        };
        write!(f, "blocks.{}.{} ({sel})", self.layer, self.site)
    }
}

// Tensor index layout. Parameters live in one Vec<Matrix> so that the
// optimizer, checkpoints and finite differences all see a uniform list.
const T_PATCH_W: usize = 0;
const T_PATCH_B: usize = 1;
const T_CLS: usize = 2;
const T_POS: usize = 3;
const BLOCK_BASE: usize = 4;
const BLOCK_TENSORS: usize = 12;

const B_LN1_G: usize = 0;
const B_LN1_B: usize = 1;
const B_WQ: usize = 2;
const B_WK: usize = 3;
const B_WV: usize = 4;
const B_WO: usize = 5;
const B_LN2_G: usize = 6;
const B_LN2_B: usize = 7;
const B_FC1_W: usize = 8;
const B_FC1_B: usize = 9;
const B_FC2_W: usize = 10;
const B_FC2_B: usize = 11;

pub const LN_EPS: f64 = 1e-5;

/// The classifier. Parameters are indexed matrices; named accessors below.
#[derive(Debug, Clone)]
pub struct TinyViT {
    pub config: ModelConfig,
    tensors: Vec<Matrix>,
}

fn xavier(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

fn small_uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.02..0.02)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

fn ones(rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).expect("finite init")
}

/// Deterministic initialization from the config seed: scaled uniform for
/// projections, zeros for biases, ones/zeros for layer norms.
pub fn init_model(config: &ModelConfig) -> Result<TinyViT> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let pd = config.patch_dim();
    let t = config.n_tokens();

    let mut tensors = Vec::with_capacity(tensor_count(config));
    tensors.push(xavier(&mut rng, d, pd, pd, d)); // patch_embed.weight
    tensors.push(Matrix::zeros(1, d)); // patch_embed.bias
    tensors.push(small_uniform(&mut rng, 1, d)); // cls_token
    tensors.push(small_uniform(&mut rng, t, d)); // pos_embed
    for _ in 0..config.n_layers {
        tensors.push(ones(1, d)); // ln1.gamma
        tensors.push(Matrix::zeros(1, d)); // ln1.beta
        tensors.push(xavier(&mut rng, d, d, d, d)); // wq
        tensors.push(xavier(&mut rng, d, d, d, d)); // wk
        tensors.push(xavier(&mut rng, d, d, d, d)); // wv
        tensors.push(xavier(&mut rng, d, d, d, d)); // wo
        tensors.push(ones(1, d)); // ln2.gamma
        tensors.push(Matrix::zeros(1, d)); // ln2.beta
        tensors.push(xavier(&mut rng, config.d_mlp, d, d, config.d_mlp)); // fc1.weight
        tensors.push(Matrix::zeros(1, config.d_mlp)); // fc1.bias
        tensors.push(xavier(&mut rng, d, config.d_mlp, config.d_mlp, d)); // fc2.weight
        tensors.push(Matrix::zeros(1, d)); // fc2.bias
    }
    tensors.push(ones(1, d)); // ln_f.gamma
    tensors.push(Matrix::zeros(1, d)); // ln_f.beta
    tensors.push(xavier(&mut rng, config.n_classes, d, d, config.n_classes)); // head.weight
    tensors.push(Matrix::zeros(1, config.n_classes)); // head.bias

    Ok(TinyViT {
        config: *config,
        tensors,
    })
}

fn tensor_count(config: &ModelConfig) -> usize {
    BLOCK_BASE + config.n_layers * BLOCK_TENSORS + 4
}

/// Names in tensor-index order, shared by the checkpoint format.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "patch_embed.weight".to_string(),
        "patch_embed.bias".to_string(),
        "cls_token".to_string(),
        "pos_embed".to_string(),
    ];
    for b in 0..config.n_layers {
        for part in [
            "ln1.gamma",
            "ln1.beta",
            "attn.wq",
            "attn.wk",
            "attn.wv",
            "attn.wo",
            "ln2.gamma",
            "ln2.beta",
            "mlp.fc1.weight",
            "mlp.fc1.bias",
            "mlp.fc2.weight",
            "mlp.fc2.bias",
        ] {
            names.push(format!("blocks.{b}.{part}"));
        }
    }
    names.push("ln_f.gamma".to_string());
    names.push("ln_f.beta".to_string());
    names.push("head.weight".to_string());
    names.push("head.bias".to_string());
    names
}

impl TinyViT {
    #[inline]
    pub(crate) fn t(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    fn block(&self, layer: usize, part: usize) -> &Matrix {
        &self.tensors[BLOCK_BASE + layer * BLOCK_TENSORS + part]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub(crate) fn patch_w(&self) -> &Matrix {
        self.t(T_PATCH_W)
    }
    pub(crate) fn patch_b(&self) -> &Matrix {
        self.t(T_PATCH_B)
    }
    pub(crate) fn cls_token(&self) -> &Matrix {
        self.t(T_CLS)
    }
    pub(crate) fn pos_embed(&self) -> &Matrix {
        self.t(T_POS)
    }
    pub(crate) fn ln1_gamma(&self, l: usize) -> &Matrix {
        self.block(l, B_LN1_G)
    }
    pub(crate) fn ln1_beta(&self, l: usize) -> &Matrix {
        self.block(l, B_LN1_B)
    }
    pub(crate) fn wq(&self, l: usize) -> &Matrix {
        self.block(l, B_WQ)
    }
    pub(crate) fn wk(&self, l: usize) -> &Matrix {
        self.block(l, B_WK)
    }
    pub(crate) fn wv(&self, l: usize) -> &Matrix {
        self.block(l, B_WV)
    }
    pub(crate) fn wo(&self, l: usize) -> &Matrix {
        self.block(l, B_WO)
    }
    pub(crate) fn ln2_gamma(&self, l: usize) -> &Matrix {
        self.block(l, B_LN2_G)
    }
    pub(crate) fn ln2_beta(&self, l: usize) -> &Matrix {
        self.block(l, B_LN2_B)
    }
    pub fn fc1_weight(&self, l: usize) -> &Matrix {
        self.block(l, B_FC1_W)
    }
    pub fn fc1_bias(&self, l: usize) -> &Matrix {
        self.block(l, B_FC1_B)
    }
    pub fn fc2_weight(&self, l: usize) -> &Matrix {
        self.block(l, B_FC2_W)
    }
    pub fn fc2_bias(&self, l: usize) -> &Matrix {
        self.block(l, B_FC2_B)
    }
    pub(crate) fn ln_f_gamma(&self) -> &Matrix {
        &self.tensors[self.tensors.len() - 4]
    }
    pub(crate) fn ln_f_beta(&self) -> &Matrix {
        &self.tensors[self.tensors.len() - 3]
    }
    pub(crate) fn head_w(&self) -> &Matrix {
        &self.tensors[self.tensors.len() - 2]
    }
    pub(crate) fn head_b(&self) -> &Matrix {
        &self.tensors[self.tensors.len() - 1]
    }

    pub fn fc1_weight_index(&self, l: usize) -> usize {
        BLOCK_BASE + l * BLOCK_TENSORS + B_FC1_W
    }

    pub fn fc2_weight_index(&self, l: usize) -> usize {
        BLOCK_BASE + l * BLOCK_TENSORS + B_FC2_W
    }

    /// Class prediction: argmax of softmax probabilities, ties broken by
    /// lowest class index.
    pub fn predict(&self, image: &[u8]) -> Result<(usize, Vec<f64>)> {
        let (logits, _) = self.forward(image, &[], &std::collections::HashMap::new())?;
        let probs = softmax(&logits);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names = tensor_names(&self.config);
        let tensors: Vec<NamedTensor> = names
            .into_iter()
            .zip(&self.tensors)
            .map(|(name, m)| NamedTensor {
                name,
                shape: vec![m.rows(), m.cols()],
                data: TensorData::F32(m.data().iter().map(|&x| x as f32).collect()),
            })
            .collect();
        let config = serde_json::to_value(self.config)?;
        checkpoint::save_container(path, &config, &tensors)
    }

    pub fn load(path: &Path) -> Result<TinyViT> {
        let (config_value, tensors) = checkpoint::load_container(path)?;
        let config: ModelConfig = serde_json::from_value(config_value)?;
        config.validate()?;
        let names = tensor_names(&config);
        if tensors.len() != names.len() {
            return Err(XeditError::CorruptFile {
                path: path.display().to_string(),
                detail: format!(
                    "expected {} tensors, found {}",
                    names.len(),
                    tensors.len()
                ),
            });
        }
        let mut mats = Vec::with_capacity(tensors.len());
        for (expect, t) in names.iter().zip(tensors) {
            if &t.name != expect {
                return Err(XeditError::CorruptFile {
                    path: path.display().to_string(),
                    detail: format!("tensor {} where {} expected", t.name, expect),
                });
            }
            if t.shape.len() != 2 {
                return Err(XeditError::CorruptFile {
                    path: path.display().to_string(),
                    detail: format!("tensor {} is not 2-D", t.name),
                });
            }
            let data: Vec<f64> = match t.data {
                TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
                TensorData::F64(v) => v,
            };
            mats.push(Matrix::from_vec(t.shape[0], t.shape[1], data)?);
        }
        Ok(TinyViT {
            config,
            tensors: mats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig {
            seed: 42,
            ..ModelConfig::default()
        };
        let a = init_model(&config).unwrap();
        let b = init_model(&config).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn head_dim_and_token_count() {
        let config = ModelConfig::default();
        assert_eq!(config.head_dim(), 16);
        assert_eq!(config.n_patches(), 16);
        let model = init_model(&config).unwrap();
        assert_eq!(model.pos_embed().rows(), 17);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = ModelConfig {
            image_size: 30,
            ..ModelConfig::default()
        };
        assert!(init_model(&bad).is_err());
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(init_model(&bad).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_mlp: 24,
            image_size: 8,
            patch_size: 4,
            seed: 7,
            ..ModelConfig::default()
        };
        let model = init_model(&config).unwrap();
        model.save(&path).unwrap();
        let loaded = TinyViT::load(&path).unwrap();
        assert_eq!(loaded.config, config);
        // f32 storage: values round-trip through f32 exactly once.
        for (a, b) in model.tensors().iter().zip(loaded.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }
}
