//! Forward pass: patch embedding, pre-LN transformer blocks, hook capture
//! and activation patching. One code path serves plain inference, the
//! clean/corrupted/restored runs of causal tracing, and the cached forward
//! that the backward passes consume.

use super::{HookSite, Site, TinyViT, TokenSel, LN_EPS};
use crate::error::{Result, XeditError};
use crate::numerics::Matrix;
use std::collections::HashMap;

pub type ActivationTrace = HashMap<HookSite, Matrix>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `y = x wᵀ (+ b)`: x is tokens×in, w is out×in, b broadcasts over tokens.
pub(crate) fn linear(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Matrix {
    debug_assert_eq!(x.cols(), w.cols());
    let t = x.rows();
    let out = w.rows();
    let mut y = Matrix::zeros(t, out);
    for i in 0..t {
        let xrow = x.row(i);
        let yrow = y.row_mut(i);
        for o in 0..out {
            let wrow = w.row(o);
            let mut acc = 0.0;
            for (a, b) in xrow.iter().zip(wrow) {
                acc += a * b;
            }
            yrow[o] = acc;
        }
        if let Some(bias) = b {
            for (v, bv) in yrow.iter_mut().zip(bias.row(0)) {
                *v += bv;
            }
        }
    }
    y
}

/// Row-wise layer norm; returns (output, per-row mean, per-row 1/std).
pub(crate) fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let t = x.rows();
    let d = x.cols();
    let mut out = Matrix::zeros(t, d);
    let mut mus = Vec::with_capacity(t);
    let mut istds = Vec::with_capacity(t);
    let g = gamma.row(0);
    let b = beta.row(0);
    for i in 0..t {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = (row[j] - mu) * istd * g[j] + b[j];
        }
        mus.push(mu);
        istds.push(istd);
    }
    (out, mus, istds)
}

pub(crate) struct BlockCache {
    pub x_in: Matrix,
    pub ln1_out: Matrix,
    pub ln1_mu: Vec<f64>,
    pub ln1_istd: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub x_mid: Matrix,
    pub ln2_out: Matrix,
    pub ln2_mu: Vec<f64>,
    pub ln2_istd: Vec<f64>,
    pub h_pre: Matrix,
    pub h: Matrix,
    pub mlp_out: Matrix,
    pub x_out: Matrix,
}

pub struct ForwardCache {
    pub(crate) states0: Matrix,
    pub(crate) patch_matrix: Option<Matrix>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) lnf_mu: f64,
    pub(crate) lnf_istd: f64,
    pub(crate) cls_final: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub logits: Vec<f64>,
    pub(crate) patched: Vec<HookSite>,
}

fn site_dim(model: &TinyViT, site: Site) -> usize {
    match site {
        Site::MlpHidden => model.config.d_mlp,
        Site::MlpIn | Site::MlpOut | Site::BlockOut => model.config.d_model,
    }
}

fn check_patch_shape(model: &TinyViT, key: &HookSite, value: &Matrix) -> Result<()> {
    if key.layer >= model.config.n_layers {
        return Err(XeditError::HookShape {
            site: key.to_string(),
            expected: format!("layer < {}", model.config.n_layers),
            got: format!("layer {}", key.layer),
        });
    }
    let dim = site_dim(model, key.site);
    let want_rows = match key.tokens {
        TokenSel::All => model.config.n_tokens(),
        TokenSel::ClsOnly => 1,
    };
    if value.rows() != want_rows || value.cols() != dim {
        return Err(XeditError::HookShape {
            site: key.to_string(),
            expected: format!("{want_rows}x{dim}"),
            got: format!("{}x{}", value.rows(), value.cols()),
        });
    }
    Ok(())
}

impl TinyViT {
    /// Patch rows normalized to [0,1], one row per patch token.
    fn patchify(&self, image: &[u8]) -> Result<Matrix> {
        let c = &self.config;
        let expect = c.image_size * c.image_size * c.channels;
        if image.len() != expect {
            return Err(XeditError::InvalidConfig(format!(
                "image has {} pixels, model expects {}",
                image.len(),
                expect
            )));
        }
        let per_side = c.image_size / c.patch_size;
        let mut patches = Matrix::zeros(c.n_patches(), c.patch_dim());
        for pr in 0..per_side {
            for pc in 0..per_side {
                let row = patches.row_mut(pr * per_side + pc);
                let mut idx = 0;
                for ch in 0..c.channels {
                    let plane = ch * c.image_size * c.image_size;
                    for py in 0..c.patch_size {
                        let y = pr * c.patch_size + py;
                        for px in 0..c.patch_size {
                            let x = pc * c.patch_size + px;
                            row[idx] = f64::from(image[plane + y * c.image_size + x]) / 255.0;
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(patches)
    }

    /// Token states after patch projection, CLS prepend and positional
    /// embedding. Row 0 is the CLS token.
    pub fn embed(&self, image: &[u8]) -> Result<Matrix> {
        Ok(self.embed_with_patches(image)?.0)
    }

    fn embed_with_patches(&self, image: &[u8]) -> Result<(Matrix, Matrix)> {
        let patches = self.patchify(image)?;
        let xp = linear(&patches, self.patch_w(), Some(self.patch_b()));
        let t = self.config.n_tokens();
        let d = self.config.d_model;
        let mut states = Matrix::zeros(t, d);
        let pos = self.pos_embed();
        for j in 0..d {
            states.row_mut(0)[j] = self.cls_token().get(0, j) + pos.get(0, j);
        }
        for i in 0..t - 1 {
            let src = xp.row(i);
            let prow = pos.row(i + 1);
            let dst = states.row_mut(i + 1);
            for j in 0..d {
                dst[j] = src[j] + prow[j];
            }
        }
        Ok((states, patches))
    }

    fn apply_site(
        &self,
        layer: usize,
        site: Site,
        value: &mut Matrix,
        capture: &[HookSite],
        patches: &HashMap<HookSite, Matrix>,
        trace: &mut ActivationTrace,
        patched: &mut Vec<HookSite>,
    ) {
        let all = HookSite::all(layer, site);
        let cls = HookSite::cls(layer, site);
        if let Some(p) = patches.get(&all) {
            value.data_mut().copy_from_slice(p.data());
            patched.push(all);
        }
        if let Some(p) = patches.get(&cls) {
            value.row_mut(0).copy_from_slice(p.row(0));
            patched.push(cls);
        }
        // Capture after patching, so captured values are bit-identical to
        // what this pass actually used downstream.
        if capture.contains(&all) {
            trace.insert(all, value.clone());
        }
        if capture.contains(&cls) {
            let row = Matrix::from_vec(1, value.cols(), value.row(0).to_vec())
                .expect("finite activation");
            trace.insert(cls, row);
        }
    }

    fn attention(&self, layer: usize, a_in: &Matrix) -> (Matrix, Matrix, Matrix, Vec<Matrix>, Matrix, Matrix) {
        let c = &self.config;
        let t = a_in.rows();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = linear(a_in, self.wq(layer), None);
        let k = linear(a_in, self.wk(layer), None);
        let v = linear(a_in, self.wv(layer), None);
        let mut ctx = Matrix::zeros(t, c.d_model);
        let mut probs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let hs = h * dh;
            let he = hs + dh;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qrow = &q.row(i)[hs..he];
                let prow = p.row_mut(i);
                for j in 0..t {
                    let krow = &k.row(j)[hs..he];
                    let mut acc = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    prow[j] = acc * scale;
                }
                let sm = softmax(prow);
                prow.copy_from_slice(&sm);
            }
            for i in 0..t {
                let prow = p.row(i);
                for j in 0..t {
                    let w = prow[j];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &v.row(j)[hs..he];
                    let crow = &mut ctx.row_mut(i)[hs..he];
                    for (cv, vv) in crow.iter_mut().zip(vrow) {
                        *cv += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let out = linear(&ctx, self.wo(layer), None);
        (q, k, v, probs, ctx, out)
    }

    /// Full forward from prepared token states, recording every
    /// intermediate needed by the backward passes.
    pub(crate) fn forward_cached(
        &self,
        states: Matrix,
        patch_matrix: Option<Matrix>,
        capture: &[HookSite],
        patches: &HashMap<HookSite, Matrix>,
        trace: &mut ActivationTrace,
    ) -> Result<ForwardCache> {
        for key in capture {
            // Reuse the patch shape check with a correctly shaped dummy: only
            // the layer bound matters for captures.
            if key.layer >= self.config.n_layers {
                return Err(XeditError::HookShape {
                    site: key.to_string(),
                    expected: format!("layer < {}", self.config.n_layers),
                    got: format!("layer {}", key.layer),
                });
            }
        }
        for (key, value) in patches {
            check_patch_shape(self, key, value)?;
        }

        let mut patched = Vec::new();
        let mut blocks = Vec::with_capacity(self.config.n_layers);
        let mut x = states.clone();
        for l in 0..self.config.n_layers {
            let x_in = x;
            let (ln1_out, ln1_mu, ln1_istd) =
                layer_norm(&x_in, self.ln1_gamma(l), self.ln1_beta(l));
            let (q, k, v, probs, ctx, attn_out) = self.attention(l, &ln1_out);
            let x_mid = x_in.add(&attn_out)?;

            let (mut ln2_out, ln2_mu, ln2_istd) =
                layer_norm(&x_mid, self.ln2_gamma(l), self.ln2_beta(l));
            self.apply_site(l, Site::MlpIn, &mut ln2_out, capture, patches, trace, &mut patched);

            let h_pre = linear(&ln2_out, self.fc1_weight(l), Some(self.fc1_bias(l)));
            let mut h = h_pre.clone();
            for v in h.data_mut() {
                *v = gelu(*v);
            }
            self.apply_site(l, Site::MlpHidden, &mut h, capture, patches, trace, &mut patched);

            let mut mlp_out = linear(&h, self.fc2_weight(l), Some(self.fc2_bias(l)));
            self.apply_site(l, Site::MlpOut, &mut mlp_out, capture, patches, trace, &mut patched);

            let mut x_out = x_mid.add(&mlp_out)?;
            self.apply_site(l, Site::BlockOut, &mut x_out, capture, patches, trace, &mut patched);

            x = x_out.clone();
            blocks.push(BlockCache {
                x_in,
                ln1_out,
                ln1_mu,
                ln1_istd,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                ln2_out,
                ln2_mu,
                ln2_istd,
                h_pre,
                h,
                mlp_out,
                x_out,
            });
        }

        // Final layer norm on the CLS row only; the head reads nothing else.
        let cls_final = x.row(0).to_vec();
        let d = self.config.d_model;
        let mu = cls_final.iter().sum::<f64>() / d as f64;
        let var = cls_final.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        let g = self.ln_f_gamma().row(0);
        let b = self.ln_f_beta().row(0);
        let y: Vec<f64> = (0..d)
            .map(|j| (cls_final[j] - mu) * istd * g[j] + b[j])
            .collect();
        let head = self.head_w();
        let hb = self.head_b().row(0);
        let logits: Vec<f64> = (0..self.config.n_classes)
            .map(|o| {
                let wrow = head.row(o);
                y.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>() + hb[o]
            })
            .collect();

        Ok(ForwardCache {
            states0: states,
            patch_matrix,
            blocks,
            lnf_mu: mu,
            lnf_istd: istd,
            cls_final,
            y,
            logits,
            patched,
        })
    }

    /// Forward pass over an image with optional hook capture and activation
    /// patching. A patch replaces the value at its site before anything
    /// downstream (including capture) sees it.
    pub fn forward(
        &self,
        image: &[u8],
        capture: &[HookSite],
        patches: &HashMap<HookSite, Matrix>,
    ) -> Result<(Vec<f64>, ActivationTrace)> {
        let (states, patch_matrix) = self.embed_with_patches(image)?;
        let mut trace = ActivationTrace::new();
        let cache = self.forward_cached(states, Some(patch_matrix), capture, patches, &mut trace)?;
        Ok((cache.logits, trace))
    }

    /// Forward pass from externally prepared token states (used by causal
    /// tracing to inject embedding noise).
    pub fn forward_from_states(
        &self,
        states: Matrix,
        capture: &[HookSite],
        patches: &HashMap<HookSite, Matrix>,
    ) -> Result<(Vec<f64>, ActivationTrace)> {
        let mut trace = ActivationTrace::new();
        let cache = self.forward_cached(states, None, capture, patches, &mut trace)?;
        Ok((cache.logits, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_mlp: 24,
            n_classes: 4,
            seed: 11,
        }
    }

    fn random_image(seed: u64, len: usize) -> Vec<u8> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen()).collect()
    }

    #[test]
    fn plain_inference_softmax_normalized() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(1, 64);
        let (logits, trace) = model.forward(&image, &[], &HashMap::new()).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(trace.is_empty());
        let probs = softmax(&logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn patch_identity_reproduces_logits_bit_exactly() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(2, 64);
        for site in [Site::MlpIn, Site::MlpHidden, Site::MlpOut, Site::BlockOut] {
            for layer in 0..2 {
                for key in [HookSite::all(layer, site), HookSite::cls(layer, site)] {
                    let (logits, trace) = model.forward(&image, &[key], &HashMap::new()).unwrap();
                    let mut patches = HashMap::new();
                    patches.insert(key, trace[&key].clone());
                    let (logits2, _) = model.forward(&image, &[], &patches).unwrap();
                    assert_eq!(logits, logits2, "site {key}");
                }
            }
        }
    }

    #[test]
    fn full_block_out_restoration_forces_clean_logits() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(3, 64);
        let capture: Vec<HookSite> = (0..2).map(|l| HookSite::all(l, Site::BlockOut)).collect();
        let (clean_logits, trace) = model.forward(&image, &capture, &HashMap::new()).unwrap();

        // Feed a corrupted embedding but restore every block output.
        let mut states = model.embed(&image).unwrap();
        for v in states.data_mut() {
            *v += 0.37;
        }
        let patches: HashMap<HookSite, Matrix> =
            capture.iter().map(|k| (*k, trace[k].clone())).collect();
        let (restored, _) = model.forward_from_states(states, &[], &patches).unwrap();
        assert_eq!(clean_logits, restored);
    }

    #[test]
    fn patch_shape_mismatch_is_rejected() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(4, 64);
        let mut patches = HashMap::new();
        patches.insert(
            HookSite::all(0, Site::MlpHidden),
            Matrix::zeros(5, 24), // wrong token count
        );
        assert!(model.forward(&image, &[], &patches).is_err());
        let mut patches = HashMap::new();
        patches.insert(HookSite::all(7, Site::MlpOut), Matrix::zeros(5, 16));
        assert!(model.forward(&image, &[], &patches).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(5, 64);
        let states = model.embed(&image).unwrap();
        let mut trace = ActivationTrace::new();
        let cache = model
            .forward_cached(states, None, &[], &HashMap::new(), &mut trace)
            .unwrap();
        for block in &cache.blocks {
            for p in &block.probs {
                for i in 0..p.rows() {
                    let sum: f64 = p.row(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = init_model(&small_config()).unwrap();
        let image = random_image(6, 64);
        let (a, _) = model.forward(&image, &[], &HashMap::new()).unwrap();
        let (b, _) = model.forward(&image, &[], &HashMap::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_tie_breaks_to_lowest_index() {
        // Uniform logits arise from a zeroed head; probabilities tie.
        let mut model = init_model(&small_config()).unwrap();
        let n = model.tensors().len();
        let zero_w = Matrix::zeros(4, 16);
        let zero_b = Matrix::zeros(1, 4);
        model.tensors_mut()[n - 2] = zero_w;
        model.tensors_mut()[n - 1] = zero_b;
        let image = random_image(7, 64);
        let (class, probs) = model.predict(&image).unwrap();
        assert_eq!(class, 0);
        for p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}
