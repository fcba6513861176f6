//! Hand-written reverse-mode gradients: full parameter gradients for
//! training, and activation gradients at a hook site for target refinement.
//! No tape; the architecture is fixed, so each layer is walked in reverse
//! explicitly.

use super::forward::{gelu_prime, linear, softmax, ActivationTrace, BlockCache, ForwardCache};
use super::{HookSite, Site, TinyViT, TokenSel};
use crate::error::{Result, XeditError};
use crate::numerics::Matrix;
use std::collections::HashMap;

/// Parameter-shaped gradient set, indexed like `TinyViT::tensors()`.
pub type Grads = Vec<Matrix>;

pub fn zero_grads(model: &TinyViT) -> Grads {
    model
        .tensors()
        .iter()
        .map(|t| Matrix::zeros(t.rows(), t.cols()))
        .collect()
}

/// Mean cross-entropy loss and its logit gradient for one sample.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[label].max(1e-300).ln();
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    (loss, dlogits)
}

/// `d_x = d_y w` for `y = x wᵀ`.
fn linear_backward_data(d_y: &Matrix, w: &Matrix) -> Matrix {
    let t = d_y.rows();
    let n_in = w.cols();
    let mut d_x = Matrix::zeros(t, n_in);
    for i in 0..t {
        let dyrow = d_y.row(i);
        let dxrow = d_x.row_mut(i);
        for (o, &dy) in dyrow.iter().enumerate() {
            if dy == 0.0 {
                continue;
            }
            let wrow = w.row(o);
            for j in 0..n_in {
                dxrow[j] += dy * wrow[j];
            }
        }
    }
    d_x
}

/// Accumulate `d_w += d_yᵀ x` and `d_b += colsum(d_y)`.
fn linear_backward_params(d_y: &Matrix, x: &Matrix, d_w: &mut Matrix, d_b: &mut Matrix) {
    let t = d_y.rows();
    for i in 0..t {
        let dyrow = d_y.row(i);
        let xrow = x.row(i);
        for (o, &dy) in dyrow.iter().enumerate() {
            if dy != 0.0 {
                let wrow = d_w.row_mut(o);
                for (wv, &xv) in wrow.iter_mut().zip(xrow) {
                    *wv += dy * xv;
                }
            }
        }
        for (bv, &dy) in d_b.row_mut(0).iter_mut().zip(dyrow) {
            *bv += dy;
        }
    }
}

/// Layer-norm backward for one row; returns dx and accumulates dγ, dβ.
fn layer_norm_backward_row(
    x: &[f64],
    mu: f64,
    istd: f64,
    gamma: &[f64],
    d_y: &[f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
    d_x: &mut [f64],
) {
    let d = x.len() as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for j in 0..x.len() {
        let xhat = (x[j] - mu) * istd;
        let g = d_y[j] * gamma[j];
        d_gamma[j] += d_y[j] * xhat;
        d_beta[j] += d_y[j];
        mean_g += g;
        mean_gx += g * xhat;
    }
    mean_g /= d;
    mean_gx /= d;
    for j in 0..x.len() {
        let xhat = (x[j] - mu) * istd;
        let g = d_y[j] * gamma[j];
        d_x[j] += istd * (g - mean_g - xhat * mean_gx);
    }
}

fn layer_norm_backward(
    x: &Matrix,
    mus: &[f64],
    istds: &[f64],
    gamma: &Matrix,
    d_y: &Matrix,
    d_gamma: &mut Matrix,
    d_beta: &mut Matrix,
) -> Matrix {
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        // Split borrows: gradient row i vs. accumulator rows.
        let mut dxrow = vec![0.0; x.cols()];
        layer_norm_backward_row(
            x.row(i),
            mus[i],
            istds[i],
            gamma.row(0),
            d_y.row(i),
            d_gamma.row_mut(0),
            d_beta.row_mut(0),
            &mut dxrow,
        );
        d_x.row_mut(i).copy_from_slice(&dxrow);
    }
    d_x
}

enum BlockBack {
    /// Gradient flowing into the block input; keep walking down.
    Continue(Matrix),
    /// Gradient at the requested stop site.
    Stopped(Matrix),
}

struct GradSlot<'a> {
    grads: Option<&'a mut Grads>,
}

impl<'a> GradSlot<'a> {
    fn at(&mut self, idx: usize) -> Option<&mut Matrix> {
        self.grads.as_mut().map(|g| &mut g[idx])
    }
}

impl TinyViT {
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        l: usize,
        cache: &BlockCache,
        d_x_out: Matrix,
        grads: &mut GradSlot<'_>,
        stop: Option<Site>,
    ) -> BlockBack {
        let base = super::BLOCK_BASE + l * super::BLOCK_TENSORS;

        if stop == Some(Site::BlockOut) {
            return BlockBack::Stopped(d_x_out);
        }

        // Residual: x_out = x_mid + mlp_out.
        let d_mlp_out = d_x_out.clone();
        if stop == Some(Site::MlpOut) {
            return BlockBack::Stopped(d_mlp_out);
        }
        let mut d_x_mid = d_x_out;

        // MLP: mlp_out = fc2(h), h = gelu(h_pre), h_pre = fc1(ln2_out).
        if let Some(dw) = grads.at(base + super::B_FC2_W) {
            let mut tmp_b = Matrix::zeros(1, self.config.d_model);
            linear_backward_params(&d_mlp_out, &cache.h, dw, &mut tmp_b);
            grads.at(base + super::B_FC2_B).unwrap().add_assign(&tmp_b).unwrap();
        }
        let d_h = linear_backward_data(&d_mlp_out, self.fc2_weight(l));
        if stop == Some(Site::MlpHidden) {
            return BlockBack::Stopped(d_h);
        }

        let mut d_h_pre = d_h;
        for (dv, &pre) in d_h_pre.data_mut().iter_mut().zip(cache.h_pre.data()) {
            *dv *= gelu_prime(pre);
        }
        if let Some(dw) = grads.at(base + super::B_FC1_W) {
            let mut tmp_b = Matrix::zeros(1, self.config.d_mlp);
            linear_backward_params(&d_h_pre, &cache.ln2_out, dw, &mut tmp_b);
            grads.at(base + super::B_FC1_B).unwrap().add_assign(&tmp_b).unwrap();
        }
        let d_ln2 = linear_backward_data(&d_h_pre, self.fc1_weight(l));
        if stop == Some(Site::MlpIn) {
            return BlockBack::Stopped(d_ln2);
        }

        let mut scratch_g = Matrix::zeros(1, self.config.d_model);
        let mut scratch_b = Matrix::zeros(1, self.config.d_model);
        let d_from_ln2 = layer_norm_backward(
            &cache.x_mid,
            &cache.ln2_mu,
            &cache.ln2_istd,
            self.ln2_gamma(l),
            &d_ln2,
            &mut scratch_g,
            &mut scratch_b,
        );
        if let Some(g) = grads.at(base + super::B_LN2_G) {
            g.add_assign(&scratch_g).unwrap();
        }
        if let Some(b) = grads.at(base + super::B_LN2_B) {
            b.add_assign(&scratch_b).unwrap();
        }
        d_x_mid.add_assign(&d_from_ln2).unwrap();

        // Residual: x_mid = x_in + attn_out.
        let d_attn_out = d_x_mid.clone();
        let mut d_x_in = d_x_mid;

        // Attention backward.
        let c = &self.config;
        let t = cache.x_in.rows();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        if let Some(dw) = grads.at(base + super::B_WO) {
            let mut unused = Matrix::zeros(1, c.d_model);
            linear_backward_params(&d_attn_out, &cache.ctx, dw, &mut unused);
        }
        let d_ctx = linear_backward_data(&d_attn_out, self.wo(l));

        let mut d_q = Matrix::zeros(t, c.d_model);
        let mut d_k = Matrix::zeros(t, c.d_model);
        let mut d_v = Matrix::zeros(t, c.d_model);
        for h in 0..c.n_heads {
            let hs = h * dh;
            let he = hs + dh;
            let p = &cache.probs[h];
            // d_p[i][j] = d_ctx_h[i] . v_h[j]; d_v_h[j] += p[i][j] d_ctx_h[i]
            let mut d_p = Matrix::zeros(t, t);
            for i in 0..t {
                let dctx = &d_ctx.row(i)[hs..he];
                let dprow = d_p.row_mut(i);
                for j in 0..t {
                    let vrow = &cache.v.row(j)[hs..he];
                    let mut acc = 0.0;
                    for (a, b) in dctx.iter().zip(vrow) {
                        acc += a * b;
                    }
                    dprow[j] = acc;
                }
                let prow = p.row(i);
                for j in 0..t {
                    let w = prow[j];
                    if w == 0.0 {
                        continue;
                    }
                    let dvrow = &mut d_v.row_mut(j)[hs..he];
                    for (dv, &dc) in dvrow.iter_mut().zip(dctx) {
                        *dv += w * dc;
                    }
                }
            }
            // Softmax backward, then scores = scale * q kᵀ.
            for i in 0..t {
                let prow = p.row(i);
                let dprow = d_p.row(i);
                let dot: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
                let ds: Vec<f64> = prow
                    .iter()
                    .zip(dprow)
                    .map(|(&pv, &dpv)| pv * (dpv - dot))
                    .collect();
                for j in 0..t {
                    let s = ds[j] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let krow = &cache.k.row(j)[hs..he];
                    let dqrow = &mut d_q.row_mut(i)[hs..he];
                    for (dq, &kv) in dqrow.iter_mut().zip(krow) {
                        *dq += s * kv;
                    }
                    let qrow = &cache.q.row(i)[hs..he];
                    // Borrow d_k row separately from d_q.
                    let dkrow = &mut d_k.row_mut(j)[hs..he];
                    for (dk, &qv) in dkrow.iter_mut().zip(qrow) {
                        *dk += s * qv;
                    }
                }
            }
        }

        let mut unused = Matrix::zeros(1, c.d_model);
        if let Some(dw) = grads.at(base + super::B_WQ) {
            linear_backward_params(&d_q, &cache.ln1_out, dw, &mut unused);
        }
        if let Some(dw) = grads.at(base + super::B_WK) {
            linear_backward_params(&d_k, &cache.ln1_out, dw, &mut unused);
        }
        if let Some(dw) = grads.at(base + super::B_WV) {
            linear_backward_params(&d_v, &cache.ln1_out, dw, &mut unused);
        }
        let mut d_ln1 = linear_backward_data(&d_q, self.wq(l));
        d_ln1
            .add_assign(&linear_backward_data(&d_k, self.wk(l)))
            .unwrap();
        d_ln1
            .add_assign(&linear_backward_data(&d_v, self.wv(l)))
            .unwrap();

        let mut scratch_g = Matrix::zeros(1, c.d_model);
        let mut scratch_b = Matrix::zeros(1, c.d_model);
        let d_from_ln1 = layer_norm_backward(
            &cache.x_in,
            &cache.ln1_mu,
            &cache.ln1_istd,
            self.ln1_gamma(l),
            &d_ln1,
            &mut scratch_g,
            &mut scratch_b,
        );
        if let Some(g) = grads.at(base + super::B_LN1_G) {
            g.add_assign(&scratch_g).unwrap();
        }
        if let Some(b) = grads.at(base + super::B_LN1_B) {
            b.add_assign(&scratch_b).unwrap();
        }
        d_x_in.add_assign(&d_from_ln1).unwrap();

        BlockBack::Continue(d_x_in)
    }

    /// Backward from logits through the head and final layer norm; returns
    /// the gradient on the final block output.
    fn head_backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        grads: &mut GradSlot<'_>,
    ) -> Matrix {
        let d = self.config.d_model;
        let n = self.tensors().len();

        let mut d_y = vec![0.0; d];
        for (o, &dl) in dlogits.iter().enumerate() {
            if dl != 0.0 {
                let wrow = self.head_w().row(o);
                for j in 0..d {
                    d_y[j] += dl * wrow[j];
                }
            }
        }
        if let Some(dw) = grads.at(n - 2) {
            for (o, &dl) in dlogits.iter().enumerate() {
                let wrow = dw.row_mut(o);
                for (wv, &yv) in wrow.iter_mut().zip(&cache.y) {
                    *wv += dl * yv;
                }
            }
        }
        if let Some(db) = grads.at(n - 1) {
            for (bv, &dl) in db.row_mut(0).iter_mut().zip(dlogits) {
                *bv += dl;
            }
        }

        let mut d_cls = vec![0.0; d];
        let mut scratch_g = Matrix::zeros(1, d);
        let mut scratch_b = Matrix::zeros(1, d);
        layer_norm_backward_row(
            &cache.cls_final,
            cache.lnf_mu,
            cache.lnf_istd,
            self.ln_f_gamma().row(0),
            &d_y,
            scratch_g.row_mut(0),
            scratch_b.row_mut(0),
            &mut d_cls,
        );
        if let Some(g) = grads.at(n - 4) {
            g.add_assign(&scratch_g).unwrap();
        }
        if let Some(b) = grads.at(n - 3) {
            b.add_assign(&scratch_b).unwrap();
        }

        let mut d_x = Matrix::zeros(self.config.n_tokens(), d);
        d_x.row_mut(0).copy_from_slice(&d_cls);
        d_x
    }

    /// Full parameter gradients for one cached forward pass, accumulated
    /// into `grads`. The pass must not have used activation patches.
    fn backward_params(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut Grads) {
        debug_assert!(cache.patched.is_empty());
        let mut slot = GradSlot { grads: Some(grads) };
        let mut d_x = self.head_backward(cache, dlogits, &mut slot);
        for l in (0..self.config.n_layers).rev() {
            match self.block_backward(l, &cache.blocks[l], d_x, &mut slot, None) {
                BlockBack::Continue(d) => d_x = d,
                BlockBack::Stopped(_) => unreachable!("no stop site requested"),
            }
        }
        // Embedding backward: states0 = [cls; patches Wᵀ + b] + pos.
        let grads = slot.grads.take().unwrap();
        grads[super::T_POS].add_assign(&d_x).unwrap();
        for (g, &dv) in grads[super::T_CLS].row_mut(0).iter_mut().zip(d_x.row(0)) {
            *g += dv;
        }
        if let Some(patches) = &cache.patch_matrix {
            let np = patches.rows();
            let mut d_xp = Matrix::zeros(np, self.config.d_model);
            for i in 0..np {
                d_xp.row_mut(i).copy_from_slice(d_x.row(i + 1));
            }
            let (dw_idx, db_idx) = (super::T_PATCH_W, super::T_PATCH_B);
            let mut tmp_b = Matrix::zeros(1, self.config.d_model);
            linear_backward_params(&d_xp, patches, &mut grads[dw_idx], &mut tmp_b);
            grads[db_idx].add_assign(&tmp_b).unwrap();
        }
    }
}

/// Mean cross-entropy over the batch plus gradients for every parameter
/// tensor.
pub fn loss_and_grads(model: &TinyViT, batch: &[(&[u8], usize)]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(XeditError::Empty { what: "batch" });
    }
    let n_classes = model.config.n_classes;
    for (_, label) in batch {
        if *label >= n_classes {
            return Err(XeditError::LabelOutOfRange {
                label: *label,
                n_classes,
            });
        }
    }

    let inv = 1.0 / batch.len() as f64;
    let mut grads = zero_grads(model);
    let mut total_loss = 0.0;
    let empty = HashMap::new();
    for (image, label) in batch {
        let (states, patch_matrix) = {
            let mut trace = ActivationTrace::new();
            let states = model.embed(image)?;
            // Re-run embed_with_patches equivalent: reuse forward path below.
            let _ = &mut trace;
            (states, None::<Matrix>)
        };
        let _ = (states, patch_matrix);
        let mut trace = ActivationTrace::new();
        let (states, patches_mat) = model_embed_with_patches(model, image)?;
        let cache = model.forward_cached(states, Some(patches_mat), &[], &empty, &mut trace)?;
        let (loss, mut dlogits) = cross_entropy(&cache.logits, *label);
        total_loss += loss * inv;
        for d in &mut dlogits {
            *d *= inv;
        }
        model.backward_params(&cache, &dlogits, &mut grads);
    }
    Ok((total_loss, grads))
}

// embed_with_patches is private to forward.rs; re-derive here through the
// public pieces to keep the cache's patch matrix available for the
// embedding gradient.
fn model_embed_with_patches(model: &TinyViT, image: &[u8]) -> Result<(Matrix, Matrix)> {
    let c = &model.config;
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
    let xp = linear(&patches, model.patch_w(), Some(model.patch_b()));
    let t = c.n_tokens();
    let d = c.d_model;
    let mut states = Matrix::zeros(t, d);
    let pos = model.pos_embed();
    for j in 0..d {
        states.row_mut(0)[j] = model.cls_token().get(0, j) + pos.get(0, j);
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

/// Gradient of the prediction cross-entropy with respect to an activation
/// override patched in at `site`, all parameters held fixed. Only the MLP
/// value sites are supported.
pub fn grad_wrt_site(
    model: &TinyViT,
    image: &[u8],
    label: usize,
    site: HookSite,
    override_value: &Matrix,
) -> Result<Matrix> {
    if !matches!(site.site, Site::MlpHidden | Site::MlpOut) {
        return Err(XeditError::InvalidConfig(format!(
            "grad_wrt_site supports mlp_hidden and mlp_out, got {}",
            site.site
        )));
    }
    if label >= model.config.n_classes {
        return Err(XeditError::LabelOutOfRange {
            label,
            n_classes: model.config.n_classes,
        });
    }
    let mut patches = HashMap::new();
    patches.insert(site, override_value.clone());
    let mut trace = ActivationTrace::new();
    let (states, patch_matrix) = model_embed_with_patches(model, image)?;
    let cache = model.forward_cached(states, Some(patch_matrix), &[], &patches, &mut trace)?;
    let (_, dlogits) = cross_entropy(&cache.logits, label);

    let mut slot = GradSlot { grads: None };
    let mut d_x = model.head_backward(&cache, &dlogits, &mut slot);
    for l in (site.layer..model.config.n_layers).rev() {
        let stop = if l == site.layer { Some(site.site) } else { None };
        match model.block_backward(l, &cache.blocks[l], d_x, &mut slot, stop) {
            BlockBack::Continue(d) => d_x = d,
            BlockBack::Stopped(g) => {
                return Ok(match site.tokens {
                    TokenSel::All => g,
                    TokenSel::ClsOnly => {
                        Matrix::from_vec(1, g.cols(), g.row(0).to_vec())?
                    }
                });
            }
        }
    }
    unreachable!("stop site is always within the walked layers")
}
