//! The two split backbones (MLP and CNN), reverse-mode gradients written out
//! layer by layer, and the Adam optimizer.
//!
//! Feature maps use channels-last layout `[B, H, W, C]` so convolution reduces
//! to one im2col plus one GEMM without any re-packing. Parameters are grouped
//! into the feature extractor and the classifier; the split is what the rest of
//! the protocol operates on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    Mlp,
    Cnn,
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchId::Mlp => write!(f, "mlp"),
            ArchId::Cnn => write!(f, "cnn"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> InputShape {
        InputShape {
            height,
            width,
            channels,
        }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Gaussian initialization parameters.
#[derive(Debug, Clone, Copy)]
pub struct InitConfig {
    pub mu: f64,
    pub sigma_init: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mu: 0.0,
            sigma_init: 0.05,
            seed: 0,
        }
    }
}

/// Layer widths. The defaults are the published backbone; tests shrink them to
/// build models small enough for finite-difference auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDims {
    pub mlp_hidden: [usize; 2],
    pub cnn_channels: [usize; 2],
    pub cnn_kernel: usize,
    pub cnn_fc: usize,
}

impl Default for ArchDims {
    fn default() -> Self {
        ArchDims {
            mlp_hidden: [512, 512],
            cnn_channels: [32, 64],
            cnn_kernel: 5,
            cnn_fc: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: &str, value: Tensor) -> Param {
        Param {
            name: name.to_string(),
            value,
        }
    }
}

/// The split model: feature-extractor parameters and classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchId,
    pub num_classes: usize,
    pub input: InputShape,
    pub extractor: Vec<Param>,
    pub classifier: Vec<Param>,
}

impl ModelParams {
    /// Width of the feature vector the extractor produces.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            ArchId::Mlp => self.extractor.last().expect("extractor params").value.len(),
            ArchId::Cnn => self.classifier[0].value.shape()[0],
        }
    }

    pub fn param_count(&self) -> usize {
        self.extractor
            .iter()
            .chain(self.classifier.iter())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn extractor_eq(&self, other: &ModelParams) -> bool {
        self.extractor == other.extractor
    }

    /// All parameter values flattened in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.extractor.iter().chain(self.classifier.iter()) {
            out.extend_from_slice(p.value.data());
        }
        out
    }
}

/// Gradient tensors, one per parameter, in the same order as `ModelParams`.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub extractor: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(model: &ModelParams) -> GradSet {
        GradSet {
            extractor: model
                .extractor
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            classifier: model
                .classifier
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

fn cnn_spatial(input: InputShape, dims: &ArchDims) -> Result<[(usize, usize); 4]> {
    let k = dims.cnn_kernel;
    let conv = |h: usize, w: usize| -> Result<(usize, usize)> {
        if h < k || w < k {
            return Err(Error::Config(format!(
                "input {}x{} too small for kernel {}",
                h, w, k
            )));
        }
        Ok((h - k + 1, w - k + 1))
    };
    let pool = |h: usize, w: usize| -> Result<(usize, usize)> {
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("map {}x{} too small to pool", h, w)));
        }
        Ok((h / 2, w / 2))
    };
    let c1 = conv(input.height, input.width)?;
    let p1 = pool(c1.0, c1.1)?;
    let c2 = conv(p1.0, p1.1)?;
    let p2 = pool(c2.0, c2.1)?;
    Ok([c1, p1, c2, p2])
}

/// Build a model with the published layer widths, every parameter drawn
/// i.i.d. Normal(mu, sigma_init^2) from the seeded generator.
pub fn init_params(
    arch: ArchId,
    num_classes: usize,
    input: InputShape,
    cfg: &InitConfig,
) -> Result<ModelParams> {
    init_params_with_dims(arch, num_classes, input, cfg, &ArchDims::default())
}

/// Same as [`init_params`] with custom layer widths.
pub fn init_params_with_dims(
    arch: ArchId,
    num_classes: usize,
    input: InputShape,
    cfg: &InitConfig,
    dims: &ArchDims,
) -> Result<ModelParams> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "num_classes must be >= 2, got {}",
            num_classes
        )));
    }
    if !(cfg.sigma_init >= 0.0) {
        return Err(Error::Config(format!(
            "sigma_init must be >= 0, got {}",
            cfg.sigma_init
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |name: &str, shape: &[usize]| {
        Param::new(name, Tensor::randn(shape, cfg.mu, cfg.sigma_init, &mut rng))
    };

    let (extractor, classifier) = match arch {
        ArchId::Mlp => {
            let [h1, h2] = dims.mlp_hidden;
            let d = input.dim();
            let extractor = vec![
                draw("fe1.weight", &[d, h1]),
                draw("fe1.bias", &[h1]),
                draw("fe2.weight", &[h1, h2]),
                draw("fe2.bias", &[h2]),
            ];
            let classifier = vec![
                draw("cls1.weight", &[h2, num_classes]),
                draw("cls1.bias", &[num_classes]),
            ];
            (extractor, classifier)
        }
        ArchId::Cnn => {
            let [o1, o2] = dims.cnn_channels;
            let k = dims.cnn_kernel;
            let [_, _, _, p2] = cnn_spatial(input, dims)?;
            let fd = p2.0 * p2.1 * o2;
            let extractor = vec![
                draw("conv1.weight", &[o1, k, k, input.channels]),
                draw("conv1.bias", &[o1]),
                draw("conv2.weight", &[o2, k, k, o1]),
                draw("conv2.bias", &[o2]),
            ];
            let classifier = vec![
                draw("cls1.weight", &[fd, dims.cnn_fc]),
                draw("cls1.bias", &[dims.cnn_fc]),
                draw("cls2.weight", &[dims.cnn_fc, num_classes]),
                draw("cls2.bias", &[num_classes]),
            ];
            (extractor, classifier)
        }
    };

    Ok(ModelParams {
        arch,
        num_classes,
        input,
        extractor,
        classifier,
    })
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

/// y[B,O] = x[B,I] * w[I,O] + b[O]
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bs, i) = (x.rows(), x.row_len());
    let o = w.shape()[1];
    debug_assert_eq!(w.shape()[0], i);
    let mut y = Tensor::zeros(&[bs, o]);
    gemm_acc(bs, i, o, x.data(), false, w.data(), false, 0.0, y.data_mut());
    for r in 0..bs {
        let row = y.row_mut(r);
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    y
}

/// Returns (gx, gw, gb).
pub fn dense_backward(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, i) = (x.rows(), x.row_len());
    let o = w.shape()[1];
    let mut gx = Tensor::zeros(&[bs, i]);
    // gx = gout * w^T
    gemm_acc(
        bs,
        o,
        i,
        gout.data(),
        false,
        w.data(),
        true,
        0.0,
        gx.data_mut(),
    );
    let mut gw = Tensor::zeros(&[i, o]);
    // gw = x^T * gout
    gemm_acc(
        i,
        bs,
        o,
        x.data(),
        true,
        gout.data(),
        false,
        0.0,
        gw.data_mut(),
    );
    let mut gb = Tensor::zeros(&[o]);
    for r in 0..bs {
        for (g, v) in gb.data_mut().iter_mut().zip(gout.row(r)) {
            *g += v;
        }
    }
    (gx, gw, gb)
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero gradient entries where the forward output was clamped.
pub fn relu_backward_inplace(grad: &mut Tensor, out: &Tensor) {
    for (g, o) in grad.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid 2-D convolution over channels-last maps.
/// x: [B,H,W,C], w: [O,K,K,C], b: [O] -> (out [B,OH,OW,O], im2col [B*OH*OW, K*K*C])
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (bs, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[1]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let patch = k * k * c;
    let n = bs * oh * ow;

    let mut col = Tensor::zeros(&[n, patch]);
    {
        let cd = col.data_mut();
        let xd = x.data();
        let mut row = 0;
        for bi in 0..bs {
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let dst = &mut cd[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for ky in 0..k {
                        let src = ((bi * h + y0 + ky) * wd + x0) * c;
                        dst[off..off + k * c].copy_from_slice(&xd[src..src + k * c]);
                        off += k * c;
                    }
                    row += 1;
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[bs, oh, ow, o]);
    gemm_acc(
        n,
        patch,
        o,
        col.data(),
        false,
        w.data(),
        true,
        0.0,
        out.data_mut(),
    );
    for r in 0..n {
        let dst = &mut out.data_mut()[r * o..(r + 1) * o];
        for (v, bv) in dst.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    (out, col)
}

/// Returns (gx or None, gw, gb). `need_gx` skips the col2im scatter for the
/// first layer where the input gradient is never used.
pub fn conv2d_backward(
    col: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    x_shape: &[usize],
    need_gx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (o, k) = (w.shape()[0], w.shape()[1]);
    let patch = col.row_len();
    let n = col.rows();
    let (bs, h, wd, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);

    // gw = gout^T * col
    let mut gw = Tensor::zeros(w.shape());
    gemm_acc(
        o,
        n,
        patch,
        gout.data(),
        true,
        col.data(),
        false,
        0.0,
        gw.data_mut(),
    );

    let mut gb = Tensor::zeros(&[o]);
    for r in 0..n {
        let src = &gout.data()[r * o..(r + 1) * o];
        for (g, v) in gb.data_mut().iter_mut().zip(src) {
            *g += v;
        }
    }

    if !need_gx {
        return (None, gw, gb);
    }

    // gcol = gout * w_mat, then scatter back to the input grid.
    let mut gcol = Tensor::zeros(&[n, patch]);
    gemm_acc(
        n,
        o,
        patch,
        gout.data(),
        false,
        w.data(),
        false,
        0.0,
        gcol.data_mut(),
    );
    let mut gx = Tensor::zeros(x_shape);
    {
        let gxd = gx.data_mut();
        let gcd = gcol.data();
        let mut row = 0;
        for bi in 0..bs {
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let src = &gcd[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for ky in 0..k {
                        let dst = ((bi * h + y0 + ky) * wd + x0) * c;
                        for (gv, sv) in gxd[dst..dst + k * c].iter_mut().zip(&src[off..off + k * c])
                        {
                            *gv += sv;
                        }
                        off += k * c;
                    }
                    row += 1;
                }
            }
        }
    }
    (Some(gx), gw, gb)
}

/// 2x2 max pooling, stride 2, channels-last. Odd trailing rows/columns are
/// dropped. Returns (out, argmax flat indices into the input).
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (bs, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bs, oh, ow, c]);
    let mut idx = vec![0u32; bs * oh * ow * c];
    let xd = x.data();
    let od = out.data_mut();
    let mut p = 0;
    for bi in 0..bs {
        for y0 in 0..oh {
            for x0 in 0..ow {
                for ch in 0..c {
                    let base = |dy: usize, dx: usize| {
                        ((bi * h + 2 * y0 + dy) * w + 2 * x0 + dx) * c + ch
                    };
                    let mut best = base(0, 0);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base(dy, dx);
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    od[p] = xd[best];
                    idx[p] = best as u32;
                    p += 1;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(gout: &Tensor, idx: &[u32], x_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(x_shape);
    let gxd = gx.data_mut();
    for (g, i) in gout.data().iter().zip(idx) {
        gxd[*i as usize] += g;
    }
    gx
}

// ---------------------------------------------------------------------------
// Model forward / backward split at the feature boundary
// ---------------------------------------------------------------------------

pub enum ExtractCache {
    Mlp {
        x: Tensor,
        a1: Tensor,
        feat: Tensor,
    },
    Cnn {
        x_shape: Vec<usize>,
        col1: Tensor,
        c1: Tensor,
        idx1: Vec<u32>,
        p1: Tensor,
        col2: Tensor,
        c2: Tensor,
        idx2: Vec<u32>,
    },
}

pub enum ClassifyCache {
    Mlp { z: Tensor },
    Cnn { z: Tensor, h: Tensor },
}

fn check_batch(model: &ModelParams, batch: &Tensor) -> Result<()> {
    match model.arch {
        ArchId::Mlp => {
            if batch.row_len() != model.input.dim() {
                return Err(Error::Dimension(format!(
                    "MLP expects rows of {} values, got {}",
                    model.input.dim(),
                    batch.row_len()
                )));
            }
        }
        ArchId::Cnn => {
            let want = [
                batch.shape()[0],
                model.input.height,
                model.input.width,
                model.input.channels,
            ];
            if batch.shape() != want {
                return Err(Error::Dimension(format!(
                    "CNN expects batch shape {:?}, got {:?}",
                    want,
                    batch.shape()
                )));
            }
        }
    }
    Ok(())
}

/// features = Phi(batch), with everything the backward pass needs.
pub fn extract_features(model: &ModelParams, batch: &Tensor) -> Result<(Tensor, ExtractCache)> {
    check_batch(model, batch)?;
    match model.arch {
        ArchId::Mlp => {
            let bs = batch.rows();
            let x = batch.clone().reshape(&[bs, model.input.dim()])?;
            let mut a1 = dense_forward(&x, &model.extractor[0].value, &model.extractor[1].value);
            relu_inplace(&mut a1);
            let mut feat = dense_forward(&a1, &model.extractor[2].value, &model.extractor[3].value);
            relu_inplace(&mut feat);
            Ok((
                feat.clone(),
                ExtractCache::Mlp { x, a1, feat },
            ))
        }
        ArchId::Cnn => {
            let (mut c1, col1) =
                conv2d_forward(batch, &model.extractor[0].value, &model.extractor[1].value);
            relu_inplace(&mut c1);
            let (p1, idx1) = maxpool2_forward(&c1);
            let (mut c2, col2) =
                conv2d_forward(&p1, &model.extractor[2].value, &model.extractor[3].value);
            relu_inplace(&mut c2);
            let (p2, idx2) = maxpool2_forward(&c2);
            let bs = batch.shape()[0];
            let fd = p2.len() / bs;
            let feat = p2.reshape(&[bs, fd])?;
            Ok((
                feat,
                ExtractCache::Cnn {
                    x_shape: batch.shape().to_vec(),
                    col1,
                    c1,
                    idx1,
                    p1,
                    col2,
                    c2,
                    idx2,
                },
            ))
        }
    }
}

/// logits = Psi(features).
pub fn classify(model: &ModelParams, features: &Tensor) -> Result<(Tensor, ClassifyCache)> {
    if features.row_len() != model.feature_dim() {
        return Err(Error::Dimension(format!(
            "classifier expects features of width {}, got {}",
            model.feature_dim(),
            features.row_len()
        )));
    }
    match model.arch {
        ArchId::Mlp => {
            let logits = dense_forward(
                features,
                &model.classifier[0].value,
                &model.classifier[1].value,
            );
            Ok((
                logits,
                ClassifyCache::Mlp {
                    z: features.clone(),
                },
            ))
        }
        ArchId::Cnn => {
            let mut h = dense_forward(
                features,
                &model.classifier[0].value,
                &model.classifier[1].value,
            );
            relu_inplace(&mut h);
            let logits = dense_forward(&h, &model.classifier[2].value, &model.classifier[3].value);
            Ok((
                logits,
                ClassifyCache::Cnn {
                    z: features.clone(),
                    h,
                },
            ))
        }
    }
}

/// Gradient of the classifier: returns (d loss / d features, classifier grads).
pub fn backward_classifier(
    model: &ModelParams,
    cache: &ClassifyCache,
    glogits: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    match (model.arch, cache) {
        (ArchId::Mlp, ClassifyCache::Mlp { z }) => {
            let (gz, gw, gb) = dense_backward(z, &model.classifier[0].value, glogits);
            (gz, vec![gw, gb])
        }
        (ArchId::Cnn, ClassifyCache::Cnn { z, h }) => {
            let (mut gh, gw2, gb2) = dense_backward(h, &model.classifier[2].value, glogits);
            relu_backward_inplace(&mut gh, h);
            let (gz, gw1, gb1) = dense_backward(z, &model.classifier[0].value, &gh);
            (gz, vec![gw1, gb1, gw2, gb2])
        }
        _ => unreachable!("cache kind always matches arch"),
    }
}

/// Gradient of the extractor given d loss / d features.
pub fn backward_extractor(
    model: &ModelParams,
    cache: &ExtractCache,
    gfeat: &Tensor,
) -> Vec<Tensor> {
    match (model.arch, cache) {
        (ArchId::Mlp, ExtractCache::Mlp { x, a1, feat }) => {
            let mut g = gfeat.clone();
            relu_backward_inplace(&mut g, feat);
            let (mut ga1, gw2, gb2) = dense_backward(a1, &model.extractor[2].value, &g);
            relu_backward_inplace(&mut ga1, a1);
            let (_, gw1, gb1) = dense_backward(x, &model.extractor[0].value, &ga1);
            vec![gw1, gb1, gw2, gb2]
        }
        (
            ArchId::Cnn,
            ExtractCache::Cnn {
                x_shape,
                col1,
                c1,
                idx1,
                p1,
                col2,
                c2,
                idx2,
            },
        ) => {
            // gfeat is the flattened p2 map; pooling backward only needs the
            // element order, which flattening preserves.
            let mut gc2 = maxpool2_backward(gfeat, idx2, c2.shape());
            relu_backward_inplace(&mut gc2, c2);
            let (gp1, gw2, gb2) =
                conv2d_backward(col2, &model.extractor[2].value, &gc2, p1.shape(), true);
            let mut gc1 = maxpool2_backward(&gp1.expect("gx requested"), idx1, c1.shape());
            relu_backward_inplace(&mut gc1, c1);
            let (_, gw1, gb1) =
                conv2d_backward(col1, &model.extractor[0].value, &gc1, x_shape, false);
            vec![gw1, gb1, gw2, gb2]
        }
        _ => unreachable!("cache kind always matches arch"),
    }
}

/// Full clean forward pass: (features, logits).
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let (feat, _) = extract_features(model, batch)?;
    let (logits, _) = classify(model, &feat)?;
    Ok((feat, logits))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (bs, k) = (logits.rows(), logits.row_len());
    if labels.len() != bs {
        return Err(Error::Data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            bs
        )));
    }
    let mut grad = Tensor::zeros(&[bs, k]);
    let mut loss = 0.0;
    for r in 0..bs {
        let y = labels[r];
        if y >= k {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                y, k
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let grow = grad.row_mut(r);
        for (i, v) in row.iter().enumerate() {
            grow[i] = ((v - log_z).exp() - if i == y { 1.0 } else { 0.0 }) / bs as f64;
        }
    }
    Ok((loss / bs as f64, grad))
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy loss and gradients for every parameter, clean path.
pub fn loss_and_grads(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradSet)> {
    let (feat, ecache) = extract_features(model, batch)?;
    let (logits, ccache) = classify(model, &feat)?;
    let (loss, glogits) = softmax_cross_entropy(&logits, labels)?;
    let (gfeat, classifier) = backward_classifier(model, &ccache, &glogits);
    let extractor = backward_extractor(model, &ecache, &gfeat);
    Ok((
        loss,
        GradSet {
            extractor,
            classifier,
        },
    ))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: GradSet,
    pub v: GradSet,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl OptimState {
    pub fn new(model: &ModelParams, lr: f64) -> OptimState {
        OptimState {
            m: GradSet::zeros_like(model),
            v: GradSet::zeros_like(model),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let pd = param.data_mut();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..pd.len() {
        let g = grad.data()[i];
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// One Adam step. With `freeze_extractor` the extractor parameters and their
/// moments are left untouched bit for bit.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &GradSet,
    state: &mut OptimState,
    freeze_extractor: bool,
) -> Result<()> {
    if grads.extractor.len() != model.extractor.len()
        || grads.classifier.len() != model.classifier.len()
    {
        return Err(Error::Dimension(
            "gradient set does not match model layout".into(),
        ));
    }
    state.step += 1;
    let (lr, b1, b2, eps, t) = (
        state.lr,
        state.beta1,
        state.beta2,
        state.eps_adam,
        state.step,
    );
    if !freeze_extractor {
        for i in 0..model.extractor.len() {
            adam_update(
                &mut model.extractor[i].value,
                &grads.extractor[i],
                &mut state.m.extractor[i],
                &mut state.v.extractor[i],
                lr,
                b1,
                b2,
                eps,
                t,
            )?;
        }
    }
    for i in 0..model.classifier.len() {
        adam_update(
            &mut model.classifier[i].value,
            &grads.classifier[i],
            &mut state.m.classifier[i],
            &mut state.v.classifier[i],
            lr,
            b1,
            b2,
            eps,
            t,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_like() -> InputShape {
        InputShape::new(28, 28, 1)
    }

    #[test]
    fn init_deterministic_under_same_seed() {
        let cfg = InitConfig {
            seed: 7,
            ..Default::default()
        };
        let a = init_params(ArchId::Mlp, 10, mnist_like(), &cfg).unwrap();
        let b = init_params(ArchId::Mlp, 10, mnist_like(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_variance_init_is_all_zero() {
        let cfg = InitConfig {
            mu: 0.0,
            sigma_init: 0.0,
            seed: 1,
        };
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &cfg).unwrap();
        assert!(m.flat_values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cnn_first_layer_is_32_channels_kernel_5() {
        let m = init_params(ArchId::Cnn, 10, mnist_like(), &InitConfig::default()).unwrap();
        let w = &m.extractor[0].value;
        assert_eq!(w.shape()[0], 32);
        assert_eq!(w.shape()[1], 5);
        assert_eq!(w.shape()[2], 5);
    }

    #[test]
    fn num_classes_below_two_rejected() {
        let err = init_params(ArchId::Mlp, 1, mnist_like(), &InitConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_mlp_maps_everything_to_zero() {
        let cfg = InitConfig {
            sigma_init: 0.0,
            ..Default::default()
        };
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &cfg).unwrap();
        let batch = Tensor::from_vec(&[2, 784], (0..1568).map(|v| v as f64).collect()).unwrap();
        let (_, logits) = forward(&m, &batch).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cnn_mnist_feature_and_logit_shapes() {
        // 28x28 -> conv5 24 -> pool 12 -> conv5 8 -> pool 4, so 4*4*64 = 1024.
        let m = init_params(ArchId::Cnn, 10, mnist_like(), &InitConfig::default()).unwrap();
        let batch = Tensor::zeros(&[4, 28, 28, 1]);
        let (feat, logits) = forward(&m, &batch).unwrap();
        assert_eq!(feat.shape(), &[4, 1024]);
        assert_eq!(logits.shape(), &[4, 10]);
    }

    #[test]
    fn mlp_feature_width_is_512() {
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let batch = Tensor::zeros(&[2, 784]);
        let (feat, _) = forward(&m, &batch).unwrap();
        assert_eq!(feat.shape(), &[2, 512]);
    }

    #[test]
    fn batch_shape_mismatch_is_dimension_error() {
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let batch = Tensor::zeros(&[2, 100]);
        assert!(matches!(forward(&m, &batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let cfg = InitConfig {
            sigma_init: 0.0,
            ..Default::default()
        };
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &cfg).unwrap();
        let batch = Tensor::zeros(&[3, 784]);
        let (loss, _) = loss_and_grads(&m, &batch, &[0, 5, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_example_has_same_loss_as_single() {
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let one: Vec<f64> = (0..784).map(|v| (v as f64) / 784.0).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let b1 = Tensor::from_vec(&[1, 784], one).unwrap();
        let b2 = Tensor::from_vec(&[2, 784], two).unwrap();
        let (l1, _) = loss_and_grads(&m, &b1, &[3]).unwrap();
        let (l2, _) = loss_and_grads(&m, &b2, &[3, 3]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let batch = Tensor::zeros(&[1, 784]);
        assert!(matches!(
            loss_and_grads(&m, &batch, &[10]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let mut m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let before = m.clone();
        let grads = GradSet::zeros_like(&m);
        let mut st = OptimState::new(&m, 0.01);
        adam_step(&mut m, &grads, &mut st, false).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_freeze_keeps_extractor_bit_identical() {
        let mut m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let before = m.clone();
        let mut grads = GradSet::zeros_like(&m);
        for g in grads.extractor.iter_mut().chain(grads.classifier.iter_mut()) {
            for v in g.data_mut() {
                *v = 0.3;
            }
        }
        let mut st = OptimState::new(&m, 0.01);
        adam_step(&mut m, &grads, &mut st, true).unwrap();
        assert!(m.extractor_eq(&before));
        assert_ne!(m.classifier, before.classifier);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        // t=1, g=1: mhat = 1, vhat = 1, delta = lr / (1 + eps) ~ lr.
        let mut p = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adam_update(&mut p, &g, &mut m, &mut v, 0.01, 0.9, 0.999, 1e-8, 1).unwrap();
        assert!((p.data()[0] - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_shape_mismatch_is_dimension_error() {
        let mut m = init_params(ArchId::Mlp, 10, mnist_like(), &InitConfig::default()).unwrap();
        let mut grads = GradSet::zeros_like(&m);
        grads.classifier[0] = Tensor::zeros(&[3, 3]);
        let mut st = OptimState::new(&m, 0.01);
        assert!(matches!(
            adam_step(&mut m, &grads, &mut st, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn forward_outputs_stay_finite() {
        let m = init_params(ArchId::Cnn, 10, mnist_like(), &InitConfig::default()).unwrap();
        let batch = Tensor::from_vec(&[2 * 784], (0..1568).map(|v| (v % 7) as f64 / 7.0).collect())
            .unwrap()
            .reshape(&[2, 28, 28, 1])
            .unwrap();
        let (feat, logits) = forward(&m, &batch).unwrap();
        assert!(feat.all_finite());
        assert!(logits.all_finite());
    }
}
