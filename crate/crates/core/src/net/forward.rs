use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::layers::{Activation, Layer, NetworkState};
use crate::error::{Error, Result};
use crate::sparse::{scores_of, sparsify_in_place};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Keeps the cache needed by [`NetworkState::backward`]; accepts dropout masks.
    Train,
    /// k-WTA only, no dropout, no cache.
    Eval,
}

/// One binary entry per filter.
pub type FilterMask = Vec<bool>;

/// Per-hook, per-sample filter masks, indexed by hook ordinal (see
/// [`NetworkState::hooks`]). `None` leaves a hook unconstrained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookMasks {
    pub per_hook: Vec<Option<Vec<FilterMask>>>,
}

impl HookMasks {
    pub fn empty(hooks: usize) -> Self {
        HookMasks { per_hook: vec![None; hooks] }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Retention masks applied before k-WTA at dropout-enabled hooks.
    pub dropout: Option<&'a HookMasks>,
    /// Kept-filter sets to reuse instead of running k-WTA selection.
    pub frozen: Option<&'a HookMasks>,
}

impl ForwardOptions<'_> {
    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, dropout: None, frozen: None }
    }

    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, dropout: None, frozen: None }
    }
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per hook, a `batch x filters` tensor of post-pipeline filter scores.
    pub activation_record: Vec<Tensor>,
    /// Per hook and sample, the filters k-WTA kept.
    pub selections: HookMasks,
    cache: Option<Vec<LayerCache>>,
}

enum LayerCache {
    Conv { cols: Vec<f64>, out: Vec<f64>, in_len: usize },
    Pool { argmax: Vec<usize>, in_len: usize },
    Flatten,
    Linear { input: Vec<f64>, out: Vec<f64> },
}

/// Parameter gradients, one tensor per parameter in [`NetworkState::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(net: &NetworkState) -> Self {
        GradientSet { tensors: net.params().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn check_matches(&self, net: &NetworkState) -> Result<()> {
        let n = net.params().count();
        if self.tensors.len() != n {
            return Err(Error::InvalidInput(format!(
                "gradient set has {} tensors for {n} parameters",
                self.tensors.len()
            )));
        }
        for (g, p) in self.tensors.iter().zip(net.params()) {
            g.expect_shape(p.shape())?;
        }
        Ok(())
    }
}

impl NetworkState {
    /// Runs the batch through every layer. At each hooked layer the pipeline
    /// is dropout pre-mask, then k-WTA, then ReLU.
    pub fn forward(&self, batch: &Tensor, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        if batch.shape().len() != self.input_shape().len() + 1 || &batch.shape()[1..] != self.input_shape() {
            let mut expected = vec![batch.shape()[0]];
            expected.extend_from_slice(self.input_shape());
            return Err(Error::ShapeMismatch { expected, actual: batch.shape().to_vec() });
        }
        let b = batch.rows();
        let hooks = self.hooks();
        self.validate_masks(opts, b, &hooks)?;

        let keep_cache = opts.mode == Mode::Train;
        let mut cache = Vec::with_capacity(if keep_cache { self.layers().len() } else { 0 });
        let mut record = Vec::with_capacity(hooks.len());
        let mut selections = HookMasks::default();
        let mut x = batch.data().to_vec();
        let mut hook_ix = 0;

        for (li, layer) in self.layers().iter().enumerate() {
            let in_shape = self.shape_at(li);
            let out_shape = self.shape_at(li + 1);
            let in_len: usize = in_shape.iter().product();
            let out_len: usize = out_shape.iter().product();
            let (mut y, entry) = match layer {
                Layer::Conv2d { weight, bias, stride, padding, .. } => {
                    let geo = ConvGeometry::new(in_shape, out_shape, weight.shape()[2], *stride, *padding);
                    let cols = geo.im2col(&x, b);
                    let y = conv_forward(&geo, weight.data(), bias.data(), &cols, b);
                    (y, Some(LayerCache::Conv { cols, out: Vec::new(), in_len }))
                }
                Layer::MaxPool2d { size } => {
                    let (y, argmax) = maxpool_forward(&x, b, in_shape, out_shape, *size);
                    (y, Some(LayerCache::Pool { argmax, in_len }))
                }
                Layer::Flatten => (x.clone(), Some(LayerCache::Flatten)),
                Layer::Linear { weight, bias, .. } => {
                    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                    let mut y = vec![0.0; b * out_dim];
                    for row in y.chunks_exact_mut(out_dim) {
                        row.copy_from_slice(bias.data());
                    }
                    gemm(b, in_dim, out_dim, &x, false, weight.data(), true, 1.0, &mut y);
                    (y, Some(LayerCache::Linear { input: x.clone(), out: Vec::new() }))
                }
            };

            match layer.activation() {
                Some(Activation::Relu) => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                Some(Activation::Sparse(cfg)) => {
                    let channels = out_shape[0];
                    let k = cfg.ratio.winners(channels);
                    let pre = opts.dropout.and_then(|m| m.per_hook[hook_ix].as_ref());
                    let frozen = opts.frozen.and_then(|m| m.per_hook[hook_ix].as_ref());
                    let mut kept = Vec::with_capacity(b);
                    let mut scores = Vec::with_capacity(b * channels);
                    for (s, sample) in y.chunks_exact_mut(out_len).enumerate() {
                        let keep = sparsify_in_place(
                            sample,
                            channels,
                            pre.map(|p| p[s].as_slice()),
                            k,
                            frozen.map(|f| f[s].as_slice()),
                        );
                        scores.extend(scores_of(sample, channels));
                        kept.push(keep);
                    }
                    record.push(Tensor::new(vec![b, channels], scores)?);
                    selections.per_hook.push(Some(kept));
                    hook_ix += 1;
                }
                Some(Activation::Identity) | None => {}
            }

            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
            if keep_cache {
                let mut entry = entry.expect("every layer yields a cache entry");
                match &mut entry {
                    LayerCache::Conv { out, .. } | LayerCache::Linear { out, .. } => *out = y.clone(),
                    _ => {}
                }
                cache.push(entry);
            }
            x = y;
        }

        Ok(ForwardOutput {
            logits: Tensor::new(vec![b, self.class_count()], x)?,
            activation_record: record,
            selections,
            cache: keep_cache.then_some(cache),
        })
    }

    /// Back-propagates `grad_logits` through the cached forward pass. Filters
    /// zeroed by a mask or by k-WTA pass no gradient.
    pub fn backward(&self, fwd: &ForwardOutput, grad_logits: &Tensor) -> Result<GradientSet> {
        let cache = fwd.cache.as_ref().ok_or(Error::MissingCache)?;
        grad_logits.expect_shape(fwd.logits.shape())?;
        let b = fwd.logits.rows();
        let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers().len()];
        let mut g = grad_logits.data().to_vec();

        for li in (0..self.layers().len()).rev() {
            let layer = &self.layers()[li];
            let need_input_grad = li > 0;
            match (&cache[li], layer) {
                (LayerCache::Conv { cols, out, in_len }, Layer::Conv2d { weight, stride, padding, activation, .. }) => {
                    mask_activation_grad(&mut g, out, *activation);
                    let geo = ConvGeometry::new(
                        self.shape_at(li),
                        self.shape_at(li + 1),
                        weight.shape()[2],
                        *stride,
                        *padding,
                    );
                    let (dw, db, dx) = conv_backward(&geo, weight, cols, &g, b, need_input_grad, *in_len);
                    grads[li] = Some((dw, db));
                    g = dx;
                }
                (LayerCache::Pool { argmax, in_len }, Layer::MaxPool2d { .. }) => {
                    let mut dx = vec![0.0; b * in_len];
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                    g = dx;
                }
                (LayerCache::Flatten, Layer::Flatten) => {}
                (LayerCache::Linear { input, out }, Layer::Linear { weight, activation, .. }) => {
                    mask_activation_grad(&mut g, out, *activation);
                    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, b, in_dim, &g, true, input, false, 0.0, &mut dw);
                    let mut db = vec![0.0; out_dim];
                    for row in g.chunks_exact(out_dim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let dx = if need_input_grad {
                        let mut dx = vec![0.0; b * in_dim];
                        gemm(b, out_dim, in_dim, &g, false, weight.data(), false, 0.0, &mut dx);
                        dx
                    } else {
                        Vec::new()
                    };
                    grads[li] = Some((Tensor::new(weight.shape().to_vec(), dw)?, Tensor::vector(db)));
                    g = dx;
                }
                _ => unreachable!("cache entries mirror the layer stack"),
            }
        }

        let tensors = grads.into_iter().flatten().flat_map(|(w, b)| [w, b]).collect();
        Ok(GradientSet { tensors })
    }

    fn validate_masks(&self, opts: ForwardOptions<'_>, batch: usize, hooks: &[super::HookInfo]) -> Result<()> {
        let check = |masks: &HookMasks, what: &str, dropout_only: bool| -> Result<()> {
            if masks.per_hook.len() != hooks.len() {
                return Err(Error::InvalidInput(format!(
                    "{what} masks cover {} hooks, network has {}",
                    masks.per_hook.len(),
                    hooks.len()
                )));
            }
            for (h, m) in hooks.iter().zip(&masks.per_hook) {
                let Some(m) = m else { continue };
                if dropout_only && !h.config.dropout {
                    return Err(Error::InvalidInput(format!(
                        "layer {} is not dropout-enabled but received a dropout mask",
                        h.layer
                    )));
                }
                if m.len() != batch || m.iter().any(|s| s.len() != h.filters) {
                    return Err(Error::InvalidInput(format!(
                        "{what} mask for layer {} must be {batch} x {}",
                        h.layer, h.filters
                    )));
                }
            }
            Ok(())
        };
        if let Some(m) = opts.dropout {
            if opts.mode == Mode::Eval {
                return Err(Error::InvalidInput("dropout masks are not applied in eval mode".into()));
            }
            check(m, "dropout", true)?;
        }
        if let Some(m) = opts.frozen {
            check(m, "frozen", false)?;
        }
        Ok(())
    }
}

impl ForwardOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

fn mask_activation_grad(g: &mut [f64], out: &[f64], act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu | Activation::Sparse(_) => {
            for (gi, &o) in g.iter_mut().zip(out) {
                if o <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], output: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            cin: input[0],
            h: input[1],
            w: input[2],
            cout: output[0],
            ho: output[1],
            wo: output[2],
            k,
            stride,
            pad,
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    /// `(cin*k*k) x (batch*ho*wo)` patch matrix.
    fn im2col(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let n = batch * self.spatial_out();
        let mut cols = vec![0.0; self.patch() * n];
        let in_len = self.cin * self.h * self.w;
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for b in 0..batch {
                        let img = &x[b * in_len + c * self.h * self.w..][..self.h * self.w];
                        for oh in 0..self.ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            let base = b * self.spatial_out() + oh * self.wo;
                            for ow in 0..self.wo {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < self.w as isize {
                                    dst[base + ow] = img[ih as usize * self.w + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], batch: usize) -> Vec<f64> {
        let n = batch * self.spatial_out();
        let in_len = self.cin * self.h * self.w;
        let mut x = vec![0.0; batch * in_len];
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for b in 0..batch {
                        let img = &mut x[b * in_len + c * self.h * self.w..][..self.h * self.w];
                        for oh in 0..self.ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            let base = b * self.spatial_out() + oh * self.wo;
                            for ow in 0..self.wo {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < self.w as isize {
                                    img[ih as usize * self.w + iw as usize] += src[base + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn conv_forward(geo: &ConvGeometry, weight: &[f64], bias: &[f64], cols: &[f64], batch: usize) -> Vec<f64> {
    let so = geo.spatial_out();
    let n = batch * so;
    let mut mat = vec![0.0; geo.cout * n];
    gemm(geo.cout, geo.patch(), n, weight, false, cols, false, 0.0, &mut mat);
    // [cout, batch, so] -> [batch, cout, so]
    let mut y = vec![0.0; batch * geo.cout * so];
    for c in 0..geo.cout {
        for b in 0..batch {
            let src = &mat[c * n + b * so..][..so];
            let dst = &mut y[(b * geo.cout + c) * so..][..so];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[c];
            }
        }
    }
    y
}

fn conv_backward(
    geo: &ConvGeometry,
    weight: &Tensor,
    cols: &[f64],
    g: &[f64],
    batch: usize,
    need_input_grad: bool,
    in_len: usize,
) -> (Tensor, Tensor, Vec<f64>) {
    let so = geo.spatial_out();
    let n = batch * so;
    let mut gmat = vec![0.0; geo.cout * n];
    let mut db = vec![0.0; geo.cout];
    for b in 0..batch {
        for c in 0..geo.cout {
            let src = &g[(b * geo.cout + c) * so..][..so];
            gmat[c * n + b * so..][..so].copy_from_slice(src);
            db[c] += src.iter().sum::<f64>();
        }
    }
    let mut dw = vec![0.0; geo.cout * geo.patch()];
    gemm(geo.cout, n, geo.patch(), &gmat, false, cols, true, 0.0, &mut dw);
    let dx = if need_input_grad {
        let mut dcols = vec![0.0; geo.patch() * n];
        gemm(geo.patch(), geo.cout, n, weight.data(), true, &gmat, false, 0.0, &mut dcols);
        let dx = geo.col2im(&dcols, batch);
        debug_assert_eq!(dx.len(), batch * in_len);
        dx
    } else {
        Vec::new()
    };
    (Tensor::new(weight.shape().to_vec(), dw).expect("weight-shaped gradient"), Tensor::vector(db), dx)
}

fn maxpool_forward(x: &[f64], batch: usize, input: &[usize], output: &[usize], size: usize) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (ho, wo) = (output[1], output[2]);
    let mut y = Vec::with_capacity(batch * c * ho * wo);
    let mut argmax = Vec::with_capacity(y.capacity());
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * size * w + ow * size;
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (oh * size + i) * w + ow * size + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (y, argmax)
}
