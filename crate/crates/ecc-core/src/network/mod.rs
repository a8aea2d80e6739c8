//! A minimal trainable channel-structured network: convolution and
//! fully-connected layers with ReLU, cross-entropy loss with an optional
//! knowledge-distillation term, exact backpropagation, channel masking, and
//! instantiation of pruned variants from a sparsity assignment.

mod checkpoint;
mod dataset;

pub use checkpoint::{
    load_checkpoint, render_arch_text, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};
pub use dataset::{
    accuracy, load_columnar, load_raster, save_columnar, save_raster, synthetic_classification,
    BatchStream, Dataset,
};

use crate::energy::SparsityVector;
use crate::tensor::{layer_sparsity, Tensor4, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("layer {layer}: input has {got} channels, expected {expected}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: kernel {kernel:?} does not fit input {input:?} with padding {padding}")]
    KernelTooLarge {
        layer: usize,
        kernel: (usize, usize),
        input: (usize, usize),
        padding: usize,
    },
    #[error("network output is {got:?}, expected spatial 1x1 logits")]
    BadLogitsShape { got: (usize, usize, usize) },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },
    #[error("teacher logits have {got} entries, expected {expected}")]
    TeacherShape { expected: usize, got: usize },
    #[error("mask layer {layer} has {got} entries, expected {expected}")]
    MaskShape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("mask marks layer {layer} channel {channel} inactive but its weights are nonzero")]
    MaskInconsistent { layer: usize, channel: usize },
    #[error("sparsity {value} out of range [1, {max}] at layer {layer}")]
    SparsityOutOfRange { layer: usize, value: f64, max: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, padding: usize },
    FullyConnected,
}

/// Shape and behavior of one layer. A fully connected layer is the special
/// convolution with `rh = rw = 1`, applied at every spatial position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub d: usize,
    pub c: usize,
    pub rh: usize,
    pub rw: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(
        c: usize,
        d: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv { stride, padding },
            d,
            c,
            rh: kernel.0,
            rw: kernel.1,
            activation,
        }
    }

    pub fn fully_connected(c: usize, d: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            d,
            c,
            rh: 1,
            rw: 1,
            activation,
        }
    }

    pub fn stride(&self) -> usize {
        match self.kind {
            LayerKind::Conv { stride, .. } => stride,
            LayerKind::FullyConnected => 1,
        }
    }

    pub fn padding(&self) -> usize {
        match self.kind {
            LayerKind::Conv { padding, .. } => padding,
            LayerKind::FullyConnected => 0,
        }
    }

    fn validate(&self, index: usize) -> Result<(), NetworkError> {
        if self.d == 0 || self.c == 0 || self.rh == 0 || self.rw == 0 {
            return Err(NetworkError::InvalidArchitecture(format!(
                "layer {index} has a zero dimension"
            )));
        }
        if matches!(self.kind, LayerKind::FullyConnected) && (self.rh != 1 || self.rw != 1) {
            return Err(NetworkError::InvalidArchitecture(format!(
                "fully connected layer {index} must have rh = rw = 1"
            )));
        }
        if self.stride() == 0 {
            return Err(NetworkError::InvalidArchitecture(format!(
                "layer {index} has stride 0"
            )));
        }
        Ok(())
    }
}

/// Validates that consecutive layer widths chain: layer j's output channels
/// feed layer j+1's input channels.
pub fn validate_architecture(layers: &[LayerSpec]) -> Result<(), NetworkError> {
    if layers.is_empty() {
        return Err(NetworkError::InvalidArchitecture("no layers".into()));
    }
    for (i, spec) in layers.iter().enumerate() {
        spec.validate(i)?;
        if i + 1 < layers.len() && layers[i + 1].c != spec.d {
            return Err(NetworkError::InvalidArchitecture(format!(
                "layer {} outputs {} channels but layer {} expects {}",
                i,
                spec.d,
                i + 1,
                layers[i + 1].c
            )));
        }
    }
    Ok(())
}

/// Short per-layer names ("conv1", "fc2", ...) used in profile headers.
pub fn layer_names(layers: &[LayerSpec]) -> Vec<String> {
    let mut conv = 0usize;
    let mut fc = 0usize;
    layers
        .iter()
        .map(|spec| match spec.kind {
            LayerKind::Conv { .. } => {
                conv += 1;
                format!("conv{conv}")
            }
            LayerKind::FullyConnected => {
                fc += 1;
                format!("fc{fc}")
            }
        })
        .collect()
}

/// Per-layer boolean vector over input channels; `true` marks an active
/// (trainable, nonzero) channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub layers: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn all_active(layers: &[LayerSpec]) -> Self {
        ChannelMask {
            layers: layers.iter().map(|s| vec![true; s.c]).collect(),
        }
    }

    /// Mask matching the current zero pattern of a network: a channel is
    /// active exactly when its slice norm is nonzero.
    pub fn from_network_zeros(net: &Network, zero_tol: f64) -> Self {
        ChannelMask {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (0..l.weights.in_channels())
                        .map(|i| l.weights.channel_slice_norm(i).expect("in range") > zero_tol)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Ordered layers plus an optional enforced channel mask. The output
/// dimensionality is the last layer's output channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub mask: Option<ChannelMask>,
}

/// A batch of activations shaped `(n, c, h, w)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Batch {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w);
        Batch { n, c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }
}

/// Per-layer gradients matching a network's parameter shapes.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Knowledge-distillation term: temperature-softened KL divergence from the
/// teacher's distribution to the student's, scaled by `lambda * T^2`.
#[derive(Debug, Clone)]
pub struct Distillation {
    /// Teacher logits for the current batch, row-major `(n, n_out)`.
    pub teacher_logits: Vec<f64>,
    pub lambda: f64,
    pub temperature: f64,
}

impl Network {
    /// Randomly initialized dense network (He-scaled normal weights, zero
    /// biases), deterministic per seed.
    pub fn random_init(layers: &[LayerSpec], seed: u64) -> Result<Self, NetworkError> {
        validate_architecture(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = layers
            .iter()
            .map(|spec| {
                let fan_in = (spec.c * spec.rh * spec.rw) as f64;
                let std = (2.0 / fan_in).sqrt();
                let normal = Normal::new(0.0, std).expect("std > 0");
                let data: Vec<f64> = (0..spec.d * spec.c * spec.rh * spec.rw)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Layer {
                    spec: *spec,
                    weights: Tensor4::from_vec(spec.d, spec.c, spec.rh, spec.rw, data)
                        .expect("consistent dims"),
                    bias: vec![0.0; spec.d],
                }
            })
            .collect();
        Ok(Network {
            layers: built,
            mask: None,
        })
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.spec.d).unwrap_or(0)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Per-layer channel counts whose slice norm exceeds `zero_tol`.
    pub fn sparsities(&self, zero_tol: f64) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| layer_sparsity(&l.weights, zero_tol))
            .collect()
    }

    /// Current sparsities as a vector compatible with the energy model.
    pub fn sparsity_vector(&self, zero_tol: f64) -> SparsityVector {
        SparsityVector::new(
            self.sparsities(zero_tol).iter().map(|&v| v as f64).collect(),
            self.n_out(),
        )
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

fn conv_output_shape(
    layer_idx: usize,
    spec: &LayerSpec,
    h: usize,
    w: usize,
) -> Result<(usize, usize), NetworkError> {
    let (stride, pad) = (spec.stride(), spec.padding());
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    if spec.rh > ph || spec.rw > pw {
        return Err(NetworkError::KernelTooLarge {
            layer: layer_idx,
            kernel: (spec.rh, spec.rw),
            input: (h, w),
            padding: pad,
        });
    }
    Ok(((ph - spec.rh) / stride + 1, (pw - spec.rw) / stride + 1))
}

fn layer_forward(
    layer_idx: usize,
    layer: &Layer,
    input: &Batch,
) -> Result<(Batch, Batch), NetworkError> {
    let spec = &layer.spec;
    if input.c != spec.c {
        return Err(NetworkError::ChannelMismatch {
            layer: layer_idx,
            expected: spec.c,
            got: input.c,
        });
    }
    let (out_h, out_w) = conv_output_shape(layer_idx, spec, input.h, input.w)?;
    let (stride, pad) = (spec.stride(), spec.padding());
    let mut pre = Batch::zeros(input.n, spec.d, out_h, out_w);
    for b in 0..input.n {
        for o in 0..spec.d {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = layer.bias[o];
                    for i in 0..spec.c {
                        for ky in 0..spec.rh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            for kx in 0..spec.rw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                acc += layer.weights.get(o, i, ky, kx)
                                    * input.data[input.idx(b, i, iy as usize, ix as usize)];
                            }
                        }
                    }
                    let idx = pre.idx(b, o, oy, ox);
                    pre.data[idx] = acc;
                }
            }
        }
    }
    if pre.data.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::NonFinite { layer: layer_idx });
    }
    let post = match spec.activation {
        Activation::Relu => {
            let mut p = pre.clone();
            for v in p.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            p
        }
        Activation::None => pre.clone(),
    };
    Ok((pre, post))
}

struct ForwardTrace {
    /// Pre-activation output of each layer.
    pre: Vec<Batch>,
    /// Post-activation output of each layer.
    post: Vec<Batch>,
}

fn forward_trace(net: &Network, batch: &Batch) -> Result<ForwardTrace, NetworkError> {
    let mut pres = Vec::with_capacity(net.layers.len());
    let mut posts: Vec<Batch> = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let input = if idx == 0 { batch } else { &posts[idx - 1] };
        let (pre, post) = layer_forward(idx, layer, input)?;
        pres.push(pre);
        posts.push(post);
    }
    Ok(ForwardTrace {
        pre: pres,
        post: posts,
    })
}

/// Deterministic forward pass producing logits of shape `(n, n_out)`.
pub fn forward(net: &Network, batch: &Batch) -> Result<Vec<f64>, NetworkError> {
    let trace = forward_trace(net, batch)?;
    logits_from(trace.post.last().expect("nonempty network"))
}

fn logits_from(out: &Batch) -> Result<Vec<f64>, NetworkError> {
    if out.h != 1 || out.w != 1 {
        return Err(NetworkError::BadLogitsShape {
            got: (out.c, out.h, out.w),
        });
    }
    Ok(out.data.clone())
}

fn softmax_rows(logits: &[f64], n: usize, k: usize, temperature: f64) -> Vec<f64> {
    let mut probs = vec![0.0; n * k];
    for b in 0..n {
        let row = &logits[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = ((row[j] - m) / temperature).exp();
            probs[b * k + j] = e;
            z += e;
        }
        for j in 0..k {
            probs[b * k + j] /= z;
        }
    }
    probs
}

/// Mean cross-entropy of softmax logits against integer labels, plus the
/// optional distillation term; returns the loss and exact parameter
/// gradients. With an enforced mask, gradients on inactive channels are
/// zeroed so training cannot revive them.
pub fn loss_and_grad(
    net: &Network,
    batch: &Batch,
    labels: &[usize],
    kd: Option<&Distillation>,
) -> Result<(f64, Vec<LayerGrads>), NetworkError> {
    let n = batch.n;
    let k = net.n_out();
    assert_eq!(labels.len(), n, "one label per batch row");
    for &label in labels {
        if label >= k {
            return Err(NetworkError::InvalidLabel { label, classes: k });
        }
    }
    let trace = forward_trace(net, batch)?;
    let logits = logits_from(trace.post.last().expect("nonempty"))?;

    // cross-entropy with mean reduction
    let probs = softmax_rows(&logits, n, k, 1.0);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n * k];
    for b in 0..n {
        let p_label = probs[b * k + labels[b]].max(f64::MIN_POSITIVE);
        loss -= p_label.ln();
        for j in 0..k {
            dlogits[b * k + j] = (probs[b * k + j] - if j == labels[b] { 1.0 } else { 0.0 })
                / n as f64;
        }
    }
    loss /= n as f64;

    if let Some(kd) = kd {
        if kd.teacher_logits.len() != n * k {
            return Err(NetworkError::TeacherShape {
                expected: n * k,
                got: kd.teacher_logits.len(),
            });
        }
        if kd.lambda != 0.0 {
            let t = kd.temperature;
            let p_teacher = softmax_rows(&kd.teacher_logits, n, k, t);
            let p_student = softmax_rows(&logits, n, k, t);
            let mut kl = 0.0;
            for b in 0..n {
                for j in 0..k {
                    let pt = p_teacher[b * k + j];
                    if pt > 0.0 {
                        let ps = p_student[b * k + j].max(f64::MIN_POSITIVE);
                        kl += pt * (pt.ln() - ps.ln());
                    }
                    dlogits[b * k + j] += kd.lambda * t
                        * (p_student[b * k + j] - p_teacher[b * k + j])
                        / n as f64;
                }
            }
            loss += kd.lambda * t * t * kl / n as f64;
        }
    }

    let grads = backprop(net, batch, &trace, &dlogits)?;
    Ok((loss, grads))
}

fn backprop(
    net: &Network,
    batch: &Batch,
    trace: &ForwardTrace,
    dlogits: &[f64],
) -> Result<Vec<LayerGrads>, NetworkError> {
    let last = net.layers.len() - 1;
    let out = &trace.post[last];
    let mut delta = Batch::from_vec(out.n, out.c, 1, 1, dlogits.to_vec());
    let mut grads: Vec<Option<LayerGrads>> = (0..net.layers.len()).map(|_| None).collect();

    for idx in (0..net.layers.len()).rev() {
        let layer = &net.layers[idx];
        let spec = &layer.spec;
        // gradient through the activation
        let pre = &trace.pre[idx];
        if let Activation::Relu = spec.activation {
            for (dv, &pv) in delta.data.iter_mut().zip(pre.data.iter()) {
                if pv <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let input = if idx == 0 { batch } else { &trace.post[idx - 1] };
        let (stride, pad) = (spec.stride(), spec.padding());
        let mut dw = Tensor4::zeros(spec.d, spec.c, spec.rh, spec.rw);
        let mut dbias = vec![0.0; spec.d];
        let mut dinput = Batch::zeros(input.n, input.c, input.h, input.w);
        for b in 0..input.n {
            for o in 0..spec.d {
                for oy in 0..delta.h {
                    for ox in 0..delta.w {
                        let dv = delta.data[delta.idx(b, o, oy, ox)];
                        if dv == 0.0 {
                            continue;
                        }
                        dbias[o] += dv;
                        for i in 0..spec.c {
                            for ky in 0..spec.rh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= input.h as isize {
                                    continue;
                                }
                                for kx in 0..spec.rw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= input.w as isize {
                                        continue;
                                    }
                                    let in_idx = input.idx(b, i, iy as usize, ix as usize);
                                    let w_idx = layer.weights.flat_index(o, i, ky, kx);
                                    dw.data_mut()[w_idx] += dv * input.data[in_idx];
                                    dinput.data[in_idx] +=
                                        dv * layer.weights.data()[w_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
        if dw.data().iter().any(|v| !v.is_finite())
            || dbias.iter().any(|v| !v.is_finite())
        {
            return Err(NetworkError::NonFinite { layer: idx });
        }
        grads[idx] = Some(LayerGrads {
            weights: dw,
            bias: dbias,
        });
        delta = dinput;
    }

    let mut grads: Vec<LayerGrads> = grads.into_iter().map(|g| g.expect("filled")).collect();
    if let Some(mask) = &net.mask {
        zero_masked_grads(&mut grads, mask);
    }
    Ok(grads)
}

fn zero_masked_grads(grads: &mut [LayerGrads], mask: &ChannelMask) {
    for (g, layer_mask) in grads.iter_mut().zip(&mask.layers) {
        for (i, &active) in layer_mask.iter().enumerate() {
            if !active {
                let indices: Vec<usize> = g.weights.channel_slice_indices(i).collect();
                for idx in indices {
                    g.weights.data_mut()[idx] = 0.0;
                }
            }
        }
    }
}

/// Zeroes the masked channels and installs the mask so subsequent gradient
/// steps keep them at exactly zero.
pub fn apply_mask(net: &Network, mask: &ChannelMask) -> Result<Network, NetworkError> {
    if mask.layers.len() != net.layers.len() {
        return Err(NetworkError::MaskShape {
            layer: 0,
            expected: net.layers.len(),
            got: mask.layers.len(),
        });
    }
    let mut out = net.clone();
    for (idx, (layer, layer_mask)) in out.layers.iter_mut().zip(&mask.layers).enumerate() {
        if layer_mask.len() != layer.spec.c {
            return Err(NetworkError::MaskShape {
                layer: idx,
                expected: layer.spec.c,
                got: layer_mask.len(),
            });
        }
        for (i, &active) in layer_mask.iter().enumerate() {
            if !active {
                layer.weights = crate::tensor::zero_channel(&layer.weights, i)?;
            }
        }
    }
    out.mask = Some(mask.clone());
    Ok(out)
}

/// Builds a structurally pruned random network: layer u keeps
/// `floor(s_u)` input channels and, through width chaining, `floor(s_{u+1})`
/// output channels (the final layer keeps the full output dimensionality).
/// Surviving channels are the lowest-indexed ones.
pub fn instantiate_pruned(
    arch: &[LayerSpec],
    s: &SparsityVector,
    seed: u64,
) -> Result<Network, NetworkError> {
    validate_architecture(arch)?;
    if s.num_layers() != arch.len() {
        return Err(NetworkError::InvalidArchitecture(format!(
            "sparsity vector has {} entries for {} layers",
            s.num_layers(),
            arch.len()
        )));
    }
    let widths: Vec<usize> = arch
        .iter()
        .zip(s.layers())
        .enumerate()
        .map(|(idx, (spec, &sv))| {
            if sv < 1.0 || sv > spec.c as f64 {
                Err(NetworkError::SparsityOutOfRange {
                    layer: idx,
                    value: sv,
                    max: spec.c,
                })
            } else {
                Ok(sv.floor() as usize)
            }
        })
        .collect::<Result<_, _>>()?;
    let pruned: Vec<LayerSpec> = arch
        .iter()
        .enumerate()
        .map(|(idx, spec)| {
            let mut out = *spec;
            out.c = widths[idx];
            out.d = if idx + 1 < arch.len() {
                widths[idx + 1]
            } else {
                spec.d
            };
            out
        })
        .collect();
    Network::random_init(&pruned, seed)
}
