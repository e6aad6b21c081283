//! Minimal feed-forward network with exact manual gradients.
//!
//! Supports small conv/pool/dense stacks over 2-D single- or multi-channel
//! inputs. Activations use a channel-last layout (`[y][x][c]` flattened) and
//! all parameters of a model live in one flat `f64` vector so that protocol
//! code can treat a model as a plain vector. Everything is double precision;
//! forward and backward passes are sequential and bitwise deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Probabilities are clipped to this floor before taking logs.
pub const PROB_CLIP: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// One layer descriptor. Convolutions are stride 1 with zero padding that
/// preserves the spatial size; max-pooling uses non-overlapping windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

/// Shape of the activation between two layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Validated layer stack. Consecutive shapes compose and the total parameter
/// count is a pure function of the descriptor list.
#[derive(Clone, Debug)]
pub struct ModelArch {
    layers: Vec<Layer>,
    shapes: Vec<Shape>,    // shapes[0] = input, shapes[i+1] = output of layer i
    offsets: Vec<usize>,   // parameter offset of each layer
    param_count: usize,
}

impl ModelArch {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0usize;
        for (j, layer) in layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            offsets.push(off);
            let next = match *layer {
                Layer::Conv { kh, kw, cin, cout } => {
                    let Shape::Map { h, w, c } = cur else {
                        return Err(Error::BadArch(format!("layer {j}: conv on flat input")));
                    };
                    if c != cin {
                        return Err(Error::BadArch(format!(
                            "layer {j}: conv expects {cin} channels, input has {c}"
                        )));
                    }
                    if kh == 0 || kw == 0 || kh > h || kw > w {
                        return Err(Error::BadArch(format!("layer {j}: bad kernel {kh}x{kw}")));
                    }
                    off += kh * kw * cin * cout + cout;
                    Shape::Map { h, w, c: cout }
                }
                Layer::Relu => cur,
                Layer::MaxPool { window } => {
                    let Shape::Map { h, w, c } = cur else {
                        return Err(Error::BadArch(format!("layer {j}: pool on flat input")));
                    };
                    if window == 0 || window > h || window > w {
                        return Err(Error::BadArch(format!("layer {j}: bad pool window {window}")));
                    }
                    Shape::Map {
                        h: h / window,
                        w: w / window,
                        c,
                    }
                }
                Layer::Dense { inputs, outputs } => {
                    if cur.len() != inputs {
                        return Err(Error::BadArch(format!(
                            "layer {j}: dense expects {inputs} inputs, got {}",
                            cur.len()
                        )));
                    }
                    off += inputs * outputs + outputs;
                    Shape::Flat(outputs)
                }
            };
            shapes.push(next);
        }
        if shapes.last().unwrap().is_empty() {
            return Err(Error::BadArch("empty output".into()));
        }
        Ok(ModelArch {
            layers,
            shapes,
            offsets,
            param_count: off,
        })
    }

    /// Parse a layer list of the config form, e.g.
    /// `["conv 3x3 1->8", "relu", "maxpool 2", "dense 784->32"]`.
    pub fn parse(input: Shape, specs: &[String]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            layers.push(parse_layer(s)?);
        }
        ModelArch::new(input, layers)
    }

    /// The architecture used throughout the experiments: two padded 3x3
    /// convolutions with 2x2 pooling, then two dense layers down to `L`
    /// classes. 26,698 parameters on 28x28x1 inputs.
    pub fn default_mnist() -> Self {
        ModelArch::new(
            Shape::Map { h: 28, w: 28, c: 1 },
            vec![
                Layer::Conv { kh: 3, kw: 3, cin: 1, cout: 8 },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Conv { kh: 3, kw: 3, cin: 8, cout: 16 },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Dense { inputs: 784, outputs: 32 },
                Layer::Relu,
                Layer::Dense { inputs: 32, outputs: 10 },
            ],
        )
        .expect("default architecture composes")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    /// Number of classes (length of the logit vector).
    pub fn output_len(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    /// Total parameter count W.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Fan-in of each parameterised layer, in layer order.
    pub fn fan_ins(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv { kh, kw, cin, .. } => Some(kh * kw * cin),
                Layer::Dense { inputs, .. } => Some(inputs),
                _ => None,
            })
            .collect()
    }

    /// Parameter range `(weights, biases)` of layer `j`, when it has any.
    pub fn param_slices(&self, j: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let off = self.offsets[j];
        match self.layers[j] {
            Layer::Conv { kh, kw, cin, cout } => {
                let nw = kh * kw * cin * cout;
                Some((off..off + nw, off + nw..off + nw + cout))
            }
            Layer::Dense { inputs, outputs } => {
                let nw = inputs * outputs;
                Some((off..off + nw, off + nw..off + nw + outputs))
            }
            _ => None,
        }
    }
}

fn parse_layer(s: &str) -> Result<Layer> {
    let bad = || Error::BadArch(format!("cannot parse layer {s:?}"));
    let toks: Vec<&str> = s.split_whitespace().collect();
    match toks.as_slice() {
        ["relu"] => Ok(Layer::Relu),
        ["maxpool", w] => Ok(Layer::MaxPool {
            window: w.parse().map_err(|_| bad())?,
        }),
        ["conv", kern, io] => {
            let (kh, kw) = kern.split_once('x').ok_or_else(bad)?;
            let (cin, cout) = io.split_once("->").ok_or_else(bad)?;
            Ok(Layer::Conv {
                kh: kh.parse().map_err(|_| bad())?,
                kw: kw.parse().map_err(|_| bad())?,
                cin: cin.parse().map_err(|_| bad())?,
                cout: cout.parse().map_err(|_| bad())?,
            })
        }
        ["dense", io] => {
            let (i, o) = io.split_once("->").ok_or_else(bad)?;
            Ok(Layer::Dense {
                inputs: i.parse().map_err(|_| bad())?,
                outputs: o.parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

/// Render a layer list back into the config string form.
pub fn arch_strings(arch: &ModelArch) -> Vec<String> {
    arch.layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { kh, kw, cin, cout } => format!("conv {kh}x{kw} {cin}->{cout}"),
            Layer::Relu => "relu".into(),
            Layer::MaxPool { window } => format!("maxpool {window}"),
            Layer::Dense { inputs, outputs } => format!("dense {inputs}->{outputs}"),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Vectors
// ---------------------------------------------------------------------------

/// Flat vector of all model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(arch: &ModelArch) -> Self {
        WeightVector {
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn new(values: Vec<f64>, arch: &ModelArch) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "weight vector length {} != parameter count {}",
                values.len(),
                arch.param_count()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite weight entry".into()));
        }
        Ok(WeightVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Probability vector: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&p| p.is_nan() || !p.is_finite() || p < 0.0) {
            return Err(Error::ShapeMismatch("negative or non-finite probability".into()));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(format!("probabilities sum to {s}")));
        }
        Ok(())
    }

    pub fn one_hot(label: usize, len: usize) -> Self {
        let mut v = vec![0.0; len];
        v[label - 1] = 1.0;
        ProbVector(v)
    }
}

/// Per-label table: one `dim`-dimensional row per label `t` in `1..=labels`.
///
/// Used both for logit tables (`dim == labels`) and for per-label average
/// covariate tables (`dim` = covariate dimension). Row-major, label-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    labels: usize,
    dim: usize,
    data: Vec<f64>,
}

pub type LogitTable = LabelTable;

impl LabelTable {
    pub fn zeros(labels: usize, dim: usize) -> Self {
        LabelTable {
            labels,
            dim,
            data: vec![0.0; labels * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let labels = rows.len();
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged label table".into()));
        }
        Ok(LabelTable {
            labels,
            dim,
            data: rows.concat(),
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row for label `t` (1-based).
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[(t - 1) * self.dim..t * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[(t - 1) * self.dim..t * self.dim]
    }

    /// Flat row-major view (label-major).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &LabelTable) -> bool {
        self.labels == other.labels && self.dim == other.dim
    }
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(logits: &[f64]) -> ProbVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    ProbVector(out)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(logits) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Cross entropy `-sum_l a_l ln b_l` (natural log), with `b` clipped to
/// [`PROB_CLIP`] before the log.
pub fn cross_entropy(a: &ProbVector, b: &ProbVector) -> f64 {
    cross_entropy_raw(&a.0, &b.0)
}

pub(crate) fn cross_entropy_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        if ai != 0.0 {
            loss -= ai * bi.max(PROB_CLIP).ln();
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// Loss specification
// ---------------------------------------------------------------------------

/// Which loss drives an SGD step.
#[derive(Clone, Debug)]
pub enum LossSpec<'a> {
    /// Plain cross entropy against the one-hot label.
    PlainCe,
    /// Weighted sum of the label cross-entropy and a distillation
    /// cross-entropy against per-label teacher logits:
    /// `(1-beta) * ce(one_hot, pred) + beta * ce(softmax(teacher_row), pred)`.
    Distill { beta: f64, teacher: &'a LogitTable },
}

// ---------------------------------------------------------------------------
// Scratch buffers
// ---------------------------------------------------------------------------

/// Reusable buffers for one forward/backward pass. Allocate once per model
/// and reuse across iterations; the layout is tied to one [`ModelArch`].
pub struct Scratch {
    /// `acts[0]` is the input copy, `acts[i+1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Gradients at the same boundaries as `acts`.
    grads: Vec<Vec<f64>>,
    /// Argmax window index per output element of each pool layer.
    pool_idx: Vec<Vec<u8>>,
    /// Per-conv-layer weights transposed to `[ky][kx][cout][cin]`, cached
    /// once per batch for the input-gradient kernels.
    wt: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn new(arch: &ModelArch) -> Self {
        let acts: Vec<Vec<f64>> = arch.shapes.iter().map(|s| vec![0.0; s.len()]).collect();
        let grads = acts.clone();
        let pool_idx = arch
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| match l {
                Layer::MaxPool { .. } => vec![0u8; arch.shapes[j + 1].len()],
                _ => Vec::new(),
            })
            .collect();
        let wt = arch
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { kh, kw, cin, cout } => vec![0.0; kh * kw * cin * cout],
                _ => Vec::new(),
            })
            .collect();
        Scratch {
            acts,
            grads,
            pool_idx,
            wt,
        }
    }

    /// Logits of the most recent forward pass.
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    fn cache_transposed_weights(&mut self, arch: &ModelArch, w: &[f64]) {
        for (j, layer) in arch.layers.iter().enumerate() {
            if let Layer::Conv { kh, kw, cin, cout } = *layer {
                let (ws, _) = arch.param_slices(j).unwrap();
                let wts = &w[ws];
                let dst = &mut self.wt[j];
                for k in 0..kh * kw {
                    for ic in 0..cin {
                        for oc in 0..cout {
                            dst[(k * cout + oc) * cin + ic] = wts[(k * cin + ic) * cout + oc];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Forward pass for a batch of covariate vectors; one logit vector per
/// example. Validation-heavy convenience wrapper around [`forward_into`].
pub fn forward(arch: &ModelArch, w: &WeightVector, batch: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    check_weights(arch, &w.values)?;
    let mut scratch = Scratch::new(arch);
    let mut out = Vec::with_capacity(batch.len());
    for x in batch {
        if x.len() != arch.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != {}",
                x.len(),
                arch.input_len()
            )));
        }
        forward_into(arch, &w.values, x, &mut scratch);
        out.push(scratch.logits().to_vec());
    }
    Ok(out)
}

fn check_weights(arch: &ModelArch, w: &[f64]) -> Result<()> {
    if w.len() != arch.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "weight vector length {} != parameter count {}",
            w.len(),
            arch.param_count()
        )));
    }
    Ok(())
}

/// Run one example through the network, leaving all intermediate
/// activations in `scratch`. `w` must have length `arch.param_count()`.
pub fn forward_into(arch: &ModelArch, w: &[f64], input: &[f64], scratch: &mut Scratch) {
    scratch.acts[0].copy_from_slice(input);
    for (j, layer) in arch.layers.iter().enumerate() {
        let (before, after) = scratch.acts.split_at_mut(j + 1);
        let inp = &before[j];
        let out = &mut after[0];
        match *layer {
            Layer::Conv { kh, kw, cin, cout } => {
                let Shape::Map { h, w: iw, .. } = arch.shapes[j] else {
                    unreachable!()
                };
                let (ws, bs) = arch.param_slices(j).unwrap();
                match (kh, kw, cin, cout) {
                    (3, 3, 1, 8) => conv3_forward::<1, 8>(inp, h, iw, &w[ws], &w[bs], out),
                    (3, 3, 8, 16) => conv3_forward::<8, 16>(inp, h, iw, &w[ws], &w[bs], out),
                    _ => conv_forward(inp, h, iw, cin, &w[ws], &w[bs], kh, kw, cout, out),
                }
            }
            Layer::Relu => {
                for (o, &v) in out.iter_mut().zip(inp.iter()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Layer::MaxPool { window } => {
                let Shape::Map { h, w: iw, c } = arch.shapes[j] else {
                    unreachable!()
                };
                maxpool_forward(inp, h, iw, c, window, out, &mut scratch.pool_idx[j]);
            }
            Layer::Dense { inputs, outputs } => {
                let (ws, bs) = arch.param_slices(j).unwrap();
                dense_forward(inp, &w[ws], &w[bs], inputs, outputs, out);
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], x: f64, row: &[f64]) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a += x * r;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn fma_row<const C: usize>(acc: &mut [f64; C], v: f64, row: &[f64]) {
    for o in 0..C {
        acc[o] += v * row[o];
    }
}

/// 3x3 same-padding convolution specialised on channel counts. The interior
/// keeps per-pixel accumulators in registers across the whole 3x3xCIN
/// reduction, split four ways so FMA latency chains overlap; the one-pixel
/// border falls back to a clipped path.
fn conv3_forward<const CIN: usize, const COUT: usize>(
    inp: &[f64],
    h: usize,
    w: usize,
    wts: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let bias_arr: &[f64; COUT] = bias.try_into().unwrap();
    for y in 0..h {
        let interior_y = y >= 1 && y + 1 < h;
        let out_row = &mut out[y * w * COUT..][..w * COUT];
        if interior_y {
            for x in 1..w - 1 {
                let mut a0 = [0.0f64; COUT];
                let mut a1 = [0.0f64; COUT];
                let base = ((y - 1) * w + (x - 1)) * CIN;
                for ky in 0..3 {
                    // input span [x-1, x+1] x CIN matches the [kx][cin]
                    // ordering of the weight rows
                    let irow = &inp[base + ky * w * CIN..][..3 * CIN];
                    let wrow = &wts[ky * 3 * CIN * COUT..][..3 * CIN * COUT];
                    let mut i = 0;
                    while i + 2 <= 3 * CIN {
                        fma_row(&mut a0, irow[i], &wrow[i * COUT..][..COUT]);
                        fma_row(&mut a1, irow[i + 1], &wrow[(i + 1) * COUT..][..COUT]);
                        i += 2;
                    }
                    if i < 3 * CIN {
                        fma_row(&mut a0, irow[i], &wrow[i * COUT..][..COUT]);
                    }
                }
                let opx = &mut out_row[x * COUT..(x + 1) * COUT];
                for o in 0..COUT {
                    opx[o] = bias_arr[o] + (a0[o] + a1[o]);
                }
            }
            for x in [0, w - 1] {
                let acc = conv3_px_clipped::<CIN, COUT>(inp, h, w, wts, bias_arr, y, x);
                out_row[x * COUT..(x + 1) * COUT].copy_from_slice(&acc);
            }
        } else {
            for x in 0..w {
                let acc = conv3_px_clipped::<CIN, COUT>(inp, h, w, wts, bias_arr, y, x);
                out_row[x * COUT..(x + 1) * COUT].copy_from_slice(&acc);
            }
        }
    }
}

#[inline]
fn conv3_px_clipped<const CIN: usize, const COUT: usize>(
    inp: &[f64],
    h: usize,
    w: usize,
    wts: &[f64],
    bias: &[f64; COUT],
    y: usize,
    x: usize,
) -> [f64; COUT] {
    let mut acc = *bias;
    for ky in 0..3usize {
        let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < h) else {
            continue;
        };
        for kx in 0..3usize {
            let Some(ix) = (x + kx).checked_sub(1).filter(|&ix| ix < w) else {
                continue;
            };
            let ipx = &inp[(iy * w + ix) * CIN..][..CIN];
            let wr = &wts[(ky * 3 + kx) * CIN * COUT..][..CIN * COUT];
            for ic in 0..CIN {
                let v = ipx[ic];
                for o in 0..COUT {
                    acc[o] += v * wr[ic * COUT + o];
                }
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    inp: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wts: &[f64],
    bias: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    out: &mut [f64],
) {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    for px in out.chunks_exact_mut(cout) {
        px.copy_from_slice(bias);
    }
    for ky in 0..kh {
        // valid output rows for this kernel row: 0 <= y + ky - ph < h
        let ylo = ph.saturating_sub(ky);
        let yhi = (h + ph - ky).min(h);
        for kx in 0..kw {
            let xlo = pw.saturating_sub(kx);
            let xhi = (w + pw - kx).min(w);
            for ic in 0..cin {
                let wrow = &wts[((ky * kw + kx) * cin + ic) * cout..][..cout];
                for y in ylo..yhi {
                    let iy = y + ky - ph;
                    let in_row = &inp[iy * w * cin..][..w * cin];
                    let out_row = &mut out[y * w * cout..][..w * cout];
                    for x in xlo..xhi {
                        let v = in_row[(x + kx - pw) * cin + ic];
                        axpy(&mut out_row[x * cout..x * cout + cout], v, wrow);
                    }
                }
            }
        }
    }
}

fn maxpool_forward(
    inp: &[f64],
    h: usize,
    w: usize,
    c: usize,
    win: usize,
    out: &mut [f64],
    idx: &mut [u8],
) {
    let oh = h / win;
    let ow = w / win;
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0u8;
                for dy in 0..win {
                    for dx in 0..win {
                        let v = inp[((oy * win + dy) * w + ox * win + dx) * c + ch];
                        if v > best {
                            best = v;
                            best_k = (dy * win + dx) as u8;
                        }
                    }
                }
                out[o_base + ch] = best;
                idx[o_base + ch] = best_k;
            }
        }
    }
}

/// Dot product with fixed 8-lane chunking (deterministic summation order
/// that still vectorizes under strict FP semantics).
#[inline]
fn dot_chunked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Dense weights are stored one row per output: `w[o][i]` at `o * n_in + i`.
fn dense_forward(inp: &[f64], wts: &[f64], bias: &[f64], n_in: usize, n_out: usize, out: &mut [f64]) {
    for o in 0..n_out {
        out[o] = bias[o] + dot_chunked(&wts[o * n_in..][..n_in], inp);
    }
}

// ---------------------------------------------------------------------------
// Loss and gradient
// ---------------------------------------------------------------------------

/// Batch-mean loss and its exact gradient with respect to the weights.
///
/// Labels are 1-based. In distill mode the teacher row is selected by each
/// example's label and converted to a probability vector by softmax.
pub fn loss_and_gradient(
    arch: &ModelArch,
    w: &WeightVector,
    batch: &[&[f64]],
    labels: &[usize],
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>)> {
    check_weights(arch, &w.values)?;
    let mut scratch = Scratch::new(arch);
    let mut grad = vec![0.0; w.len()];
    let loss = loss_and_gradient_into(arch, &w.values, batch, labels, spec, &mut scratch, &mut grad)?;
    Ok((loss, grad))
}

/// Hot-path variant of [`loss_and_gradient`]: accumulates into caller-owned
/// buffers. `grad` is zeroed here.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient_into(
    arch: &ModelArch,
    w: &[f64],
    batch: &[&[f64]],
    labels: &[usize],
    spec: &LossSpec,
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> Result<f64> {
    loss_and_gradient_observed(arch, w, batch, labels, spec, scratch, grad, |_, _| {})
}

/// Like [`loss_and_gradient_into`], additionally reporting each example's
/// label and forward-pass logits (used for per-label logit accumulation).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient_observed(
    arch: &ModelArch,
    w: &[f64],
    batch: &[&[f64]],
    labels: &[usize],
    spec: &LossSpec,
    scratch: &mut Scratch,
    grad: &mut [f64],
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<f64> {
    let l = arch.output_len();
    if batch.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} examples with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&t| t == 0 || t > l) {
        return Err(Error::ShapeMismatch("label out of 1..=L".into()));
    }
    // Per-label teacher probability rows, computed once per call.
    let teacher_probs: Option<(f64, Vec<f64>)> = match spec {
        LossSpec::PlainCe => None,
        LossSpec::Distill { beta, teacher } => {
            if teacher.labels() != l || teacher.dim() != l {
                return Err(Error::ShapeMismatch(format!(
                    "teacher table {}x{}, expected {l}x{l}",
                    teacher.labels(),
                    teacher.dim()
                )));
            }
            let mut probs = vec![0.0; l * l];
            for t in 1..=l {
                softmax_into(teacher.row(t), &mut probs[(t - 1) * l..t * l]);
            }
            Some((*beta, probs))
        }
    };

    grad.fill(0.0);
    scratch.cache_transposed_weights(arch, w);
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; l];
    for (x, &t) in batch.iter().zip(labels) {
        if x.len() != arch.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != {}",
                x.len(),
                arch.input_len()
            )));
        }
        forward_into(arch, w, x, scratch);
        observe(t, scratch.logits());
        softmax_into(scratch.logits(), &mut probs);
        let dlogits = scratch.grads.last_mut().unwrap();
        match &teacher_probs {
            None => {
                loss += -probs[t - 1].max(PROB_CLIP).ln();
                for (d, &p) in dlogits.iter_mut().zip(&probs) {
                    *d = p * inv_b;
                }
                dlogits[t - 1] -= inv_b;
            }
            Some((beta, tp)) => {
                let trow = &tp[(t - 1) * l..t * l];
                let ce_label = -probs[t - 1].max(PROB_CLIP).ln();
                let ce_teacher = cross_entropy_raw(trow, &probs);
                loss += (1.0 - beta) * ce_label + beta * ce_teacher;
                // d/ds [(1-b) ce(onehot, sm(s)) + b ce(p_T, sm(s))]
                //   = sm(s) - [(1-b) onehot + b p_T]
                for ((d, &p), &pt) in dlogits.iter_mut().zip(&probs).zip(trow) {
                    *d = (p - beta * pt) * inv_b;
                }
                dlogits[t - 1] -= (1.0 - beta) * inv_b;
            }
        }
        backward_accumulate(arch, w, scratch, grad);
    }
    Ok(loss * inv_b)
}

/// Propagate `scratch.grads[last]` back through the network, accumulating
/// parameter gradients into `grad`. Input gradients of the first layer are
/// not materialised.
fn backward_accumulate(arch: &ModelArch, w: &[f64], scratch: &mut Scratch, grad: &mut [f64]) {
    for (j, layer) in arch.layers.iter().enumerate().rev() {
        let (gin, gout) = {
            let (a, b) = scratch.grads.split_at_mut(j + 1);
            (&mut a[j], &b[0])
        };
        let need_dinp = j > 0;
        match *layer {
            Layer::Conv { kh, kw, cin, cout } => {
                let Shape::Map { h, w: iw, .. } = arch.shapes[j] else {
                    unreachable!()
                };
                let (ws, bs) = arch.param_slices(j).unwrap();
                if need_dinp {
                    gin.fill(0.0);
                }
                match (kh, kw, cin, cout) {
                    (3, 3, 1, 8) => {
                        conv3_backward_dw::<1, 8>(&scratch.acts[j], gout, h, iw, &mut grad[ws]);
                        if need_dinp {
                            conv3_backward_dinp::<1, 8>(gout, h, iw, &scratch.wt[j], gin);
                        }
                    }
                    (3, 3, 8, 16) => {
                        conv3_backward_dw::<8, 16>(&scratch.acts[j], gout, h, iw, &mut grad[ws]);
                        if need_dinp {
                            conv3_backward_dinp::<8, 16>(gout, h, iw, &scratch.wt[j], gin);
                        }
                    }
                    _ => conv_backward(
                        &scratch.acts[j],
                        gout,
                        h,
                        iw,
                        cin,
                        kh,
                        kw,
                        cout,
                        &w[ws.clone()],
                        &mut grad[ws],
                        need_dinp.then_some(gin),
                    ),
                }
                let dbias = &mut grad[bs];
                for px in gout.chunks_exact(cout) {
                    for (b, &g) in dbias.iter_mut().zip(px) {
                        *b += g;
                    }
                }
            }
            Layer::Relu => {
                if need_dinp {
                    // relu derivative gated on the layer output
                    for ((gi, &go), &o) in gin.iter_mut().zip(gout.iter()).zip(&scratch.acts[j + 1]) {
                        *gi = if o > 0.0 { go } else { 0.0 };
                    }
                }
            }
            Layer::MaxPool { window } => {
                if need_dinp {
                    let Shape::Map { h, w: iw, c } = arch.shapes[j] else {
                        unreachable!()
                    };
                    gin.fill(0.0);
                    maxpool_backward(gout, h, iw, c, window, &scratch.pool_idx[j], gin);
                }
            }
            Layer::Dense { inputs, outputs } => {
                let (ws, bs) = arch.param_slices(j).unwrap();
                let x = &scratch.acts[j];
                let dw = &mut grad[ws.clone()];
                for o in 0..outputs {
                    let g = gout[o];
                    if g != 0.0 {
                        axpy(&mut dw[o * inputs..][..inputs], g, x);
                    }
                }
                for (b, &g) in grad[bs].iter_mut().zip(gout.iter()) {
                    *b += g;
                }
                if need_dinp {
                    let wmat = &w[arch.param_slices(j).unwrap().0];
                    gin.fill(0.0);
                    for o in 0..outputs {
                        let g = gout[o];
                        if g != 0.0 {
                            axpy(gin, g, &wmat[o * inputs..][..inputs]);
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradients for the specialised 3x3 conv: register tiles of
/// accumulators per kernel position, swept over the valid pixels. With
/// several input channels the per-channel accumulators already overlap FMA
/// latency; for CIN = 1 the pixel loop is unrolled four ways instead.
fn conv3_backward_dw<const CIN: usize, const COUT: usize>(
    inp: &[f64],
    dout: &[f64],
    h: usize,
    w: usize,
    dwts: &mut [f64],
) {
    for ky in 0..3usize {
        let ylo = 1usize.saturating_sub(ky);
        let yhi = (h + 1 - ky).min(h);
        for kx in 0..3usize {
            let xlo = 1usize.saturating_sub(kx);
            let xhi = (w + 1 - kx).min(w);
            let dw = &mut dwts[(ky * 3 + kx) * CIN * COUT..][..CIN * COUT];
            if CIN >= 4 {
                // Tile two input channels at a time so the accumulators fit
                // the vector register file; the dout rows are re-read from L1.
                let mut ic = 0;
                while ic + 2 <= CIN {
                    let mut acc0 = [0.0f64; COUT];
                    let mut acc1 = [0.0f64; COUT];
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let irow = &inp[iy * w * CIN..][..w * CIN];
                        let grow = &dout[y * w * COUT..][..w * COUT];
                        for x in xlo..xhi {
                            let ib = (x + kx - 1) * CIN + ic;
                            let g = &grow[x * COUT..][..COUT];
                            fma_row(&mut acc0, irow[ib], g);
                            fma_row(&mut acc1, irow[ib + 1], g);
                        }
                    }
                    for o in 0..COUT {
                        dw[ic * COUT + o] += acc0[o];
                        dw[(ic + 1) * COUT + o] += acc1[o];
                    }
                    ic += 2;
                }
                if ic < CIN {
                    let mut acc = [0.0f64; COUT];
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let irow = &inp[iy * w * CIN..][..w * CIN];
                        let grow = &dout[y * w * COUT..][..w * COUT];
                        for x in xlo..xhi {
                            fma_row(&mut acc, irow[(x + kx - 1) * CIN + ic], &grow[x * COUT..][..COUT]);
                        }
                    }
                    for o in 0..COUT {
                        dw[ic * COUT + o] += acc[o];
                    }
                }
            } else {
                let mut a0 = [0.0f64; COUT];
                let mut a1 = [0.0f64; COUT];
                let mut a2 = [0.0f64; COUT];
                let mut a3 = [0.0f64; COUT];
                for y in ylo..yhi {
                    let iy = y + ky - 1;
                    let irow = &inp[iy * w * CIN..][..w * CIN];
                    let grow = &dout[y * w * COUT..][..w * COUT];
                    for ic in 0..CIN {
                        let mut x = xlo;
                        while x + 4 <= xhi {
                            fma_row(&mut a0, irow[(x + kx - 1) * CIN + ic], &grow[x * COUT..][..COUT]);
                            fma_row(&mut a1, irow[(x + kx) * CIN + ic], &grow[(x + 1) * COUT..][..COUT]);
                            fma_row(&mut a2, irow[(x + kx + 1) * CIN + ic], &grow[(x + 2) * COUT..][..COUT]);
                            fma_row(&mut a3, irow[(x + kx + 2) * CIN + ic], &grow[(x + 3) * COUT..][..COUT]);
                            x += 4;
                        }
                        while x < xhi {
                            fma_row(&mut a0, irow[(x + kx - 1) * CIN + ic], &grow[x * COUT..][..COUT]);
                            x += 1;
                        }
                        for o in 0..COUT {
                            dw[ic * COUT + o] += (a0[o] + a1[o]) + (a2[o] + a3[o]);
                            a0[o] = 0.0;
                            a1[o] = 0.0;
                            a2[o] = 0.0;
                            a3[o] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Input gradients for the specialised 3x3 conv, using the transposed
/// weight cache (`[ky][kx][cout][cin]`) so the inner loop is a plain axpy.
fn conv3_backward_dinp<const CIN: usize, const COUT: usize>(
    dout: &[f64],
    h: usize,
    w: usize,
    wt: &[f64],
    dinp: &mut [f64],
) {
    for iy in 0..h {
        let interior_y = iy >= 1 && iy + 1 < h;
        let din_row = &mut dinp[iy * w * CIN..][..w * CIN];
        for ix in 0..w {
            let mut acc = [0.0f64; CIN];
            if interior_y && ix >= 1 && ix + 1 < w {
                let mut a0 = [0.0f64; CIN];
                let mut a1 = [0.0f64; CIN];
                let mut a2 = [0.0f64; CIN];
                let mut a3 = [0.0f64; CIN];
                // output pixel (y, x) = (iy - ky + 1, ix - kx + 1)
                for ky in 0..3usize {
                    let grow = &dout[(iy + 1 - ky) * w * COUT..][..w * COUT];
                    for kx in 0..3usize {
                        let g = &grow[(ix + 1 - kx) * COUT..][..COUT];
                        let wr = &wt[(ky * 3 + kx) * COUT * CIN..][..COUT * CIN];
                        let mut o = 0;
                        while o + 4 <= COUT {
                            fma_row(&mut a0, g[o], &wr[o * CIN..][..CIN]);
                            fma_row(&mut a1, g[o + 1], &wr[(o + 1) * CIN..][..CIN]);
                            fma_row(&mut a2, g[o + 2], &wr[(o + 2) * CIN..][..CIN]);
                            fma_row(&mut a3, g[o + 3], &wr[(o + 3) * CIN..][..CIN]);
                            o += 4;
                        }
                        while o < COUT {
                            fma_row(&mut a0, g[o], &wr[o * CIN..][..CIN]);
                            o += 1;
                        }
                    }
                }
                for ic in 0..CIN {
                    acc[ic] = (a0[ic] + a1[ic]) + (a2[ic] + a3[ic]);
                }
            } else {
                for ky in 0..3usize {
                    let Some(y) = (iy + 1).checked_sub(ky).filter(|&y| y < h) else {
                        continue;
                    };
                    for kx in 0..3usize {
                        let Some(x) = (ix + 1).checked_sub(kx).filter(|&x| x < w) else {
                            continue;
                        };
                        let g = &dout[(y * w + x) * COUT..][..COUT];
                        let wr = &wt[(ky * 3 + kx) * COUT * CIN..][..COUT * CIN];
                        for o in 0..COUT {
                            let gv = g[o];
                            for ic in 0..CIN {
                                acc[ic] += gv * wr[o * CIN + ic];
                            }
                        }
                    }
                }
            }
            for ic in 0..CIN {
                din_row[ix * CIN + ic] += acc[ic];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    inp: &[f64],
    dout: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    wts: &[f64],
    dwts: &mut [f64],
    mut dinp: Option<&mut [f64]>,
) {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    for ky in 0..kh {
        let ylo = ph.saturating_sub(ky);
        let yhi = (h + ph - ky).min(h);
        for kx in 0..kw {
            let xlo = pw.saturating_sub(kx);
            let xhi = (w + pw - kx).min(w);
            for ic in 0..cin {
                let widx = ((ky * kw + kx) * cin + ic) * cout;
                let wrow = &wts[widx..][..cout];
                let dwrow = &mut dwts[widx..][..cout];
                for y in ylo..yhi {
                    let iy = y + ky - ph;
                    let in_row = &inp[iy * w * cin..][..w * cin];
                    let dout_row = &dout[y * w * cout..][..w * cout];
                    match dinp.as_deref_mut() {
                        Some(di) => {
                            let di_row = &mut di[iy * w * cin..][..w * cin];
                            for x in xlo..xhi {
                                let g = &dout_row[x * cout..x * cout + cout];
                                let ix = x + kx - pw;
                                axpy(dwrow, in_row[ix * cin + ic], g);
                                di_row[ix * cin + ic] += dot(wrow, g);
                            }
                        }
                        None => {
                            for x in xlo..xhi {
                                let g = &dout_row[x * cout..x * cout + cout];
                                axpy(dwrow, in_row[(x + kx - pw) * cin + ic], g);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_backward(
    dout: &[f64],
    h: usize,
    w: usize,
    c: usize,
    win: usize,
    idx: &[u8],
    dinp: &mut [f64],
) {
    let oh = h / win;
    let ow = w / win;
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * c;
            for ch in 0..c {
                let k = idx[o_base + ch] as usize;
                let (dy, dx) = (k / win, k % win);
                dinp[((oy * win + dy) * w + ox * win + dx) * c + ch] += dout[o_base + ch];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SGD and initialization
// ---------------------------------------------------------------------------

/// One SGD step: `w' = w - alpha * g`.
pub fn sgd_step(w: &WeightVector, g: &[f64], alpha: f64) -> Result<WeightVector> {
    if w.len() != g.len() {
        return Err(Error::LengthMismatch {
            left: w.len(),
            right: g.len(),
        });
    }
    let mut out = w.clone();
    sgd_step_in_place(&mut out.values, g, alpha);
    Ok(out)
}

pub fn sgd_step_in_place(w: &mut [f64], g: &[f64], alpha: f64) {
    for (wi, &gi) in w.iter_mut().zip(g) {
        *wi -= alpha * gi;
    }
}

/// Deterministic fan-in-scaled uniform initialization; biases zero.
///
/// Weights are drawn uniformly from `[-sqrt(6/fan_in), sqrt(6/fan_in)]`,
/// which has variance `2/fan_in`.
pub fn init_weights(arch: &ModelArch, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightVector::zeros(arch);
    for j in 0..arch.layers().len() {
        let Some((ws, _bs)) = arch.param_slices(j) else {
            continue;
        };
        let fan_in = match arch.layers()[j] {
            Layer::Conv { kh, kw, cin, .. } => kh * kw * cin,
            Layer::Dense { inputs, .. } => inputs,
            _ => unreachable!(),
        };
        let a = (6.0 / fan_in as f64).sqrt();
        for v in &mut w.values[ws] {
            *v = rng.random_range(-a..=a);
        }
        // biases stay zero
    }
    w
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn toy_arch() -> ModelArch {
        // conv 3x3 1->2, relu, maxpool 2, dense 8->4, relu, dense 4->3
        ModelArch::new(
            Shape::Map { h: 4, w: 4, c: 1 },
            vec![
                Layer::Conv { kh: 3, kw: 3, cin: 1, cout: 2 },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Dense { inputs: 8, outputs: 4 },
                Layer::Relu,
                Layer::Dense { inputs: 4, outputs: 3 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn param_count_default_arch() {
        let arch = ModelArch::default_mnist();
        // conv 3x3x1x8 + 8, conv 3x3x8x16 + 16, dense 784x32 + 32, dense 32x10 + 10
        assert_eq!(arch.param_count(), 80 + 1168 + 25120 + 330);
        assert_eq!(arch.param_count(), 26698);
        assert_eq!(arch.output_len(), 10);
    }

    #[test]
    fn arch_shapes_compose() {
        let arch = ModelArch::default_mnist();
        assert_eq!(arch.shapes[3], Shape::Map { h: 14, w: 14, c: 8 });
        assert_eq!(arch.shapes[6], Shape::Map { h: 7, w: 7, c: 16 });
        assert_eq!(*arch.shapes.last().unwrap(), Shape::Flat(10));
    }

    #[test]
    fn arch_rejects_bad_compose() {
        let bad = ModelArch::new(
            Shape::Map { h: 4, w: 4, c: 1 },
            vec![Layer::Dense { inputs: 15, outputs: 2 }],
        );
        assert!(bad.is_err());
        let bad = ModelArch::new(
            Shape::Map { h: 4, w: 4, c: 2 },
            vec![Layer::Conv { kh: 3, kw: 3, cin: 1, cout: 2 }],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn arch_parse_round_trips() {
        let arch = ModelArch::default_mnist();
        let strings = arch_strings(&arch);
        let parsed = ModelArch::parse(Shape::Map { h: 28, w: 28, c: 1 }, &strings).unwrap();
        assert_eq!(parsed.layers(), arch.layers());
        assert!(ModelArch::parse(Shape::Flat(4), &["dense 4x2".into()]).is_err());
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let p = softmax(&[0.0; 10]);
        for &v in &p.0 {
            assert!(approx(v, 0.1, 1e-15));
        }
        p.validate().unwrap();
    }

    #[test]
    fn softmax_hand_value() {
        // s = [0, ln 3] -> [1/4, 3/4]
        let p = softmax(&[0.0, 3.0f64.ln()]);
        assert!(approx(p.0[0], 0.25, 1e-12));
        assert!(approx(p.0[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_shift_invariance() {
        // Inputs on a dyadic grid keep s + c exactly representable, so the
        // max-subtracted differences are bit-identical.
        let s: Vec<f64> = (0..10).map(|i| (i as f64) * 0.25 - 1.0).collect();
        for c in [-1000.0, -0.5, 0.25, 512.0, 1000.0] {
            let shifted: Vec<f64> = s.iter().map(|&v| v + c).collect();
            assert_eq!(softmax(&s).0, softmax(&shifted).0);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = softmax(&[700.0, -700.0, 0.0]);
        p.validate().unwrap();
        assert!(p.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_hand_values() {
        let uniform = ProbVector(vec![0.1; 10]);
        let onehot = ProbVector::one_hot(3, 10);
        assert!(approx(cross_entropy(&onehot, &uniform), 10.0f64.ln(), 1e-12));
        // identity case is 0 up to clipping
        assert!(cross_entropy(&onehot, &onehot).abs() <= -(1.0f64 - 1e-12).ln() + 1e-15);
        let mut half = vec![0.5 / 9.0; 10];
        half[2] = 0.5;
        assert!(approx(
            cross_entropy(&onehot, &ProbVector(half)),
            2.0f64.ln(),
            1e-12
        ));
    }

    #[test]
    fn forward_zero_weights_zero_logits() {
        let arch = toy_arch();
        let w = WeightVector::zeros(&arch);
        let x = vec![0.3; 16];
        let logits = forward(&arch, &w, &[&x]).unwrap();
        assert!(logits[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_single_dense_hand_multiply() {
        let arch = ModelArch::new(Shape::Flat(2), vec![Layer::Dense { inputs: 2, outputs: 2 }]).unwrap();
        // one row per output: w[0] = [1, 3], w[1] = [2, 4]; bias = [0.5, -0.5]
        let w = WeightVector::new(vec![1.0, 3.0, 2.0, 4.0, 0.5, -0.5], &arch).unwrap();
        let x = vec![2.0, -1.0];
        let out = forward(&arch, &w, &[&x]).unwrap();
        // out = [2*1 - 1*3 + 0.5, 2*2 - 1*4 - 0.5]
        assert_eq!(out[0], vec![-0.5, -0.5]);
    }

    #[test]
    fn forward_final_dense_scales_logits() {
        let arch = toy_arch();
        let mut w = init_weights(&arch, 7);
        let x: Vec<f64> = (0..16).map(|i| (i as f64) / 16.0).collect();
        let base = forward(&arch, &w, &[&x]).unwrap();
        let (ws, bs) = arch.param_slices(5).unwrap();
        for v in &mut w.values[ws] {
            *v *= 2.0;
        }
        for v in &mut w.values[bs] {
            *v *= 2.0;
        }
        let doubled = forward(&arch, &w, &[&x]).unwrap();
        for (a, b) in base[0].iter().zip(&doubled[0]) {
            assert!(approx(2.0 * a, *b, 1e-12));
        }
    }

    #[test]
    fn forward_shape_mismatch_errors() {
        let arch = toy_arch();
        let w = WeightVector::zeros(&arch);
        let x = vec![0.0; 15];
        assert!(forward(&arch, &w, &[&x[..]]).is_err());
    }

    #[test]
    fn loss_gradient_at_zero_weights_is_uniform_minus_onehot() {
        let arch = toy_arch();
        let w = WeightVector::zeros(&arch);
        let x = vec![0.5; 16];
        let (loss, grad) = loss_and_gradient(&arch, &w, &[&x], &[2], &LossSpec::PlainCe).unwrap();
        assert!(approx(loss, 3.0f64.ln(), 1e-12));
        // final-layer bias gradient equals dlogits = uniform - one-hot
        let (_, bs) = arch.param_slices(5).unwrap();
        let db = &grad[bs];
        assert!(approx(db[0], 1.0 / 3.0, 1e-12));
        assert!(approx(db[1], 1.0 / 3.0 - 1.0, 1e-12));
        assert!(approx(db[2], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn distill_beta_zero_matches_plain_ce_bitwise() {
        let arch = toy_arch();
        let w = init_weights(&arch, 3);
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 / 5.0).collect();
        let teacher = {
            let rows: Vec<Vec<f64>> = (0..3).map(|t| vec![t as f64, 1.0, -0.5]).collect();
            LabelTable::from_rows(&rows).unwrap()
        };
        let (l0, g0) = loss_and_gradient(&arch, &w, &[&x], &[1], &LossSpec::PlainCe).unwrap();
        let (l1, g1) = loss_and_gradient(
            &arch,
            &w,
            &[&x],
            &[1],
            &LossSpec::Distill { beta: 0.0, teacher: &teacher },
        )
        .unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn distill_beta_one_is_teacher_only() {
        let arch = toy_arch();
        let w = init_weights(&arch, 4);
        let x = vec![0.25; 16];
        let teacher = LabelTable::from_rows(&vec![vec![0.4, -0.2, 1.0]; 3]).unwrap();
        let (loss, _) = loss_and_gradient(
            &arch,
            &w,
            &[&x],
            &[2],
            &LossSpec::Distill { beta: 1.0, teacher: &teacher },
        )
        .unwrap();
        // beta = 1: loss is exactly ce(softmax(teacher row), probs)
        let logits = forward(&arch, &w, &[&x]).unwrap();
        let probs = softmax(&logits[0]);
        let tp = softmax(teacher.row(2));
        assert_eq!(loss, cross_entropy(&tp, &probs));
    }

    /// Central finite differences over sampled coordinates.
    fn finite_diff_check(arch: &ModelArch, w: &WeightVector, batch: &[&[f64]], labels: &[usize], spec: &LossSpec) {
        let (_, grad) = loss_and_gradient(arch, w, batch, labels, spec).unwrap();
        let eps = 1e-6;
        // probe every parameter of small models
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.values[i] += eps;
            let (lp, _) = loss_and_gradient(arch, &wp, batch, labels, spec).unwrap();
            let mut wm = w.clone();
            wm.values[i] -= eps;
            let (lm, _) = loss_and_gradient(arch, &wm, batch, labels, spec).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-4);
            assert!(
                (fd - grad[i]).abs() / denom <= 1e-4,
                "coord {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_plain() {
        let arch = toy_arch();
        let w = init_weights(&arch, 11);
        let x1: Vec<f64> = (0..16).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let x2: Vec<f64> = (0..16).map(|i| ((i * 5) % 11) as f64 / 11.0).collect();
        finite_diff_check(&arch, &w, &[&x1, &x2], &[1, 3], &LossSpec::PlainCe);
    }

    #[test]
    fn gradient_matches_finite_differences_distill() {
        let arch = toy_arch();
        let w = init_weights(&arch, 12);
        let x: Vec<f64> = (0..16).map(|i| ((i * 3) % 9) as f64 / 9.0).collect();
        let teacher =
            LabelTable::from_rows(&vec![vec![0.5, -1.0, 0.3], vec![0.0, 0.2, -0.4], vec![1.0, 0.0, 0.0]])
                .unwrap();
        finite_diff_check(
            &arch,
            &w,
            &[&x],
            &[2],
            &LossSpec::Distill { beta: 0.3, teacher: &teacher },
        );
    }

    #[test]
    fn sgd_step_hand_values() {
        let arch = ModelArch::new(Shape::Flat(1), vec![Layer::Dense { inputs: 1, outputs: 1 }]).unwrap();
        let w = WeightVector::new(vec![1.0, 1.0], &arch).unwrap();
        let stepped = sgd_step(&w, &[2.0, -2.0], 0.001).unwrap();
        assert_eq!(stepped.values, vec![0.998, 1.002]);
        assert_eq!(sgd_step(&w, &[0.0, 0.0], 0.5).unwrap().values, w.values);
        assert_eq!(sgd_step(&w, &[2.0, -2.0], 0.0).unwrap().values, w.values);
        assert!(sgd_step(&w, &[1.0], 0.1).is_err());
    }

    #[test]
    fn init_weights_deterministic_and_seed_sensitive() {
        let arch = toy_arch();
        let a = init_weights(&arch, 42);
        let b = init_weights(&arch, 42);
        let c = init_weights(&arch, 43);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        // biases zero
        for j in 0..arch.layers().len() {
            if let Some((_, bs)) = arch.param_slices(j) {
                assert!(a.values[bs].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weights_variance_tracks_fan_in() {
        // empirical per-layer variance within 20% of 2/fan_in over many draws
        let arch = ModelArch::new(
            Shape::Flat(50),
            vec![Layer::Dense { inputs: 50, outputs: 40 }],
        )
        .unwrap();
        let mut acc = 0.0;
        let mut n = 0usize;
        for seed in 0..20 {
            let w = init_weights(&arch, seed);
            let (ws, _) = arch.param_slices(0).unwrap();
            for &v in &w.values[ws] {
                acc += v * v;
                n += 1;
            }
        }
        let var = acc / n as f64;
        let want = 2.0 / 50.0;
        assert!(
            (var - want).abs() <= 0.2 * want,
            "variance {var} vs expected {want}"
        );
    }

    #[test]
    fn forward_deterministic() {
        let arch = ModelArch::default_mnist();
        let w = init_weights(&arch, 5);
        let x: Vec<f64> = (0..784).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let a = forward(&arch, &w, &[&x]).unwrap();
        let b = forward(&arch, &w, &[&x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_table_rows() {
        let mut t = LabelTable::zeros(3, 2);
        t.row_mut(2).copy_from_slice(&[5.0, 6.0]);
        assert_eq!(t.row(1), &[0.0, 0.0]);
        assert_eq!(t.row(2), &[5.0, 6.0]);
        assert_eq!(t.data()[2..4], [5.0, 6.0]);
    }

    #[test]
    fn specialized_conv_kernels_match_general_path() {
        // 9x9 input through conv 1->8 and conv 8->16 exercises both
        // specialised kernels; compare against the generic implementation.
        let h = 9;
        let arch = ModelArch::new(
            Shape::Map { h, w: h, c: 1 },
            vec![
                Layer::Conv { kh: 3, kw: 3, cin: 1, cout: 8 },
                Layer::Relu,
                Layer::Conv { kh: 3, kw: 3, cin: 8, cout: 16 },
                Layer::MaxPool { window: 3 },
                Layer::Dense { inputs: 144, outputs: 5 },
            ],
        )
        .unwrap();
        let w = init_weights(&arch, 9);
        let x: Vec<f64> = (0..h * h).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();

        let (loss, grad) = loss_and_gradient(&arch, &w, &[&x], &[4], &LossSpec::PlainCe).unwrap();

        // generic reference: same layers but run through the fallback kernels
        let mut scratch = Scratch::new(&arch);
        scratch.cache_transposed_weights(&arch, &w.values);
        let conv1 = arch.param_slices(0).unwrap();
        let conv2 = arch.param_slices(2).unwrap();
        let mut ref_out1 = vec![0.0; h * h * 8];
        conv_forward(&x, h, h, 1, &w.values[conv1.0.clone()], &w.values[conv1.1.clone()], 3, 3, 8, &mut ref_out1);
        let mut fast_scratch = Scratch::new(&arch);
        forward_into(&arch, &w.values, &x, &mut fast_scratch);
        for (a, b) in fast_scratch.acts[1].iter().zip(&ref_out1) {
            assert!((a - b).abs() < 1e-12);
        }
        let relu1: Vec<f64> = ref_out1.iter().map(|&v| v.max(0.0)).collect();
        let mut ref_out2 = vec![0.0; h * h * 16];
        conv_forward(&relu1, h, h, 8, &w.values[conv2.0.clone()], &w.values[conv2.1.clone()], 3, 3, 16, &mut ref_out2);
        for (a, b) in fast_scratch.acts[3].iter().zip(&ref_out2) {
            assert!((a - b).abs() < 1e-12);
        }

        // backward: generic conv_backward on the second conv must agree
        let mut dref_w = vec![0.0; conv2.0.len()];
        let mut dref_in = vec![0.0; h * h * 8];
        let dout: Vec<f64> = (0..h * h * 16).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.4).collect();
        conv_backward(&relu1, &dout, h, h, 8, 3, 3, 16, &w.values[conv2.0.clone()], &mut dref_w, Some(&mut dref_in));
        let mut dfast_w = vec![0.0; conv2.0.len()];
        let mut dfast_in = vec![0.0; h * h * 8];
        conv3_backward_dw::<8, 16>(&relu1, &dout, h, h, &mut dfast_w);
        conv3_backward_dinp::<8, 16>(&dout, h, h, &scratch.wt[2], &mut dfast_in);
        for (a, b) in dfast_w.iter().zip(&dref_w) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dfast_in.iter().zip(&dref_in) {
            assert!((a - b).abs() < 1e-10);
        }

        // and the full gradient passes a finite-difference probe on a sample
        let eps = 1e-6;
        for i in (0..w.len()).step_by(97) {
            let mut wp = w.clone();
            wp.values[i] += eps;
            let (lp, _) = loss_and_gradient(&arch, &wp, &[&x], &[4], &LossSpec::PlainCe).unwrap();
            let mut wm = w.clone();
            wm.values[i] -= eps;
            let (lm, _) = loss_and_gradient(&arch, &wm, &[&x], &[4], &LossSpec::PlainCe).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-4);
            assert!((fd - grad[i]).abs() / denom <= 1e-4, "coord {i}");
        }
        let _ = loss;
    }

    #[test]
    #[ignore = "throughput probe, run on demand"]
    fn bench_kernels() {
        let reps = 20000u32;
        let time = |f: &mut dyn FnMut()| {
            let t = std::time::Instant::now();
            for _ in 0..reps {
                f();
            }
            t.elapsed().as_secs_f64() / reps as f64 * 1e6
        };
        // conv2 shapes: 14x14, 8->16
        let inp = vec![0.5f64; 14 * 14 * 8];
        let dout = vec![0.25f64; 14 * 14 * 16];
        let mut dw = vec![0.0f64; 9 * 8 * 16];
        let wt = vec![0.1f64; 9 * 16 * 8];
        let wts = vec![0.1f64; 9 * 8 * 16];
        let bias = vec![0.0f64; 16];
        let mut out = vec![0.0f64; 14 * 14 * 16];
        let mut dinp = vec![0.0f64; 14 * 14 * 8];
        println!(
            "conv2 fwd {:.1}us  dw {:.1}us  dinp {:.1}us",
            time(&mut || conv3_forward::<8, 16>(&inp, 14, 14, &wts, &bias, &mut out)),
            time(&mut || conv3_backward_dw::<8, 16>(&inp, &dout, 14, 14, &mut dw)),
            time(&mut || {
                dinp.fill(0.0);
                conv3_backward_dinp::<8, 16>(&dout, 14, 14, &wt, &mut dinp)
            }),
        );
        // conv1 shapes: 28x28, 1->8
        let inp1 = vec![0.5f64; 28 * 28];
        let dout1 = vec![0.25f64; 28 * 28 * 8];
        let mut dw1 = vec![0.0f64; 9 * 8];
        let wts1 = vec![0.1f64; 9 * 8];
        let bias1 = vec![0.0f64; 8];
        let mut out1 = vec![0.0f64; 28 * 28 * 8];
        println!(
            "conv1 fwd {:.1}us  dw {:.1}us",
            time(&mut || conv3_forward::<1, 8>(&inp1, 28, 28, &wts1, &bias1, &mut out1)),
            time(&mut || conv3_backward_dw::<1, 8>(&inp1, &dout1, 28, 28, &mut dw1)),
        );
        // dense1: 784 -> 32, row-per-output layout
        let x = vec![0.5f64; 784];
        let wd = vec![0.1f64; 784 * 32];
        let bd = vec![0.0f64; 32];
        let gout = vec![0.25f64; 32];
        let mut od = vec![0.0f64; 32];
        let mut dwd = vec![0.0f64; 784 * 32];
        let mut gin = vec![0.0f64; 784];
        println!(
            "dense1 fwd {:.1}us  dw {:.1}us  dinp {:.1}us",
            time(&mut || dense_forward(&x, &wd, &bd, 784, 32, &mut od)),
            time(&mut || {
                for o in 0..32 {
                    axpy(&mut dwd[o * 784..][..784], gout[o], &x);
                }
            }),
            time(&mut || {
                gin.fill(0.0);
                for o in 0..32 {
                    axpy(&mut gin, gout[o], &wd[o * 784..][..784]);
                }
            }),
        );
    }

    // cargo test -p airfed --lib -- --ignored bench_sgd_throughput
    #[test]
    #[ignore = "throughput probe, run on demand"]
    fn bench_sgd_throughput() {
        let arch = ModelArch::default_mnist();
        let mut w = init_weights(&arch, 1);
        let mut scratch = Scratch::new(&arch);
        let mut grad = vec![0.0; arch.param_count()];
        let imgs: Vec<Vec<f64>> = (0..64)
            .map(|e| (0..784).map(|i| (((i + e) * 37) % 256) as f64 / 255.0).collect())
            .collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 10 + 1).collect();
        let iters = 100;
        let start = std::time::Instant::now();
        for _ in 0..iters {
            loss_and_gradient_into(&arch, &w.values, &refs, &labels, &LossSpec::PlainCe, &mut scratch, &mut grad)
                .unwrap();
            sgd_step_in_place(&mut w.values, &grad, 0.001);
        }
        let dt = start.elapsed().as_secs_f64();
        let steps = iters as f64 * 64.0;
        println!(
            "{:.0} example-steps/s ({:.2} ms per batch-64 iteration)",
            steps / dt,
            dt / iters as f64 * 1e3
        );
    }
}
