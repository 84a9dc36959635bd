//! Small differentiable classifiers with analytic gradients.
//!
//! Every model is trained on mean cross-entropy. Parameters live in one flat
//! vector whose layout is fixed by [`ModelSpec`]:
//!
//! * `binary-logistic`: `w (input_dim)`, then `b (1)`.
//! * `softmax-regression`: `W (classes x input_dim, row-major)`, then `b (classes)`.
//! * `mlp1`: `W1 (hidden x input_dim)`, `b1 (hidden)`, `W2 (classes x hidden)`, `b2 (classes)`.
//!
//! Bias blocks are omitted when `bias` is false. The binary model labels its
//! positive class `1`; its probability rows are `(1 - p, p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix, DenseVector, SeededStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BinaryLogistic,
    SoftmaxRegression,
    Mlp1,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BinaryLogistic => "binary-logistic",
            ModelKind::SoftmaxRegression => "softmax-regression",
            ModelKind::Mlp1 => "mlp1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden width; only meaningful for `mlp1`.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl ModelSpec {
    pub fn binary_logistic(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::BinaryLogistic,
            input_dim,
            num_classes: 2,
            hidden_dim: 0,
            activation: Activation::Relu,
            bias: true,
        }
    }

    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_dim: 0,
            activation: Activation::Relu,
            bias: true,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            num_classes,
            hidden_dim,
            activation: Activation::Relu,
            bias: true,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Same architecture retargeted to `num_classes` outputs. A binary target
    /// keeps `mlp1` as a two-way softmax head and turns the linear models into
    /// `binary-logistic`.
    pub fn with_classes(self, num_classes: usize) -> Self {
        match (self.kind, num_classes) {
            (ModelKind::Mlp1, _) => Self { num_classes, ..self },
            (_, 2) => Self::binary_logistic(self.input_dim).with_bias(self.bias),
            _ => Self::softmax_regression(self.input_dim, num_classes).with_bias(self.bias),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        match self.kind {
            ModelKind::BinaryLogistic if self.num_classes != 2 => Err(Error::config(
                "model.num_classes",
                "binary-logistic has exactly 2 classes",
            )),
            ModelKind::Mlp1 if self.hidden_dim == 0 => {
                Err(Error::config("model.hidden_dim", "mlp1 needs a hidden layer"))
            }
            _ => Ok(()),
        }
    }

    /// Parameter count `d`.
    pub fn param_count(&self) -> usize {
        let b = usize::from(self.bias);
        match self.kind {
            ModelKind::BinaryLogistic => self.input_dim + b,
            ModelKind::SoftmaxRegression => self.num_classes * (self.input_dim + b),
            ModelKind::Mlp1 => self.hidden_dim * (self.input_dim + b) + self.num_classes * (self.hidden_dim + b),
        }
    }

    fn layout(&self) -> Layout {
        let b = usize::from(self.bias);
        match self.kind {
            ModelKind::BinaryLogistic => Layout {
                w1: 0,
                b1: self.input_dim,
                w2: 0,
                b2: 0,
            },
            ModelKind::SoftmaxRegression => Layout {
                w1: 0,
                b1: self.num_classes * self.input_dim,
                w2: 0,
                b2: 0,
            },
            ModelKind::Mlp1 => {
                let b1 = self.hidden_dim * self.input_dim;
                let w2 = b1 + b * self.hidden_dim;
                let b2 = w2 + self.num_classes * self.hidden_dim;
                Layout { w1: 0, b1, w2, b2 }
            }
        }
    }
}

/// Block offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Model weights tied to the spec that fixes their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    spec: ModelSpec,
    values: DenseVector,
}

impl ParameterVector {
    pub fn new(spec: ModelSpec, values: DenseVector) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::dim(format!(
                "{} model needs {} parameters, got {}",
                spec.kind.name(),
                spec.param_count(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            spec,
            values: DenseVector::zeros(spec.param_count()),
        }
    }

    /// Every block, biases included, drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init_uniform(spec: ModelSpec, rng: &mut SeededStream) -> Self {
        let mut p = Self::zeros(spec);
        let l = spec.layout();
        let v = &mut p.values;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            for j in range {
                v[j] = rng.uniform_range(-a, a);
            }
        };
        let d = spec.param_count();
        match spec.kind {
            ModelKind::BinaryLogistic | ModelKind::SoftmaxRegression => {
                fill(0..d, spec.input_dim);
            }
            ModelKind::Mlp1 => {
                fill(l.w1..l.w2, spec.input_dim);
                fill(l.w2..d, spec.hidden_dim);
            }
        }
        p
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &DenseVector {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DenseVector {
        &mut self.values
    }

    pub fn into_values(self) -> DenseVector {
        self.values
    }

    pub fn with_values(&self, values: DenseVector) -> Result<Self> {
        Self::new(self.spec, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Features (`b x input_dim`) and class labels of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn new(features: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Row `i` is the gradient of sample `i`'s loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradients {
    pub grads: DenseMatrix,
}

impl PerSampleGradients {
    pub fn batch_size(&self) -> usize {
        self.grads.rows()
    }

    pub fn dim(&self) -> usize {
        self.grads.cols()
    }
}

fn check_features(spec: &ModelSpec, features: &DenseMatrix) -> Result<()> {
    if features.cols() != spec.input_dim {
        return Err(Error::dim(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn check_batch(params: &ParameterVector, batch: &SampleBatch) -> Result<()> {
    check_parts(params, &batch.features, &batch.labels)
}

fn check_parts(params: &ParameterVector, features: &DenseMatrix, labels: &[usize]) -> Result<()> {
    let spec = params.spec();
    check_features(spec, features)?;
    if features.rows() != labels.len() {
        return Err(Error::dim("feature rows and labels differ in count"));
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::dim(format!("label {y} outside [0, {})", spec.num_classes)));
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Overwrites `z` with `softmax(z)` and returns `logsumexp(z)`.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
    max + sum.ln()
}

/// Per-model scratch buffers reused across samples.
struct Scratch {
    logits: Vec<f64>,
    raw: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    delta_h: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            logits: vec![0.0; spec.num_classes],
            raw: vec![0.0; spec.num_classes],
            pre: vec![0.0; spec.hidden_dim],
            hidden: vec![0.0; spec.hidden_dim],
            delta_h: vec![0.0; spec.hidden_dim],
        }
    }
}

/// Fills `s.logits` with class probabilities (and `s.raw` with logits) for one
/// input, returning their logsumexp. The binary model only writes its raw
/// score to `logits[0]`.
fn forward_one(spec: &ModelSpec, w: &[f64], x: &[f64], s: &mut Scratch) -> f64 {
    let l = spec.layout();
    let din = spec.input_dim;
    match spec.kind {
        ModelKind::BinaryLogistic => {
            let mut z = dot(&w[..din], x);
            if spec.bias {
                z += w[l.b1];
            }
            s.logits[0] = z;
            0.0
        }
        ModelKind::SoftmaxRegression => {
            for m in 0..spec.num_classes {
                let mut z = dot(&w[m * din..(m + 1) * din], x);
                if spec.bias {
                    z += w[l.b1 + m];
                }
                s.logits[m] = z;
            }
            s.raw.copy_from_slice(&s.logits);
            softmax_in_place(&mut s.logits)
        }
        ModelKind::Mlp1 => {
            let h = spec.hidden_dim;
            for j in 0..h {
                let mut a = dot(&w[l.w1 + j * din..l.w1 + (j + 1) * din], x);
                if spec.bias {
                    a += w[l.b1 + j];
                }
                s.pre[j] = a;
                s.hidden[j] = a.max(0.0);
            }
            for m in 0..spec.num_classes {
                let mut z = dot(&w[l.w2 + m * h..l.w2 + (m + 1) * h], &s.hidden);
                if spec.bias {
                    z += w[l.b2 + m];
                }
                s.logits[m] = z;
            }
            s.raw.copy_from_slice(&s.logits);
            softmax_in_place(&mut s.logits)
        }
    }
}

/// Loss of one sample; when `grad` is given it is overwritten with the sample gradient.
fn sample_loss_grad(
    spec: &ModelSpec,
    w: &[f64],
    x: &[f64],
    y: usize,
    grad: Option<&mut [f64]>,
    s: &mut Scratch,
) -> f64 {
    let l = spec.layout();
    let din = spec.input_dim;
    match spec.kind {
        ModelKind::BinaryLogistic => {
            forward_one(spec, w, x, s);
            let z = s.logits[0];
            let target = if y == 1 { 1.0 } else { 0.0 };
            let loss = softplus(z) - target * z;
            if let Some(g) = grad {
                let r = sigmoid(z) - target;
                for (gj, xj) in g[..din].iter_mut().zip(x) {
                    *gj = r * xj;
                }
                if spec.bias {
                    g[l.b1] = r;
                }
            }
            loss
        }
        ModelKind::SoftmaxRegression => {
            let loss = forward_one(spec, w, x, s) - s.raw[y];
            if let Some(g) = grad {
                for m in 0..spec.num_classes {
                    let r = s.logits[m] - if m == y { 1.0 } else { 0.0 };
                    for (gj, xj) in g[m * din..(m + 1) * din].iter_mut().zip(x) {
                        *gj = r * xj;
                    }
                    if spec.bias {
                        g[l.b1 + m] = r;
                    }
                }
            }
            loss
        }
        ModelKind::Mlp1 => {
            let loss = forward_one(spec, w, x, s) - s.raw[y];
            if let Some(g) = grad {
                let h = spec.hidden_dim;
                s.delta_h.iter_mut().for_each(|v| *v = 0.0);
                for m in 0..spec.num_classes {
                    let r = s.logits[m] - if m == y { 1.0 } else { 0.0 };
                    let row = l.w2 + m * h;
                    for j in 0..h {
                        g[row + j] = r * s.hidden[j];
                        s.delta_h[j] += r * w[row + j];
                    }
                    if spec.bias {
                        g[l.b2 + m] = r;
                    }
                }
                for j in 0..h {
                    // ReLU subgradient at 0 is 0
                    let da = if s.pre[j] > 0.0 { s.delta_h[j] } else { 0.0 };
                    let row = l.w1 + j * din;
                    for (gj, xj) in g[row..row + din].iter_mut().zip(x) {
                        *gj = da * xj;
                    }
                    if spec.bias {
                        g[l.b1 + j] = da;
                    }
                }
            }
            loss
        }
    }
}

/// Mean cross-entropy over the batch.
pub fn forward_loss(params: &ParameterVector, batch: &SampleBatch) -> Result<f64> {
    mean_loss(params, &batch.features, &batch.labels)
}

/// [`forward_loss`] over borrowed features and labels.
pub fn mean_loss(params: &ParameterVector, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    check_parts(params, features, labels)?;
    let spec = params.spec();
    let mut s = Scratch::new(spec);
    let total: f64 = (0..labels.len())
        .map(|i| sample_loss_grad(spec, params.values(), features.row(i), labels[i], None, &mut s))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean loss and mean gradient in one pass.
pub fn loss_and_gradient(params: &ParameterVector, batch: &SampleBatch) -> Result<(f64, DenseVector)> {
    check_batch(params, batch)?;
    let spec = params.spec();
    let d = spec.param_count();
    let mut s = Scratch::new(spec);
    let mut row = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        loss += sample_loss_grad(
            spec,
            params.values(),
            batch.features.row(i),
            batch.labels[i],
            Some(&mut row),
            &mut s,
        );
        sum.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
    }
    let b = batch.len() as f64;
    sum.iter_mut().for_each(|v| *v /= b);
    Ok((loss / b, sum.into()))
}

/// Mean gradient of the batch loss.
pub fn batch_gradient(params: &ParameterVector, batch: &SampleBatch) -> Result<DenseVector> {
    loss_and_gradient(params, batch).map(|(_, g)| g)
}

/// Un-averaged gradient of every sample, one row each.
pub fn per_sample_gradients(params: &ParameterVector, batch: &SampleBatch) -> Result<PerSampleGradients> {
    check_batch(params, batch)?;
    let spec = params.spec();
    let d = spec.param_count();
    let mut s = Scratch::new(spec);
    let mut grads = DenseMatrix::zeros(batch.len(), d);
    for i in 0..batch.len() {
        sample_loss_grad(
            spec,
            params.values(),
            batch.features.row(i),
            batch.labels[i],
            Some(grads.row_mut(i)),
            &mut s,
        );
    }
    Ok(PerSampleGradients { grads })
}

/// Class probabilities, one row per input.
pub fn predict_proba(params: &ParameterVector, features: &DenseMatrix) -> Result<DenseMatrix> {
    let spec = params.spec();
    check_features(spec, features)?;
    let mut s = Scratch::new(spec);
    let mut out = DenseMatrix::zeros(features.rows(), spec.num_classes);
    for i in 0..features.rows() {
        forward_one(spec, params.values(), features.row(i), &mut s);
        let row = out.row_mut(i);
        if spec.kind == ModelKind::BinaryLogistic {
            let p = sigmoid(s.logits[0]);
            row[0] = 1.0 - p;
            row[1] = p;
        } else {
            row.copy_from_slice(&s.logits);
        }
    }
    Ok(out)
}

/// Fraction of rows whose argmax probability matches the label.
pub fn accuracy(params: &ParameterVector, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::dim("accuracy needs one label per feature row"));
    }
    let probs = predict_proba(params, features)?;
    let hits = (0..labels.len()).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
