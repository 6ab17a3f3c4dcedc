//! Differentiable-model contract and the reference tanh MLP.
//!
//! Parameters are one flat vector plus per-tensor shapes. Layer `l` owns a
//! weight of shape `(out, in)` followed by a bias of shape `(out, 1)`; hidden
//! layers apply `tanh`, the last layer is affine. A single output unit means a
//! scalar regression head, two or more mean classification logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{contract, Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Elementwise sum; shapes must agree.
    pub fn plus(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(contract(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: crate::linalg::add(&self.data, &other.data),
        })
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Labels { classes: usize, labels: Vec<usize> },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels { classes, labels } => Targets::Labels {
                classes: *classes,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows == 0 {
            return Err(contract("empty batch"));
        }
        if inputs.rows != targets.len() {
            return Err(contract(format!(
                "{} inputs but {} targets",
                inputs.rows,
                targets.len()
            )));
        }
        if let Targets::Labels { classes, labels } = &targets {
            if *classes < 2 {
                return Err(contract("classification needs at least two classes"));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(contract(format!("label {bad} out of range [0, {classes})")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelOutput {
    Logits(Matrix),
    Scalars(Vec<f64>),
}

impl ModelOutput {
    pub fn len(&self) -> usize {
        match self {
            ModelOutput::Logits(m) => m.rows,
            ModelOutput::Scalars(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn flat(&self) -> &[f64] {
        match self {
            ModelOutput::Logits(m) => &m.data,
            ModelOutput::Scalars(v) => v,
        }
    }
}

/// Flat parameter vector θ with tensor shapes. Serializes to
/// `{"shapes": [[r, c], ...], "values": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new(shapes: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        let p = Self { shapes, values };
        p.validate()?;
        Ok(p)
    }

    /// Shapes for an MLP with the given layer widths, e.g. `[2, 32, 32, 2]`.
    pub fn shapes_for(layers: &[usize]) -> Result<Vec<(usize, usize)>> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(contract(format!("bad layer sizes {layers:?}")));
        }
        Ok(layers
            .windows(2)
            .flat_map(|w| [(w[1], w[0]), (w[1], 1)])
            .collect())
    }

    pub fn zeros(layers: &[usize]) -> Result<Self> {
        let shapes = Self::shapes_for(layers)?;
        let n = shapes.iter().map(|(r, c)| r * c).sum();
        Self::new(shapes, vec![0.0; n])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layers: &[usize], rng: &mut R) -> Result<Self> {
        let shapes = Self::shapes_for(layers)?;
        let mut values = Vec::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            if i % 2 == 0 {
                let a = (6.0 / (r + c) as f64).sqrt();
                values.extend((0..r * c).map(|_| rng.gen_range(-a..a)));
            } else {
                values.extend(std::iter::repeat_n(0.0, r));
            }
        }
        Self::new(shapes, values)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.shapes.clone(), values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].1
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].0
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.shapes.iter().step_by(2).map(|s| s.0));
        sizes
    }

    pub fn head(&self) -> Head {
        match self.output_dim() {
            1 => Head::Regression,
            c => Head::Classification { classes: c },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || !self.shapes.len().is_multiple_of(2) {
            return Err(contract("shapes must come in (weight, bias) pairs"));
        }
        let mut prev_out = None;
        for pair in self.shapes.chunks(2) {
            let (w, b) = (pair[0], pair[1]);
            if w.0 == 0 || w.1 == 0 || b != (w.0, 1) {
                return Err(contract(format!("bad layer shapes {w:?} / {b:?}")));
            }
            if let Some(p) = prev_out {
                if p != w.1 {
                    return Err(contract(format!("layer expects {} inputs, previous gives {p}", w.1)));
                }
            }
            prev_out = Some(w.0);
        }
        let expect: usize = self.shapes.iter().map(|(r, c)| r * c).sum();
        if expect != self.values.len() {
            return Err(contract(format!(
                "shapes need {expect} values, got {}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(contract("non-finite parameter"));
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut layers = Vec::new();
        let mut off = 0;
        for pair in self.shapes.chunks(2) {
            let (out, inp) = pair[0];
            layers.push(LayerSlot {
                inp,
                out,
                w: off,
                b: off + out * inp,
            });
            off += out * inp + out;
        }
        Layout { layers }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSlot {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub layers: Vec<LayerSlot>,
}

impl Layout {
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out
    }

    /// Activations for every layer; `acts[0]` is the input, the last entry the
    /// affine output. Row-major, `n` rows each.
    pub fn forward<T: Scalar>(&self, params: &[T], input: &[T], n: usize) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (l, s) in self.layers.iter().enumerate() {
            let a = &acts[l];
            let mut z = vec![T::zero(); n * s.out];
            for i in 0..n {
                let ai = &a[i * s.inp..(i + 1) * s.inp];
                for o in 0..s.out {
                    let wrow = &params[s.w + o * s.inp..s.w + (o + 1) * s.inp];
                    let mut acc = params[s.b + o];
                    for (w, x) in wrow.iter().zip(ai) {
                        acc += *w * *x;
                    }
                    z[i * s.out + o] = if l == last { acc } else { acc.tanh() };
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Reverse sweep from `d_out` (gradient w.r.t. the final affine output).
    /// Returns (gradient w.r.t. params, gradient w.r.t. input); either is
    /// skipped (empty) when not requested.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        acts: &[Vec<T>],
        d_out: &[T],
        n: usize,
        want_params: bool,
        want_input: bool,
    ) -> (Vec<T>, Vec<T>) {
        let n_params = self.layers.last().map_or(0, |s| s.b + s.out);
        let mut gp = if want_params {
            vec![T::zero(); n_params]
        } else {
            Vec::new()
        };
        let mut dz = d_out.to_vec();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            if l != last {
                // through tanh: a = tanh(z), da/dz = 1 - a^2
                let a = &acts[l + 1];
                for (g, &ai) in dz.iter_mut().zip(a) {
                    *g = *g * (T::cst(1.0) - ai * ai);
                }
            }
            let a_in = &acts[l];
            if want_params {
                for i in 0..n {
                    let ai = &a_in[i * s.inp..(i + 1) * s.inp];
                    for o in 0..s.out {
                        let g = dz[i * s.out + o];
                        let wg = &mut gp[s.w + o * s.inp..s.w + (o + 1) * s.inp];
                        for (wgk, x) in wg.iter_mut().zip(ai) {
                            *wgk += g * *x;
                        }
                        gp[s.b + o] += g;
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut da = vec![T::zero(); n * s.inp];
            for i in 0..n {
                for o in 0..s.out {
                    let g = dz[i * s.out + o];
                    let wrow = &params[s.w + o * s.inp..s.w + (o + 1) * s.inp];
                    let dai = &mut da[i * s.inp..(i + 1) * s.inp];
                    for (d, w) in dai.iter_mut().zip(wrow) {
                        *d += g * *w;
                    }
                }
            }
            dz = da;
        }
        let gi = if want_input { dz } else { Vec::new() };
        (gp, gi)
    }
}

fn check_inputs(params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols != params.input_dim() {
        return Err(contract(format!(
            "input has {} columns, model expects {}",
            inputs.cols,
            params.input_dim()
        )));
    }
    Ok(())
}

fn wrap_output(params: &ModelParams, n: usize, flat: Vec<f64>) -> ModelOutput {
    match params.head() {
        Head::Regression => ModelOutput::Scalars(flat),
        Head::Classification { classes } => ModelOutput::Logits(Matrix {
            rows: n,
            cols: classes,
            data: flat,
        }),
    }
}

pub fn mlp_forward(params: &ModelParams, inputs: &Matrix) -> Result<ModelOutput> {
    check_inputs(params, inputs)?;
    let mut acts = params
        .layout()
        .forward(&params.values, &inputs.data, inputs.rows);
    Ok(wrap_output(params, inputs.rows, acts.pop().unwrap_or_default()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable log-softmax. The shift is treated as a constant, which
/// leaves the value and all derivatives unchanged.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, z| a.max(z.re()));
    let shift = T::cst(m);
    let mut s = T::zero();
    for &z in logits {
        s += (z - shift).exp();
    }
    let lse = shift + s.ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Mean loss and its gradient w.r.t. the flat model output.
fn task_loss_and_grad(out: &[f64], n: usize, targets: &Targets) -> Result<(f64, Vec<f64>)> {
    if targets.len() != n {
        return Err(contract(format!("{n} outputs but {} targets", targets.len())));
    }
    let inv_n = 1.0 / n as f64;
    match targets {
        Targets::Labels { labels, .. } => {
            let c = out.len() / n;
            if c < 2 {
                return Err(contract("labels given for a regression head"));
            }
            let mut loss = 0.0;
            let mut g = vec![0.0; out.len()];
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(contract(format!("label {y} out of range [0, {c})")));
                }
                let row = &out[i * c..(i + 1) * c];
                let lp = log_softmax(row);
                loss -= lp[y];
                for k in 0..c {
                    let p = lp[k].exp();
                    g[i * c + k] = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
            Ok((loss * inv_n, g))
        }
        Targets::Values(ys) => {
            if out.len() != n {
                return Err(contract("real-valued targets need a scalar head"));
            }
            let mut loss = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                let r = out[i] - ys[i];
                loss += r * r;
                g[i] = 2.0 * r * inv_n;
            }
            Ok((loss * inv_n, g))
        }
    }
}

/// Batch-mean cross-entropy (labels) or squared error (real targets).
pub fn task_loss(output: &ModelOutput, targets: &Targets) -> Result<f64> {
    task_loss_and_grad(output.flat(), output.len(), targets).map(|(l, _)| l)
}

pub fn grad_params(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    loss_and_grad_params(params, batch).map(|(_, g)| g)
}

/// Clean task loss together with its parameter gradient (one forward, one backward).
pub fn loss_and_grad_params(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_inputs(params, &batch.inputs)?;
    let layout = params.layout();
    let n = batch.len();
    let acts = layout.forward(&params.values, &batch.inputs.data, n);
    let (loss, d_out) = task_loss_and_grad(acts.last().unwrap(), n, &batch.targets)?;
    let (gp, _) = layout.backward(&params.values, &acts, &d_out, n, true, false);
    Ok((loss, gp))
}

/// Scalar objective whose input gradient [`grad_input`] computes.
#[derive(Clone, Copy, Debug)]
pub enum InputObjective<'a> {
    /// Batch-mean task loss against the given targets.
    TaskLoss(&'a Targets),
    /// Batch-mean KL(reference ‖ softmax(f(x))), reference rows are probabilities.
    KlFrom(&'a Matrix),
    /// Batch-mean (reference − f(x))² for a scalar head.
    SquaredFrom(&'a [f64]),
}

pub fn grad_input(params: &ModelParams, inputs: &Matrix, objective: InputObjective<'_>) -> Result<Matrix> {
    check_inputs(params, inputs)?;
    let layout = params.layout();
    let n = inputs.rows;
    let acts = layout.forward(&params.values, &inputs.data, n);
    let out = acts.last().unwrap();
    let d_out = match objective {
        InputObjective::TaskLoss(t) => task_loss_and_grad(out, n, t)?.1,
        InputObjective::KlFrom(reference) => {
            let c = layout.output_dim();
            if c < 2 || reference.rows != n || reference.cols != c {
                return Err(contract("KL objective needs an n x C reference and a classification head"));
            }
            let mut g = vec![0.0; n * c];
            for i in 0..n {
                let q = softmax(&out[i * c..(i + 1) * c]);
                for k in 0..c {
                    g[i * c + k] = (q[k] - reference.data[i * c + k]) / n as f64;
                }
            }
            g
        }
        InputObjective::SquaredFrom(reference) => {
            if layout.output_dim() != 1 || reference.len() != n {
                return Err(contract("squared objective needs a scalar head and n references"));
            }
            out.iter()
                .zip(reference)
                .map(|(f, r)| -2.0 * (r - f) / n as f64)
                .collect()
        }
    };
    let (_, gi) = layout.backward(&params.values, &acts, &d_out, n, false, true);
    Matrix::new(n, inputs.cols, gi)
}

pub fn predict_labels(output: &ModelOutput) -> Result<Vec<usize>> {
    match output {
        ModelOutput::Logits(m) => Ok((0..m.rows)
            .map(|i| {
                let row = m.row(i);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()),
        ModelOutput::Scalars(_) => Err(contract("regression head has no labels")),
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let raw: ModelParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    ModelParams::new(raw.shapes, raw.values).map_err(|e| match e {
        Error::Contract(m) => Error::Config(format!("checkpoint {}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> Batch {
        let mut r = rng(seed);
        let x = (0..n * d).map(|_| r.gen_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
        Batch::new(Matrix::new(n, d, x).unwrap(), Targets::Labels { classes, labels }).unwrap()
    }

    /// Straightforward per-example forward pass, written independently of `Layout`.
    fn reference_forward(layers: &[usize], theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..layers.len() - 1 {
            let (inp, out) = (layers[l], layers[l + 1]);
            let w = &theta[off..off + inp * out];
            let b = &theta[off + inp * out..off + inp * out + out];
            off += inp * out + out;
            a = (0..out)
                .map(|o| {
                    let z = b[o] + (0..inp).map(|k| w[o * inp + k] * a[k]).sum::<f64>();
                    if l + 2 == layers.len() {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
        }
        a
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|j| {
                let orig = xp[j];
                xp[j] = orig + h;
                let fp = f(&xp);
                xp[j] = orig - h;
                let fm = f(&xp);
                xp[j] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let p = ModelParams::zeros(&[3, 4]).unwrap();
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]).unwrap();
        match mlp_forward(&p, &x).unwrap() {
            ModelOutput::Logits(m) => assert!(m.data.iter().all(|&v| v == 0.0)),
            _ => panic!("expected logits"),
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = ModelParams::new(vec![(2, 2), (2, 1)], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(
            mlp_forward(&p, &x).unwrap(),
            ModelOutput::Logits(Matrix::new(1, 2, vec![1.0, 2.0]).unwrap())
        );
    }

    #[test]
    fn forward_matches_independent_implementation() {
        let layers = [3, 5, 4, 3];
        let p = ModelParams::init(&layers, &mut rng(7)).unwrap();
        let mut r = rng(70);
        let x: Vec<f64> = (0..6 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out = mlp_forward(&p, &Matrix::new(6, 3, x.clone()).unwrap()).unwrap();
        let ModelOutput::Logits(m) = out else { panic!() };
        for i in 0..6 {
            let expect = reference_forward(&layers, &p.values, &x[i * 3..(i + 1) * 3]);
            for (a, b) in m.row(i).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ModelParams::zeros(&[3, 2]).unwrap();
        let x = Matrix::zeros(1, 4);
        assert!(matches!(mlp_forward(&p, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]);
        assert!(s[0] == 1.0 && s[1] >= 0.0 && s.iter().all(|v| v.is_finite()));
        let s = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in s.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let out = ModelOutput::Logits(Matrix::zeros(3, 2));
        let t = Targets::Labels {
            classes: 2,
            labels: vec![0, 1, 1],
        };
        assert!((task_loss(&out, &t).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let t = Targets::Labels {
            classes: 2,
            labels: vec![0],
        };
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 40.0] {
            let out = ModelOutput::Logits(Matrix::new(1, 2, vec![margin, 0.0]).unwrap());
            let l = task_loss(&out, &t).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut r = rng(3);
        let logits: Vec<f64> = (0..5 * 3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let labels = vec![0, 2, 1, 1, 0];
        let out = ModelOutput::Logits(Matrix::new(5, 3, logits.clone()).unwrap());
        let t = Targets::Labels {
            classes: 3,
            labels: labels.clone(),
        };
        let mut expect = 0.0;
        for i in 0..5 {
            let row = &logits[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[labels[i]].exp() / z).ln();
        }
        expect /= 5.0;
        assert!((task_loss(&out, &t).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let out = ModelOutput::Logits(Matrix::zeros(1, 2));
        let t = Targets::Labels {
            classes: 2,
            labels: vec![5],
        };
        assert!(matches!(task_loss(&out, &t), Err(Error::Contract(_))));
        assert!(Batch::new(Matrix::zeros(1, 2), t).is_err());
    }

    #[test]
    fn zero_weight_symmetric_problem_is_stationary() {
        let p = ModelParams::zeros(&[2, 2]).unwrap();
        let x = Matrix::new(2, 2, vec![1.0, 0.5, 1.0, 0.5]).unwrap();
        let b = Batch::new(
            x,
            Targets::Labels {
                classes: 2,
                labels: vec![0, 1],
            },
        )
        .unwrap();
        assert!(grad_params(&p, &b).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn linear_regression_gradient_closed_form() {
        let mut r = rng(11);
        let (n, d) = (7, 3);
        let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut vals = w.clone();
        vals.push(0.0);
        let p = ModelParams::new(vec![(1, d), (1, 1)], vals).unwrap();
        let b = Batch::new(Matrix::new(n, d, x.clone()).unwrap(), Targets::Values(y.clone())).unwrap();
        let g = grad_params(&p, &b).unwrap();
        for k in 0..d {
            let expect: f64 = (0..n)
                .map(|i| {
                    let xi = &x[i * d..(i + 1) * d];
                    let resid: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - y[i];
                    2.0 * xi[k] * resid / n as f64
                })
                .sum();
            assert!((g[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        // 51 parameters
        for seed in 0..20 {
            let layers = [4, 6, 3];
            let p = ModelParams::init(&layers, &mut rng(seed)).unwrap();
            let b = random_batch(5, 4, 3, 100 + seed);
            let g = grad_params(&p, &b).unwrap();
            let f = |v: &[f64]| {
                let q = p.with_values(v.to_vec()).unwrap();
                task_loss(&mlp_forward(&q, &b.inputs).unwrap(), &b.targets).unwrap()
            };
            let fd = fd_grad(f, &p.values, 1e-5);
            let e = crate::linalg::rel_err(&g, &fd);
            assert!(e <= 1e-6, "seed {seed}: rel err {e}");
        }
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        for seed in 0..20 {
            let p = ModelParams::init(&[3, 6, 6, 2], &mut rng(seed)).unwrap();
            let b = random_batch(4, 3, 2, 200 + seed);
            let g = grad_input(&p, &b.inputs, InputObjective::TaskLoss(&b.targets)).unwrap();
            let f = |x: &[f64]| {
                let m = Matrix::new(4, 3, x.to_vec()).unwrap();
                task_loss(&mlp_forward(&p, &m).unwrap(), &b.targets).unwrap()
            };
            let fd = fd_grad(f, &b.inputs.data, 1e-5);
            let e = crate::linalg::rel_err(&g.data, &fd);
            assert!(e <= 1e-6, "seed {seed}: rel err {e}");
        }
    }

    #[test]
    fn grad_input_constant_model_is_zero() {
        let p = ModelParams::zeros(&[3, 4, 2]).unwrap();
        let b = random_batch(3, 3, 2, 1);
        let g = grad_input(&p, &b.inputs, InputObjective::TaskLoss(&b.targets)).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_input_linear_squared_closed_form() {
        let w = [0.3, -1.2];
        let p = ModelParams::new(vec![(1, 2), (1, 1)], vec![w[0], w[1], 0.0]).unwrap();
        let x = Matrix::new(1, 2, vec![0.7, 0.4]).unwrap();
        let t = Targets::Values(vec![0.25]);
        let g = grad_input(&p, &x, InputObjective::TaskLoss(&t)).unwrap();
        let r = w[0] * 0.7 + w[1] * 0.4 - 0.25;
        assert!((g.data[0] - 2.0 * r * w[0]).abs() < 1e-15);
        assert!((g.data[1] - 2.0 * r * w[1]).abs() < 1e-15);
    }

    #[test]
    fn grad_input_rejects_mismatched_selector() {
        let p = ModelParams::zeros(&[2, 1]).unwrap();
        let x = Matrix::zeros(1, 2);
        let reference = Matrix::zeros(1, 2);
        assert!(grad_input(&p, &x, InputObjective::KlFrom(&reference)).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let p = ModelParams::init(&[2, 8, 2], &mut rng(5)).unwrap();
        let x = random_batch(10, 2, 2, 9).inputs;
        assert_eq!(mlp_forward(&p, &x).unwrap(), mlp_forward(&p, &x).unwrap());
    }

    #[test]
    fn checkpoint_json_format() {
        let p = ModelParams::new(vec![(1, 1), (1, 1)], vec![0.5, -0.25]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"shapes":[[1,1],[1,1]],"values":[0.5,-0.25]}"#);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(ModelParams::new(vec![(2, 3), (2, 1)], vec![0.0; 7]).is_err());
        assert!(ModelParams::new(vec![(2, 3), (3, 1)], vec![0.0; 9]).is_err());
        assert!(ModelParams::new(vec![(1, 1), (1, 1)], vec![f64::NAN, 0.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            z in proptest::collection::vec(-50.0f64..50.0, 2..8),
            rot in 0usize..8,
        ) {
            let s = softmax(&z);
            proptest::prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(s.iter().all(|&v| v > 0.0));
            let k = rot % z.len();
            let mut zr = z.clone();
            zr.rotate_left(k);
            let mut sr = s.clone();
            sr.rotate_left(k);
            let s2 = softmax(&zr);
            for (a, b) in s2.iter().zip(&sr) {
                proptest::prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
