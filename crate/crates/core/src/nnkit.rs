//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! A forward pass can record a [`GradTape`] holding every layer input and
//! pre-activation; [`Mlp::backward`] replays it to produce parameter gradients
//! and the gradient with respect to the network input.
//!
//! Checkpoints use the little-endian `PADM` layout:
//!
//! ```text
//! "PADM" | version u32 | net_count u32
//! per net: layer_count u32, then per layer: in u32 | out u32 | activation u8 |
//!          in*out weights f64 (row-major, in x out) | out biases f64
//! meta_count u32 | meta f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::domains::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const MODEL_MAGIC: &[u8; 4] = b"PADM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::FormatViolation(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl GradTape {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("tape of a non-empty network")
    }
}

/// Parameter gradients shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.input_dim(), l.output_dim()), vec![0.0; l.output_dim()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// Random network with uniform fan-in scaled weights and zero biases.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch("layer width 0".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
                Dense {
                    weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Hidden layers use `hidden`, the last layer `output`.
    pub fn with_activations(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n).map(|i| if i + 1 == n { output } else { hidden }).collect();
        Mlp::new(dims, &acts, rng)
    }

    /// Single identity layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        Mlp {
            layers: vec![Dense {
                weights: Matrix::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network without layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} does not chain into input {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::ShapeMismatch("bias length differs from layer width".into()));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::FormatViolation("non-finite parameter".into()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.output_dim()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input_dim() * l.output_dim() + l.output_dim())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites parameters from a flat slice in [`Mlp::params`] order and
    /// returns the number consumed.
    pub fn set_params(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        pos
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&layer.weights).expect("checked shapes");
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        z
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for l in &self.layers {
            let mut z = Mlp::affine(l, &x);
            z.as_mut_slice().iter_mut().for_each(|v| *v = l.activation.apply(*v));
            x = z;
        }
        Ok(x)
    }

    pub fn forward_tape(&self, batch: &Matrix) -> Result<GradTape> {
        self.check_input(batch)?;
        let mut tape = GradTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.clone();
        for l in &self.layers {
            let z = Mlp::affine(l, &x);
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = l.activation.apply(*v));
            tape.inputs.push(x);
            tape.pre.push(z);
            x = a.clone();
            tape.outputs.push(a);
        }
        Ok(tape)
    }

    /// Back-propagates `grad_out` (same shape as the output) through a tape.
    pub fn backward(&self, tape: &GradTape, grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if grad_out.shape() != tape.output().shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                tape.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[idx];
            let a = &tape.outputs[idx];
            for ((gv, zv), av) in g.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                *gv *= l.activation.derivative(*zv, *av);
            }
            let gw = tape.inputs[idx].t_matmul(&g)?;
            let mut gb = vec![0.0; l.output_dim()];
            for row in g.row_iter() {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            let gx = g.matmul_t(&l.weights)?;
            grads.push((gw, gb));
            g = gx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

/// SGD with classical momentum over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: usize) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: vec![0.0; params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_MIN_COORDS: usize = 50;

/// Max relative error between `analytic` and central finite differences of
/// `loss` over a random subsample of at least 50 coordinates (all of them if
/// there are fewer).
///
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], coords: usize, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss(base));
    }
    let mut idx: Vec<usize> = (0..params.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(coords.max(GRAD_CHECK_MIN_COORDS).min(params.len()));
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in idx {
        let orig = work[i];
        work[i] = orig + GRAD_CHECK_STEP;
        let up = loss(&work)?;
        work[i] = orig - GRAD_CHECK_STEP;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss(if up.is_finite() { down } else { up }));
        }
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check of a loss on a network's output for a fixed batch.
///
/// `loss` maps the network output to `(value, d value / d output)`.
pub fn grad_check_mlp<L>(net: &Mlp, batch: &Matrix, loss: L, rng: &mut Rng) -> Result<f64>
where
    L: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    let tape = net.forward_tape(batch)?;
    let (_, g_out) = loss(tape.output())?;
    let (grads, _) = net.backward(&tape, &g_out)?;
    let mut probe = net.clone();
    grad_check(
        |p| {
            probe.set_params(p);
            let out = probe.forward(batch)?;
            Ok(loss(&out)?.0)
        },
        &net.params(),
        &grads.flat(),
        GRAD_CHECK_MIN_COORDS,
        rng,
    )
}

/// Serialises networks plus trailing scalar metadata into `PADM` bytes.
pub fn encode_nets(nets: &[&Mlp], meta: &[f64]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        for l in &net.layers {
            buf.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            buf.push(l.activation.code());
            for v in l.weights.as_slice().iter().chain(&l.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for v in meta {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_nets(bytes: &[u8]) -> Result<(Vec<Mlp>, Vec<f64>)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::FormatViolation("bad magic bytes, expected PADM".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::FormatViolation(format!("unsupported model version {version}")));
    }
    let count = r.u32()? as usize;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            let activation = Activation::from_code(r.take(1)?[0])?;
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                w.push(r.f64()?);
            }
            let mut bias = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bias.push(r.f64()?);
            }
            layers.push(Dense {
                weights: Matrix::from_vec(fan_in, fan_out, w)?,
                bias,
                activation,
            });
        }
        nets.push(Mlp::from_layers(layers)?);
    }
    let n_meta = r.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        meta.push(r.f64()?);
    }
    if !r.is_done() {
        return Err(Error::FormatViolation("trailing bytes after model".into()));
    }
    Ok((nets, meta))
}

pub fn save_nets(path: &Path, nets: &[&Mlp], meta: &[f64]) -> Result<()> {
    fs::write(path, encode_nets(nets, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_nets(path: &Path) -> Result<(Vec<Mlp>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nets(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Mlp {
        Mlp::from_layers(vec![
            Dense {
                weights: Matrix::from_rows(&[[1.0, -1.0], [2.0, 0.5]]).unwrap(),
                bias: vec![0.5, -0.25],
                activation: Activation::Relu,
            },
            Dense {
                weights: Matrix::from_rows(&[[1.0], [3.0]]).unwrap(),
                bias: vec![0.1],
                activation: Activation::Identity,
            },
        ])
        .unwrap()
    }

    #[test]
    fn identity_net_passes_through() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.0, 0.5, -0.5]]).unwrap();
        assert_eq!(Mlp::identity(3).forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Mlp::from_layers(vec![Dense {
            weights: Matrix::identity(2),
            bias: vec![-10.0, -10.0],
            activation: Activation::Relu,
        }])
        .unwrap();
        let out = net.forward(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_layer() {
        // x = (1, 2): h = relu(1*1 + 2*2 + 0.5, 1*-1 + 2*0.5 - 0.25) = (5.5, 0)
        // y = 5.5*1 + 0*3 + 0.1 = 5.6
        let out = fixture().forward(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert!((out[(0, 0)] - 5.6).abs() < 1e-15);
        // x = (0, 1): h = relu(2.5, 0.25) ; y = 2.5 + 0.75 + 0.1 = 3.35
        let out = fixture().forward(&Matrix::from_rows(&[[0.0, 1.0]]).unwrap()).unwrap();
        assert!((out[(0, 0)] - 3.35).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reported() {
        let err = fixture().forward(&Matrix::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
        let bad = Mlp::from_layers(vec![
            fixture().layers()[0].clone(),
            Dense { weights: Matrix::zeros(3, 1), bias: vec![0.0], activation: Activation::Identity },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn quadratic_on_linear_is_exact() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[4, 3], &[Activation::Identity], &mut rng).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.5, -1.0, 2.0], [0.2, -0.3, 0.4, 0.1]]).unwrap();
        let err = grad_check_mlp(
            &net,
            &x,
            |out| {
                let v: f64 = out.as_slice().iter().map(|o| o * o).sum::<f64>() * 0.5;
                Ok((v, out.clone()))
            },
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tanh_deep_net_gradient() {
        let mut rng = Rng::new(2);
        let net = Mlp::with_activations(&[5, 8, 6, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let err = grad_check_mlp(
            &net,
            &x,
            |out| {
                let v: f64 = out.as_slice().iter().map(|o| (o - 0.3).powi(3)).sum();
                let g = Matrix::from_vec(out.rows(), out.cols(), out.as_slice().iter().map(|o| 3.0 * (o - 0.3).powi(2)).collect())?;
                Ok((v, g))
            },
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = Rng::new(3);
        let net = Mlp::with_activations(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.2, 0.9]]).unwrap();
        let tape = net.forward_tape(&x).unwrap();
        let ones = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let (_, gx) = net.backward(&tape, &ones).unwrap();
        for j in 0..3 {
            let mut p = x.clone();
            p[(0, j)] += 1e-6;
            let mut m = x.clone();
            m[(0, j)] -= 1e-6;
            let f = |v: &Matrix| net.forward(v).unwrap().as_slice().iter().sum::<f64>();
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - gx[(0, j)]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut rng = Rng::new(0);
        let err = grad_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = Rng::new(4);
        let net = Mlp::with_activations(&[6, 16, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(net.forward_tape(&x).unwrap().output(), &a);
    }

    #[test]
    fn same_seed_same_init() {
        let a = Mlp::with_activations(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut Rng::new(9)).unwrap();
        let b = Mlp::with_activations(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(a.layers()[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn params_round_trip() {
        let mut net = fixture();
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64 * 0.1).collect();
        assert_eq!(net.set_params(&p), p.len());
        assert_eq!(net.params(), p);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut opt = Sgd::new(0.1, 0.9, 1);
        let mut p = vec![1.0];
        opt.step(&mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0]);
        // velocity 1.9
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(5);
        let a = Mlp::with_activations(&[4, 3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let b = fixture();
        let bytes = encode_nets(&[&a, &b], &[1.0, 0.5]);
        let (nets, meta) = decode_nets(&bytes).unwrap();
        assert_eq!(nets, vec![a, b]);
        assert_eq!(meta, vec![1.0, 0.5]);
        let mut broken = bytes.clone();
        broken[0] = b'Q';
        assert!(matches!(decode_nets(&broken), Err(Error::FormatViolation(_))));
        assert!(decode_nets(&bytes[..bytes.len() - 3]).is_err());
    }
}
