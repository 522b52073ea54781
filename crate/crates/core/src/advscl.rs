//! Supervised contrastive acquisition of attack-discriminative features.
//!
//! Positives are views produced by the same attack, regardless of the class
//! the adversarial example was predicted as. The encoder output (not the
//! projection) is what later becomes each attack's domain.

use std::path::Path;

use crate::domains::{read_labeled_csv, write_labeled_csv, DomainFeatures, DomainPool};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, Matrix, Rng};
use crate::nnkit::{load_nets, save_nets, Activation, Mlp, Sgd};

/// Raw examples tagged with the attack that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExampleSet {
    inputs: Matrix,
    attack_ids: Vec<String>,
}

impl LabeledExampleSet {
    pub fn new(inputs: Matrix, attack_ids: Vec<String>) -> Result<Self> {
        if inputs.rows() != attack_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} examples but {} attack ids",
                inputs.rows(),
                attack_ids.len()
            )));
        }
        if inputs.cols() == 0 || !inputs.is_finite() {
            return Err(Error::FormatViolation("examples must be finite with dimension >= 1".into()));
        }
        let set = LabeledExampleSet { inputs, attack_ids };
        let attacks = set.attacks();
        if attacks.len() < 2 {
            return Err(Error::FormatViolation(format!(
                "need at least 2 distinct attacks, found {}",
                attacks.len()
            )));
        }
        for a in &attacks {
            let n = set.attack_ids.iter().filter(|x| *x == a).count();
            if n < 2 {
                return Err(Error::FormatViolation(format!(
                    "attack `{a}` has {n} example(s); at least 2 are needed"
                )));
            }
        }
        Ok(set)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], attack_ids: Vec<String>) -> Result<Self> {
        LabeledExampleSet::new(Matrix::from_rows(rows)?, attack_ids)
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn attack_ids(&self) -> &[String] {
        &self.attack_ids
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Distinct attack ids in order of first appearance.
    pub fn attacks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in &self.attack_ids {
            if !out.contains(id) {
                out.push(id.clone());
            }
        }
        out
    }

    /// Attack index (into [`attacks`](Self::attacks)) of every example.
    pub fn class_indices(&self) -> Vec<usize> {
        let attacks = self.attacks();
        self.attack_ids
            .iter()
            .map(|id| attacks.iter().position(|a| a == id).expect("listed"))
            .collect()
    }

    pub fn rows_of(&self, attack_id: &str) -> Matrix {
        let idx: Vec<usize> = self
            .attack_ids
            .iter()
            .enumerate()
            .filter(|(_, a)| *a == attack_id)
            .map(|(i, _)| i)
            .collect();
        self.inputs.select_rows(&idx)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(
            path,
            self.attack_ids
                .iter()
                .zip(self.inputs.row_iter())
                .map(|(id, r)| (id.as_str(), r)),
        )
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let rows = read_labeled_csv(path)?;
        let (ids, values): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().unzip();
        LabeledExampleSet::from_rows(&values, ids)
    }
}

/// `2n` unit-norm projected views with their attack labels.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub views: Matrix,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(views: Matrix, labels: Vec<usize>, temperature: f64) -> Result<Self> {
        if views.rows() != labels.len() || views.rows() % 2 != 0 || views.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} views and {} labels (need an even, positive count)",
                views.rows(),
                labels.len()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        for (i, r) in views.row_iter().enumerate() {
            if (norm2(r) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("view {i} is not unit norm")));
            }
        }
        Ok(ContrastiveBatch {
            views,
            labels,
            temperature,
        })
    }
}

fn check_positives(labels: &[usize]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, m)| j != i && m == l) {
            return Err(Error::NoPositives(i));
        }
    }
    Ok(())
}

/// Summed supervised contrastive loss over every anchor of the batch.
pub fn supcon_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(supcon_core(&batch.views, &batch.labels, batch.temperature, false)?.0)
}

/// Loss plus its gradient with respect to the (unit-norm) views.
pub fn supcon_loss_grad(batch: &ContrastiveBatch) -> Result<(f64, Matrix)> {
    let (v, g) = supcon_core(&batch.views, &batch.labels, batch.temperature, true)?;
    Ok((v, g.expect("requested")))
}

fn supcon_core(z: &Matrix, labels: &[usize], tau: f64, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    check_positives(labels)?;
    let n = z.rows();
    let sims = z.matmul_t(z)?;
    let mut loss = 0.0;
    // coefficient of s_ij in the loss, for the anchor-i term
    let mut coef = Matrix::zeros(n, n);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for a in 0..n {
            if a != i {
                max = max.max(sims[(i, a)] / tau);
            }
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (sims[(i, a)] / tau - max).exp();
            }
        }
        let lse = max + denom.ln();
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let inv_p = 1.0 / positives.len() as f64;
        let mean_pos: f64 = positives.iter().map(|&p| sims[(i, p)] / tau).sum::<f64>() * inv_p;
        loss += lse - mean_pos;
        if want_grad {
            for a in 0..n {
                if a != i {
                    coef[(i, a)] = (sims[(i, a)] / tau - lse).exp();
                }
            }
            for &p in &positives {
                coef[(i, p)] -= inv_p;
            }
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }
    // s_ij = z_i·z_j / tau, so dL/dz_i = Σ_j (c_ij + c_ji) z_j / tau
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = (coef[(i, j)] + coef[(j, i)]) / tau;
        }
    }
    Ok((loss, Some(sym.matmul(z)?)))
}

/// Row-wise L2 normalisation, returning the unit rows and the norms.
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = norm2(x.row(i)).max(1e-12);
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through `z = u / |u|` given `dz`.
pub fn normalize_rows_backward(unit: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for i in 0..unit.rows() {
        let z = unit.row(i);
        let proj = dot(z, grad.row(i));
        for (o, zv) in out.row_mut(i).iter_mut().zip(z) {
            *o = (*o - zv * proj) / norms[i];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    /// Examples per step; each contributes two views.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: f64,
    /// Std of the view jitter as a fraction of each feature's std.
    pub view_jitter: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            temperature: 0.1,
            view_jitter: 0.01,
            hidden_dim: 64,
            embed_dim: 32,
            proj_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEncoder {
    pub encoder: Mlp,
    pub projector: Mlp,
    /// Mean loss of each epoch.
    pub loss_trace: Vec<f64>,
}

impl ContrastiveEncoder {
    /// Fresh, untrained networks for `input_dim` features.
    pub fn init(input_dim: usize, cfg: &ContrastiveConfig, rng: &mut Rng) -> Result<Self> {
        let encoder = Mlp::with_activations(
            &[input_dim, cfg.hidden_dim, cfg.embed_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let projector = Mlp::with_activations(
            &[cfg.embed_dim, cfg.hidden_dim, cfg.proj_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        Ok(ContrastiveEncoder {
            encoder,
            projector,
            loss_trace: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_nets(path, &[&self.encoder, &self.projector], &self.loss_trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut nets, meta) = load_nets(path)?;
        if nets.len() != 2 {
            return Err(Error::FormatViolation(format!(
                "encoder checkpoint holds {} networks, expected 2",
                nets.len()
            )));
        }
        let projector = nets.pop().unwrap();
        let encoder = nets.pop().unwrap();
        Ok(ContrastiveEncoder {
            encoder,
            projector,
            loss_trace: meta,
        })
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let used = self.encoder.set_params(p);
        self.projector.set_params(&p[used..]);
    }

    /// Loss and flat gradient for a batch of views with labels.
    pub fn loss_and_grad(&self, views: &Matrix, labels: &[usize], temperature: f64) -> Result<(f64, Vec<f64>)> {
        let enc_tape = self.encoder.forward_tape(views)?;
        let proj_tape = self.projector.forward_tape(enc_tape.output())?;
        let (unit, norms) = normalize_rows(proj_tape.output());
        let (value, dz) = supcon_core(&unit, labels, temperature, true)?;
        let du = normalize_rows_backward(&unit, &norms, &dz.expect("requested"));
        let (g_proj, d_emb) = self.projector.backward(&proj_tape, &du)?;
        let (g_enc, _) = self.encoder.backward(&enc_tape, &d_emb)?;
        let mut flat = g_enc.flat();
        flat.extend(g_proj.flat());
        Ok((value, flat))
    }

    pub fn loss(&self, views: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
        let out = self.projector.forward(&self.encoder.forward(views)?)?;
        let (unit, _) = normalize_rows(&out);
        Ok(supcon_core(&unit, labels, temperature, false)?.0)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params()
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        out.set_params(p);
        out
    }
}

/// Per-feature standard deviation used to scale view jitter.
fn feature_std(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = x.row_iter().map(|r| r[j]).sum::<f64>() / n;
            (x.row_iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Two jittered views of every selected example, interleaved `(2k, 2k+1)`.
pub fn make_views(
    data: &LabeledExampleSet,
    indices: &[usize],
    labels: &[usize],
    sigma: &[f64],
    rng: &mut Rng,
) -> (Matrix, Vec<usize>) {
    let d = data.dim();
    let mut views = Matrix::zeros(2 * indices.len(), d);
    let mut out_labels = Vec::with_capacity(2 * indices.len());
    for (k, &idx) in indices.iter().enumerate() {
        for v in 0..2 {
            let row = views.row_mut(2 * k + v);
            for ((dst, x), s) in row.iter_mut().zip(data.inputs().row(idx)).zip(sigma) {
                *dst = x + s * rng.normal();
            }
            out_labels.push(labels[idx]);
        }
    }
    (views, out_labels)
}

/// Trains encoder and projector by SGD on the supervised contrastive loss.
pub fn train_encoder(data: &LabeledExampleSet, cfg: &ContrastiveConfig, rng: &mut Rng) -> Result<ContrastiveEncoder> {
    let mut model = ContrastiveEncoder::init(data.dim(), cfg, rng)?;
    train_from(&mut model, data, cfg, rng)?;
    Ok(model)
}

/// Continues training an existing encoder in place.
pub fn train_from(
    model: &mut ContrastiveEncoder,
    data: &LabeledExampleSet,
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let labels = data.class_indices();
    let sigma: Vec<f64> = feature_std(data.inputs()).iter().map(|s| s * cfg.view_jitter).collect();
    let mut params = model.params();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (views, view_labels) = make_views(data, chunk, &labels, &sigma, rng);
            let (value, grad) = model.loss_and_grad(&views, &view_labels, cfg.temperature)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(value));
            }
            // normalise by the number of anchors so the step size does not
            // depend on the batch size
            let scale = 1.0 / views.rows() as f64;
            let grad: Vec<f64> = grad.iter().map(|g| g * scale).collect();
            opt.step(&mut params, &grad);
            model.set_params(&params);
            total += value * scale;
            steps += 1;
        }
        model.loss_trace.push(total / steps.max(1) as f64);
    }
    Ok(())
}

/// Groups encoder outputs by attack into a domain pool.
pub fn embed_pool(encoder: &Mlp, data: &LabeledExampleSet) -> Result<DomainPool> {
    if encoder.input_dim() != data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} inputs, examples have {}",
            encoder.input_dim(),
            data.dim()
        )));
    }
    let domains = data
        .attacks()
        .into_iter()
        .map(|a| {
            let emb = encoder.forward(&data.rows_of(&a))?;
            DomainFeatures::new(a, emb)
        })
        .collect::<Result<Vec<_>>>()?;
    DomainPool::new(domains)
}
