//! Multi-source adaptation from principal adversarial domains to a proxy.
//!
//! Every source `i` owns an aligner `Q_i` and a two-way classifier `C_i` on
//! top of a shared feature extractor `r(x) = [S(x), F(x)]`. Training
//! minimises `l_cls + λ·l_d + γ·l_disc`.

use std::path::Path;

use crate::divergence::MmdConfig;
use crate::domains::softmax_into;
use crate::error::{Error, Result};
use crate::divergence::mmd2_with_grad;
use crate::nnkit::{load_nets, save_nets, Activation, GradTape, Mlp, MlpGrads, Sgd};
use crate::numerics::{Matrix, Rng};

pub const BENIGN: usize = 0;
pub const ADVERSARIAL: usize = 1;

/// Benign and adversarial samples of one source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    pub name: String,
    pub benign: Matrix,
    pub adversarial: Matrix,
}

/// `K` labelled sources plus an unlabelled proxy mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomainSet {
    sources: Vec<SourceDomain>,
    proxy: Matrix,
}

impl SourceDomainSet {
    pub fn new(sources: Vec<SourceDomain>, proxy: Matrix) -> Result<Self> {
        if sources.len() < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 sources, got {}", sources.len())));
        }
        if proxy.rows() == 0 {
            return Err(Error::EmptyBatch("proxy set is empty".into()));
        }
        let d = proxy.cols();
        for s in &sources {
            if s.benign.rows() != s.adversarial.rows() {
                return Err(Error::InvalidInput(format!(
                    "source `{}` has {} benign and {} adversarial samples",
                    s.name,
                    s.benign.rows(),
                    s.adversarial.rows()
                )));
            }
            if s.benign.rows() < 2 {
                return Err(Error::EmptyBatch(format!("source `{}` has fewer than 2 samples per class", s.name)));
            }
            for m in [&s.benign, &s.adversarial] {
                if m.cols() != d {
                    return Err(Error::DimensionMismatch { expected: d, found: m.cols() });
                }
            }
        }
        Ok(SourceDomainSet { sources, proxy })
    }

    pub fn sources(&self) -> &[SourceDomain] {
        &self.sources
    }

    pub fn proxy(&self) -> &Matrix {
        &self.proxy
    }

    pub fn dim(&self) -> usize {
        self.proxy.cols()
    }
}

/// One minibatch per source plus a proxy minibatch.
#[derive(Debug, Clone)]
pub struct MudaBatch {
    pub sources: Vec<(Matrix, Vec<usize>)>,
    pub proxy: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MudaLosses {
    pub l_cls: f64,
    pub l_d: f64,
    pub l_disc: f64,
    pub l_total: f64,
}

/// Weights of the three loss terms in a gradient request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub d: f64,
    pub disc: f64,
}

impl LossWeights {
    pub const CLS: LossWeights = LossWeights { cls: 1.0, d: 0.0, disc: 0.0 };
    pub const D: LossWeights = LossWeights { cls: 0.0, d: 1.0, disc: 0.0 };
    pub const DISC: LossWeights = LossWeights { cls: 0.0, d: 0.0, disc: 1.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MudaModel {
    pub spatial: Mlp,
    pub freq: Mlp,
    pub q_nets: Vec<Mlp>,
    pub c_nets: Vec<Mlp>,
    pub lambda: f64,
    pub gamma: f64,
    pub mmd: MmdConfig,
}

/// Network widths of a fresh model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub afe_hidden: usize,
    pub afe_dim: usize,
    pub q_dim: usize,
    pub hidden: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            afe_hidden: 32,
            afe_dim: 16,
            q_dim: 32,
            hidden: Activation::Relu,
        }
    }
}

struct Forward {
    r_tapes: (GradTape, GradTape),
    q_tape: GradTape,
    c_tape: GradTape,
}

impl MudaModel {
    pub fn init(
        input_dim: usize,
        sources: usize,
        arch: Architecture,
        lambda: f64,
        gamma: f64,
        mmd: MmdConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let afe = |rng: &mut Rng| {
            Mlp::with_activations(&[input_dim, arch.afe_hidden, arch.afe_dim], arch.hidden, Activation::Identity, rng)
        };
        let spatial = afe(rng)?;
        let freq = afe(rng)?;
        let mut q_nets = Vec::with_capacity(sources);
        let mut c_nets = Vec::with_capacity(sources);
        for _ in 0..sources {
            q_nets.push(Mlp::new(&[2 * arch.afe_dim, arch.q_dim], &[arch.hidden], rng)?);
            c_nets.push(Mlp::new(&[arch.q_dim, 2], &[Activation::Identity], rng)?);
        }
        let model = MudaModel {
            spatial,
            freq,
            q_nets,
            c_nets,
            lambda,
            gamma,
            mmd,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.q_nets.len();
        if k < 2 || self.c_nets.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} aligners and {} classifiers (need equal counts >= 2)",
                k,
                self.c_nets.len()
            )));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::config("lambda/gamma", "must be non-negative"));
        }
        if self.spatial.input_dim() != self.freq.input_dim() {
            return Err(Error::ShapeMismatch("feature branches disagree on input size".into()));
        }
        let r_dim = self.spatial.output_dim() + self.freq.output_dim();
        for (q, c) in self.q_nets.iter().zip(&self.c_nets) {
            if q.input_dim() != r_dim || c.input_dim() != q.output_dim() || c.output_dim() != 2 {
                return Err(Error::ShapeMismatch("aligner/classifier dimensions do not chain".into()));
            }
        }
        self.mmd.validate()
    }

    pub fn sources(&self) -> usize {
        self.q_nets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spatial.input_dim()
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.spatial, &self.freq];
        v.extend(self.q_nets.iter());
        v.extend(self.c_nets.iter());
        v
    }

    /// Flat parameters in the order S, F, Q_1..Q_K, C_1..C_K.
    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut at = self.spatial.set_params(flat);
        at += self.freq.set_params(&flat[at..]);
        for q in &mut self.q_nets {
            at += q.set_params(&flat[at..]);
        }
        for c in &mut self.c_nets {
            at += c.set_params(&flat[at..]);
        }
    }

    pub fn with_params(&self, flat: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_params(flat);
        m
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Matrix::hstack(&self.spatial.forward(x)?, &self.freq.forward(x)?)
    }

    /// Class probabilities of classifier `i` for every row.
    pub fn probabilities(&self, i: usize, x: &Matrix) -> Result<Matrix> {
        let r = self.features(x)?;
        Ok(softmax_rows(&self.c_nets[i].forward(&self.q_nets[i].forward(&r)?)?))
    }

    fn afe_tapes(&self, x: &Matrix) -> Result<(GradTape, GradTape, Matrix)> {
        let s = self.spatial.forward_tape(x)?;
        let f = self.freq.forward_tape(x)?;
        let r = Matrix::hstack(s.output(), f.output())?;
        Ok((s, f, r))
    }

    fn head(&self, i: usize, r: &Matrix) -> Result<(GradTape, GradTape)> {
        let q = self.q_nets[i].forward_tape(r)?;
        let c = self.c_nets[i].forward_tape(q.output())?;
        Ok((q, c))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = [
            self.sources() as f64,
            self.lambda,
            self.gamma,
            self.mmd.kernel_count as f64,
            self.mmd.bandwidth_base,
            self.mmd.bandwidth_step,
        ];
        save_nets(path, &self.nets(), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (nets, meta) = load_nets(path)?;
        if meta.len() != 6 {
            return Err(Error::FormatViolation(format!("model metadata has {} values, expected 6", meta.len())));
        }
        let k = meta[0] as usize;
        if nets.len() != 2 + 2 * k {
            return Err(Error::FormatViolation(format!(
                "model holds {} networks, expected {}",
                nets.len(),
                2 + 2 * k
            )));
        }
        let mut it = nets.into_iter();
        let spatial = it.next().unwrap();
        let freq = it.next().unwrap();
        let q_nets: Vec<Mlp> = it.by_ref().take(k).collect();
        let c_nets: Vec<Mlp> = it.collect();
        let model = MudaModel {
            spatial,
            freq,
            q_nets,
            c_nets,
            lambda: meta[1],
            gamma: meta[2],
            mmd: MmdConfig {
                kernel_count: meta[3] as usize,
                bandwidth_base: meta[4],
                bandwidth_step: meta[5],
            },
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    out
}

/// Gradient with respect to logits given a gradient with respect to softmax
/// probabilities.
fn softmax_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let inner: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
        for ((o, pv), dv) in out.row_mut(i).iter_mut().zip(p.row(i)).zip(dp.row(i)) {
            *o = pv * (dv - inner);
        }
    }
    out
}

fn check_batch(model: &MudaModel, batch: &MudaBatch) -> Result<()> {
    let k = model.sources();
    if batch.sources.len() != k {
        return Err(Error::ShapeMismatch(format!("{} source batches for {} sources", batch.sources.len(), k)));
    }
    if batch.proxy.rows() < 2 {
        return Err(Error::EmptyBatch("proxy batch needs at least 2 samples".into()));
    }
    let d = model.input_dim();
    if batch.proxy.cols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: batch.proxy.cols() });
    }
    for (i, (x, y)) in batch.sources.iter().enumerate() {
        if x.rows() < 2 || x.rows() != y.len() {
            return Err(Error::EmptyBatch(format!("source batch {i} needs at least 2 labelled samples")));
        }
        if x.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: x.cols() });
        }
        if y.iter().any(|&l| l > 1) {
            return Err(Error::InvalidInput(format!("source batch {i} has a label outside {{0, 1}}")));
        }
        if !y.contains(&BENIGN) || !y.contains(&ADVERSARIAL) {
            return Err(Error::EmptyBatch(format!("source batch {i} lacks one of the two classes")));
        }
    }
    Ok(())
}

/// The three loss terms and the weighted total.
pub fn muda_losses(model: &MudaModel, batch: &MudaBatch) -> Result<MudaLosses> {
    Ok(muda_core(model, batch, None)?.0)
}

/// Losses plus the flat gradient of `w.cls·l_cls + w.d·l_d + w.disc·l_disc`.
pub fn muda_losses_grad(model: &MudaModel, batch: &MudaBatch, w: LossWeights) -> Result<(MudaLosses, Vec<f64>)> {
    let (losses, g) = muda_core(model, batch, Some(w))?;
    Ok((losses, g.expect("requested")))
}

/// Gradient of `l_total` at the model's own λ and γ.
pub fn total_grad(model: &MudaModel, batch: &MudaBatch) -> Result<(MudaLosses, Vec<f64>)> {
    muda_losses_grad(
        model,
        batch,
        LossWeights {
            cls: 1.0,
            d: model.lambda,
            disc: model.gamma,
        },
    )
}

fn muda_core(model: &MudaModel, batch: &MudaBatch, w: Option<LossWeights>) -> Result<(MudaLosses, Option<Vec<f64>>)> {
    check_batch(model, batch)?;
    let k = model.sources();
    let kf = k as f64;

    let src_fwd: Vec<Forward> = batch
        .sources
        .iter()
        .enumerate()
        .map(|(i, (x, _))| {
            let (s, f, r) = model.afe_tapes(x)?;
            let (q, c) = model.head(i, &r)?;
            Ok(Forward { r_tapes: (s, f), q_tape: q, c_tape: c })
        })
        .collect::<Result<_>>()?;
    let (ps, pf, pr) = model.afe_tapes(&batch.proxy)?;
    let proxy_heads: Vec<(GradTape, GradTape)> = (0..k).map(|i| model.head(i, &pr)).collect::<Result<_>>()?;
    let proxy_probs: Vec<Matrix> = proxy_heads.iter().map(|(_, c)| softmax_rows(c.output())).collect();

    // classification
    let mut l_cls = 0.0;
    let mut d_logits = Vec::with_capacity(k);
    for (fw, (_, y)) in src_fwd.iter().zip(&batch.sources) {
        let p = softmax_rows(fw.c_tape.output());
        let n = y.len() as f64;
        let mut ce = 0.0;
        let mut g = p.clone();
        for (row, &label) in y.iter().enumerate() {
            ce -= p[(row, label)].max(f64::MIN_POSITIVE).ln();
            g[(row, label)] -= 1.0;
        }
        l_cls += ce / n / kf;
        d_logits.push(g.scale(1.0 / (n * kf)));
    }

    // alignment
    let mut l_d = 0.0;
    let mut mmd_grads = Vec::with_capacity(k);
    for (fw, (pq, _)) in src_fwd.iter().zip(&proxy_heads) {
        let (v, gx, gy) = mmd2_with_grad(fw.q_tape.output(), pq.output(), &model.mmd)?;
        l_d += v / kf;
        mmd_grads.push((gx.scale(1.0 / kf), gy.scale(1.0 / kf)));
    }

    // discrepancy
    let mut l_disc = 0.0;
    let mut d_probs: Vec<Matrix> = proxy_probs.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    if k >= 2 {
        let pair_scale = 2.0 / (kf * (kf - 1.0));
        let cells = (batch.proxy.rows() * 2) as f64;
        for i in 0..k {
            for j in 0..i {
                let (pi, pj) = (&proxy_probs[i], &proxy_probs[j]);
                let mut sum = 0.0;
                for (t, (a, b)) in pi.as_slice().iter().zip(pj.as_slice()).enumerate() {
                    let diff = a - b;
                    sum += diff.abs();
                    let sign = if diff == 0.0 { 0.0 } else { diff.signum() };
                    let s = sign * pair_scale / cells;
                    d_probs[i].as_mut_slice()[t] += s;
                    d_probs[j].as_mut_slice()[t] -= s;
                }
                l_disc += pair_scale * sum / cells;
            }
        }
    }

    let l_total = l_cls + model.lambda * l_d + model.gamma * l_disc;
    let losses = MudaLosses { l_cls, l_d, l_disc, l_total };
    if !l_total.is_finite() {
        return Err(Error::NonFiniteLoss(l_total));
    }
    let Some(w) = w else {
        return Ok((losses, None));
    };

    let mut g_s = MlpGrads::zeros_like(&model.spatial);
    let mut g_f = MlpGrads::zeros_like(&model.freq);
    let mut g_q: Vec<_> = model.q_nets.iter().map(MlpGrads::zeros_like).collect();
    let mut g_c: Vec<_> = model.c_nets.iter().map(MlpGrads::zeros_like).collect();
    let s_dim = model.spatial.output_dim();
    let mut d_proxy_r = Matrix::zeros(pr.rows(), pr.cols());

    for i in 0..k {
        let fw = &src_fwd[i];
        // source branch
        let (gc, dq) = model.c_nets[i].backward(&fw.c_tape, &d_logits[i].scale(w.cls))?;
        g_c[i].add_assign(&gc);
        let mut dq = dq;
        dq.add_assign(&mmd_grads[i].0.scale(w.d));
        let (gq, dr) = model.q_nets[i].backward(&fw.q_tape, &dq)?;
        g_q[i].add_assign(&gq);
        let (dr_s, dr_f) = dr.hsplit(s_dim);
        g_s.add_assign(&model.spatial.backward(&fw.r_tapes.0, &dr_s)?.0);
        g_f.add_assign(&model.freq.backward(&fw.r_tapes.1, &dr_f)?.0);

        // proxy branch
        let (pq, pc) = &proxy_heads[i];
        let d_logit = softmax_backward(&proxy_probs[i], &d_probs[i].scale(w.disc));
        let (gc, dq) = model.c_nets[i].backward(pc, &d_logit)?;
        g_c[i].add_assign(&gc);
        let mut dq = dq;
        dq.add_assign(&mmd_grads[i].1.scale(w.d));
        let (gq, dr) = model.q_nets[i].backward(pq, &dq)?;
        g_q[i].add_assign(&gq);
        d_proxy_r.add_assign(&dr);
    }
    let (dr_s, dr_f) = d_proxy_r.hsplit(s_dim);
    g_s.add_assign(&model.spatial.backward(&ps, &dr_s)?.0);
    g_f.add_assign(&model.freq.backward(&pf, &dr_f)?.0);

    let mut flat = g_s.flat();
    flat.extend(g_f.flat());
    for g in &g_q {
        flat.extend(g.flat());
    }
    for g in &g_c {
        flat.extend(g.flat());
    }
    Ok((losses, Some(flat)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PadaConfig {
    pub epochs: usize,
    /// Samples per source minibatch, split evenly between the two classes.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Fraction of every source and of the proxy held out from training.
    pub holdout_fraction: f64,
    pub arch: Architecture,
    pub mmd: MmdConfig,
}

impl Default for PadaConfig {
    fn default() -> Self {
        PadaConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            lambda: 1.0,
            gamma: 1.0,
            holdout_fraction: 0.2,
            arch: Architecture::default(),
            mmd: MmdConfig::default(),
        }
    }
}

impl PadaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::config("batch_size", "must be at least 4"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if !(0.0..0.9).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction", "must lie in [0, 0.9)"));
        }
        self.mmd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub losses: MudaLosses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PadaRun {
    pub model: MudaModel,
    /// Mean training losses of every epoch.
    pub trace: Vec<TraceRow>,
    pub holdout_before: Option<MudaLosses>,
    pub holdout_after: Option<MudaLosses>,
}

impl PadaRun {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,l_cls,l_d,l_disc,l_total\n");
        for r in &self.trace {
            let l = r.losses;
            out.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.epoch, l.l_cls, l.l_d, l.l_disc, l.l_total));
        }
        out
    }
}

struct Split {
    train: Vec<usize>,
    held: Vec<usize>,
}

fn split_indices(n: usize, fraction: f64, rng: &mut Rng) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let held_n = ((n as f64) * fraction).floor() as usize;
    let held_n = if held_n >= 2 && n - held_n >= 2 { held_n } else { 0 };
    let held = idx[..held_n].to_vec();
    let mut train = idx[held_n..].to_vec();
    train.sort_unstable();
    Split { train, held }
}

/// Cycles through a shuffled index list, reshuffling after each pass.
struct Cursor {
    items: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(items: Vec<usize>, rng: &mut Rng) -> Self {
        let mut c = Cursor { items, pos: 0 };
        rng.shuffle(&mut c.items);
        c
    }

    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                rng.shuffle(&mut self.items);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn labelled(benign: &Matrix, adversarial: &Matrix, b_idx: &[usize], a_idx: &[usize]) -> (Matrix, Vec<usize>) {
    let x = Matrix::vstack(&[&benign.select_rows(b_idx), &adversarial.select_rows(a_idx)]).expect("same dims");
    let mut y = vec![BENIGN; b_idx.len()];
    y.extend(std::iter::repeat(ADVERSARIAL).take(a_idx.len()));
    (x, y)
}

/// Trains a fresh model with SGD on `l_total`.
pub fn train_pada(data: &SourceDomainSet, cfg: &PadaConfig, rng: &mut Rng) -> Result<PadaRun> {
    cfg.validate()?;
    let model = MudaModel::init(
        data.dim(),
        data.sources().len(),
        cfg.arch,
        cfg.lambda,
        cfg.gamma,
        cfg.mmd.clone(),
        rng,
    )?;
    train_pada_from(model, data, cfg, rng)
}

/// Trains an existing model; its λ and γ are taken from `cfg`.
pub fn train_pada_from(mut model: MudaModel, data: &SourceDomainSet, cfg: &PadaConfig, rng: &mut Rng) -> Result<PadaRun> {
    cfg.validate()?;
    model.lambda = cfg.lambda;
    model.gamma = cfg.gamma;
    model.validate()?;
    if model.sources() != data.sources().len() || model.input_dim() != data.dim() {
        return Err(Error::ShapeMismatch("model does not match the source set".into()));
    }
    let k = model.sources();

    let splits: Vec<(Split, Split)> = data
        .sources()
        .iter()
        .map(|s| {
            let b = split_indices(s.benign.rows(), cfg.holdout_fraction, rng);
            let a = split_indices(s.adversarial.rows(), cfg.holdout_fraction, rng);
            (b, a)
        })
        .collect();
    let proxy_split = split_indices(data.proxy().rows(), cfg.holdout_fraction, rng);

    let holdout = if proxy_split.held.len() >= 2 && splits.iter().all(|(b, a)| b.held.len() >= 1 && a.held.len() >= 1) {
        Some(MudaBatch {
            sources: data
                .sources()
                .iter()
                .zip(&splits)
                .map(|(s, (b, a))| labelled(&s.benign, &s.adversarial, &b.held, &a.held))
                .collect(),
            proxy: data.proxy().select_rows(&proxy_split.held),
        })
    } else {
        None
    };
    let holdout_before = holdout.as_ref().map(|h| muda_losses(&model, h)).transpose()?;

    let half = cfg.batch_size / 2;
    let mut cursors: Vec<(Cursor, Cursor)> = splits
        .iter()
        .map(|(b, a)| (Cursor::new(b.train.clone(), rng), Cursor::new(a.train.clone(), rng)))
        .collect();
    let mut proxy_cursor = Cursor::new(proxy_split.train.clone(), rng);
    let steps = splits
        .iter()
        .map(|(_, a)| a.train.len().div_ceil(half))
        .max()
        .unwrap_or(1)
        .max(1);

    let mut params = model.params();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, params.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = MudaLosses { l_cls: 0.0, l_d: 0.0, l_disc: 0.0, l_total: 0.0 };
        for _ in 0..steps {
            let sources = (0..k)
                .map(|i| {
                    let s = &data.sources()[i];
                    let (cb, ca) = &mut cursors[i];
                    let b_idx = cb.take(half, rng);
                    let a_idx = ca.take(half, rng);
                    labelled(&s.benign, &s.adversarial, &b_idx, &a_idx)
                })
                .collect();
            let proxy = data.proxy().select_rows(&proxy_cursor.take(cfg.batch_size, rng));
            let batch = MudaBatch { sources, proxy };
            let (l, grad) = total_grad(&model, &batch)?;
            opt.step(&mut params, &grad);
            model.set_params(&params);
            acc.l_cls += l.l_cls;
            acc.l_d += l.l_d;
            acc.l_disc += l.l_disc;
            acc.l_total += l.l_total;
        }
        let s = steps as f64;
        trace.push(TraceRow {
            epoch,
            losses: MudaLosses {
                l_cls: acc.l_cls / s,
                l_d: acc.l_d / s,
                l_disc: acc.l_disc / s,
                l_total: acc.l_total / s,
            },
        });
    }
    let holdout_after = holdout.as_ref().map(|h| muda_losses(&model, h)).transpose()?;
    Ok(PadaRun {
        model,
        trace,
        holdout_before,
        holdout_after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub adversarial: bool,
    pub score: f64,
}

/// Mean adversarial probability over the `K` classifiers; adversarial when
/// strictly above 0.5.
pub fn detect(model: &MudaModel, inputs: &Matrix) -> Result<Vec<Detection>> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: inputs.cols() });
    }
    let r = model.features(inputs)?;
    let mut scores = vec![0.0; inputs.rows()];
    for (q, c) in model.q_nets.iter().zip(&model.c_nets) {
        let p = softmax_rows(&c.forward(&q.forward(&r)?)?);
        for (s, row) in scores.iter_mut().zip(p.row_iter()) {
            *s += row[ADVERSARIAL];
        }
    }
    let k = model.sources() as f64;
    Ok(scores.into_iter().map(|s| score_to_detection(s / k)).collect())
}

pub fn score_to_detection(score: f64) -> Detection {
    Detection {
        adversarial: score > 0.5,
        score,
    }
}

/// Fraction of correctly labelled samples (`labels` uses 0 benign, 1 adversarial).
pub fn accuracy(detections: &[Detection], labels: &[usize]) -> f64 {
    if detections.is_empty() {
        return 0.0;
    }
    let hits = detections
        .iter()
        .zip(labels)
        .filter(|(d, &l)| d.adversarial == (l == ADVERSARIAL))
        .count();
    hits as f64 / detections.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::mmd2;
    use crate::nnkit::{grad_check, Dense};

    fn fixed_mmd() -> MmdConfig {
        MmdConfig {
            kernel_count: 3,
            bandwidth_base: 2.0,
            bandwidth_step: 2.0,
        }
    }

    fn small_arch() -> Architecture {
        Architecture {
            afe_hidden: 6,
            afe_dim: 3,
            q_dim: 5,
            hidden: Activation::Tanh,
        }
    }

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut Rng) -> Matrix {
        let v: Vec<f64> = (0..n * d).map(|_| rng.normal() + shift).collect();
        Matrix::from_vec(n, d, v).unwrap()
    }

    fn fixture(k: usize, rng: &mut Rng) -> (MudaModel, MudaBatch) {
        let model = MudaModel::init(4, k, small_arch(), 0.7, 1.3, fixed_mmd(), rng).unwrap();
        let sources = (0..k)
            .map(|i| {
                let x = Matrix::vstack(&[&gaussian(3, 4, 0.0, rng), &gaussian(3, 4, 1.0 + i as f64, rng)]).unwrap();
                (x, vec![0, 0, 0, 1, 1, 1])
            })
            .collect();
        (model, MudaBatch { sources, proxy: gaussian(12, 4, 0.5, rng) })
    }

    /// Term-by-term recomputation from per-sample forward passes.
    fn reference(model: &MudaModel, batch: &MudaBatch) -> MudaLosses {
        let k = model.sources();
        let probs = |i: usize, x: &[f64]| -> Vec<f64> {
            let m = Matrix::from_vec(1, x.len(), x.to_vec()).unwrap();
            model.probabilities(i, &m).unwrap().into_vec()
        };
        let mut l_cls = 0.0;
        for (i, (x, y)) in batch.sources.iter().enumerate() {
            let mut ce = 0.0;
            for (row, &label) in x.row_iter().zip(y) {
                ce += -probs(i, row)[label].ln();
            }
            l_cls += ce / y.len() as f64;
        }
        l_cls /= k as f64;
        let mut l_d = 0.0;
        for (i, (x, _)) in batch.sources.iter().enumerate() {
            let hx = model.q_nets[i].forward(&model.features(x).unwrap()).unwrap();
            let hp = model.q_nets[i].forward(&model.features(&batch.proxy).unwrap()).unwrap();
            l_d += mmd2(&hx, &hp, &model.mmd).unwrap();
        }
        l_d /= k as f64;
        let mut l_disc = 0.0;
        let mut pairs = 0.0;
        for i in 0..k {
            for j in 0..k {
                if j >= i {
                    continue;
                }
                let mut sum = 0.0;
                for row in batch.proxy.row_iter() {
                    let (a, b) = (probs(i, row), probs(j, row));
                    sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
                }
                l_disc += sum / (2.0 * batch.proxy.rows() as f64);
                pairs += 1.0;
            }
        }
        l_disc /= pairs;
        MudaLosses {
            l_cls,
            l_d,
            l_disc,
            l_total: l_cls + model.lambda * l_d + model.gamma * l_disc,
        }
    }

    #[test]
    fn matches_reference_terms() {
        let mut rng = Rng::new(31);
        for k in [2, 3, 4] {
            let (model, batch) = fixture(k, &mut rng);
            let got = muda_losses(&model, &batch).unwrap();
            let want = reference(&model, &batch);
            for (a, b) in [
                (got.l_cls, want.l_cls),
                (got.l_d, want.l_d),
                (got.l_disc, want.l_disc),
                (got.l_total, want.l_total),
            ] {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identical_heads_have_no_gaps() {
        let mut rng = Rng::new(32);
        let (mut model, _) = fixture(2, &mut rng);
        model.q_nets[1] = model.q_nets[0].clone();
        model.c_nets[1] = model.c_nets[0].clone();
        let x = gaussian(6, 4, 0.0, &mut rng);
        let batch = MudaBatch {
            sources: vec![(x.clone(), vec![0, 1, 0, 1, 0, 1]); 2],
            proxy: x,
        };
        let l = muda_losses(&model, &batch).unwrap();
        assert!(l.l_d <= 1e-9);
        assert_eq!(l.l_disc, 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_classification() {
        let mut rng = Rng::new(33);
        let (mut model, batch) = fixture(3, &mut rng);
        model.lambda = 0.0;
        model.gamma = 0.0;
        let l = muda_losses(&model, &batch).unwrap();
        assert_eq!(l.l_total, l.l_cls);
    }

    #[test]
    fn total_is_linear_in_weights() {
        let mut rng = Rng::new(34);
        let (mut model, batch) = fixture(3, &mut rng);
        let base = muda_losses(&model, &batch).unwrap();
        for (lam, gam) in [(0.0, 0.0), (0.5, 2.0), (3.0, 0.1)] {
            model.lambda = lam;
            model.gamma = gam;
            let l = muda_losses(&model, &batch).unwrap();
            assert!((l.l_total - (base.l_cls + lam * base.l_d + gam * base.l_disc)).abs() < 1e-12);
        }
    }

    #[test]
    fn disc_symmetric_under_source_swap() {
        let mut rng = Rng::new(35);
        let (model, batch) = fixture(3, &mut rng);
        let mut swapped = model.clone();
        swapped.q_nets.swap(0, 2);
        swapped.c_nets.swap(0, 2);
        let mut sb = batch.clone();
        sb.sources.swap(0, 2);
        let (a, b) = (muda_losses(&model, &batch).unwrap(), muda_losses(&swapped, &sb).unwrap());
        assert!((a.l_disc - b.l_disc).abs() < 1e-12);
        assert!((a.l_d - b.l_d).abs() < 1e-12);
    }

    #[test]
    fn alignment_invariant_to_sample_order() {
        let mut rng = Rng::new(36);
        let (model, batch) = fixture(2, &mut rng);
        let mut perm = batch.clone();
        let order = [4, 2, 0, 3, 1, 11, 10, 9, 8, 7, 6, 5];
        perm.proxy = batch.proxy.select_rows(&order);
        let (a, b) = (muda_losses(&model, &batch).unwrap(), muda_losses(&model, &perm).unwrap());
        assert!((a.l_d - b.l_d).abs() < 1e-12);
        assert!((a.l_disc - b.l_disc).abs() < 1e-12);
    }

    #[test]
    fn every_term_passes_gradient_check() {
        let mut rng = Rng::new(37);
        let (model, batch) = fixture(3, &mut rng);
        let full = LossWeights { cls: 1.0, d: model.lambda, disc: model.gamma };
        for (w, pick) in [
            (LossWeights::CLS, 0),
            (LossWeights::D, 1),
            (LossWeights::DISC, 2),
            (full, 3),
        ] {
            let (_, grad) = muda_losses_grad(&model, &batch, w).unwrap();
            let err = grad_check(
                |p| {
                    let l = muda_losses(&model.with_params(p), &batch)?;
                    Ok([l.l_cls, l.l_d, l.l_disc, l.l_total][pick])
                },
                &model.params(),
                &grad,
                80,
                &mut rng,
            )
            .unwrap();
            assert!(err < 1e-4, "term {pick}: {err}");
        }
    }

    #[test]
    fn missing_class_rejected() {
        let mut rng = Rng::new(38);
        let (model, mut batch) = fixture(2, &mut rng);
        batch.sources[0].1 = vec![1; 6];
        assert!(matches!(muda_losses(&model, &batch), Err(Error::EmptyBatch(_))));
    }

    fn constant_classifier(logits: [f64; 2]) -> Mlp {
        Mlp::from_layers(vec![Dense {
            weights: Matrix::zeros(2, 2),
            bias: logits.to_vec(),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn fixed_model(c: Vec<Mlp>) -> MudaModel {
        let k = c.len();
        MudaModel {
            spatial: Mlp::identity(1),
            freq: Mlp::identity(1),
            q_nets: vec![Mlp::identity(2); k],
            c_nets: c,
            lambda: 1.0,
            gamma: 1.0,
            mmd: MmdConfig::default(),
        }
    }

    #[test]
    fn detection_rules() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let sure = fixed_model(vec![constant_classifier([60.0, -60.0]); 2]);
        for d in detect(&sure, &x).unwrap() {
            assert!(!d.adversarial);
            assert!(d.score < 1e-12);
        }
        let split = fixed_model(vec![constant_classifier([50.0, -50.0]), constant_classifier([-50.0, 50.0])]);
        for d in detect(&split, &x).unwrap() {
            assert!((d.score - 0.5).abs() < 1e-15);
            assert!(!score_to_detection(0.5).adversarial);
        }
    }

    #[test]
    fn detection_averages_probabilities() {
        let mut rng = Rng::new(39);
        let (model, _) = fixture(3, &mut rng);
        let x = gaussian(10, 4, 0.3, &mut rng);
        let det = detect(&model, &x).unwrap();
        for (row, d) in det.iter().enumerate() {
            let single = x.select_rows(&[row]);
            let mean: f64 = (0..3).map(|i| model.probabilities(i, &single).unwrap()[(0, 1)]).sum::<f64>() / 3.0;
            assert!((d.score - mean).abs() < 1e-12);
        }
    }

    fn toy_sources(rng: &mut Rng) -> SourceDomainSet {
        let sources = (0..3)
            .map(|i| SourceDomain {
                name: format!("s{i}"),
                benign: gaussian(40, 4, 0.0, rng),
                adversarial: gaussian(40, 4, 3.0 + 0.5 * i as f64, rng),
            })
            .collect();
        let proxy = Matrix::vstack(&[&gaussian(30, 4, 0.0, rng), &gaussian(30, 4, 3.5, rng)]).unwrap();
        SourceDomainSet::new(sources, proxy).unwrap()
    }

    #[test]
    fn training_lowers_holdout_loss_and_is_deterministic() {
        let data = toy_sources(&mut Rng::new(40));
        let cfg = PadaConfig { epochs: 15, ..Default::default() };
        let a = train_pada(&data, &cfg, &mut Rng::new(41)).unwrap();
        let b = train_pada(&data, &cfg, &mut Rng::new(41)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.len(), 15);
        let (before, after) = (a.holdout_before.unwrap(), a.holdout_after.unwrap());
        assert!(after.l_total < before.l_total, "{} -> {}", before.l_total, after.l_total);
        let target = Matrix::vstack(&[&gaussian(50, 4, 0.0, &mut Rng::new(42)), &gaussian(50, 4, 3.2, &mut Rng::new(43))]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
        assert!(accuracy(&detect(&a.model, &target).unwrap(), &labels) > 0.9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.padm");
        let (model, _) = fixture(3, &mut Rng::new(44));
        model.save(&path).unwrap();
        assert_eq!(MudaModel::load(&path).unwrap(), model);
    }

    #[test]
    fn unequal_class_counts_rejected() {
        let mut rng = Rng::new(45);
        let s = |n| SourceDomain { name: "x".into(), benign: gaussian(4, 2, 0.0, &mut Rng::new(n)), adversarial: gaussian(5, 2, 0.0, &mut Rng::new(n)) };
        assert!(SourceDomainSet::new(vec![s(1), s(2)], gaussian(3, 2, 0.0, &mut rng)).is_err());
    }
}
