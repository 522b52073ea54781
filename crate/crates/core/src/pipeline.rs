//! Stage drivers that read and write the artifact directory.
//!
//! | stage     | reads                                   | writes                                   |
//! |-----------|-----------------------------------------|------------------------------------------|
//! | `synth`   | config                                  | `acq.csv`, `clu.csv`, `benign_acq.csv`, `benign_clu.csv`, `target.csv`, `families.csv`, `synth_spec.txt` |
//! | `acquire` | `acq.csv`                               | `encoder.padm`, `acquire_trace.csv`      |
//! | `embed`   | `encoder.padm`, `clu.csv`               | `pool.padf` or `pool.csv`                |
//! | `cluster` | pool                                    | `similarity.csv`, `ch_scores.csv`, `assignment.csv` |
//! | `select`  | pool, `assignment.csv`                  | `pads.csv`, `cefs_audit.csv`             |
//! | `train`   | `pads.csv`, example splits              | `model.padm`, `train_trace.csv`          |
//! | `detect`  | `model.padm`, `target.csv`              | `detections.csv`                         |
//! | `report`  | all of the above                        | `report.txt`                             |
//!
//! Every stage draws randomness from its own named sub-stream of the root
//! seed, so any stage can be rerun alone with identical results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::advscl::{embed_pool, train_encoder, ContrastiveConfig, ContrastiveEncoder, LabeledExampleSet};
use crate::clustering::{auto_cluster_range, ClusterAssignment, ClusterSearch, MIN_AUTO_K};
use crate::divergence::{similarity_matrix, MmdConfig};
use crate::domains::{load_pool, save_pool, DomainPool, PoolFormat};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::pada::{accuracy, detect, train_pada, MudaModel, PadaConfig, SourceDomain, SourceDomainSet, ADVERSARIAL, BENIGN};
use crate::selection::{select_pads, DadMetric, PadSelection, DEFAULT_COMBINATION_CAP};
use crate::synth::{gen_pool, gen_target, parse_key_values, SynthPool, SynthSpec, BENIGN_ID};

pub const ACQ: &str = "acq.csv";
pub const CLU: &str = "clu.csv";
pub const BENIGN_ACQ: &str = "benign_acq.csv";
pub const BENIGN_CLU: &str = "benign_clu.csv";
pub const TARGET: &str = "target.csv";
pub const FAMILIES: &str = "families.csv";
pub const SYNTH_SPEC: &str = "synth_spec.txt";
pub const ENCODER: &str = "encoder.padm";
pub const ACQUIRE_TRACE: &str = "acquire_trace.csv";
pub const SIMILARITY: &str = "similarity.csv";
pub const CH_SCORES: &str = "ch_scores.csv";
pub const ASSIGNMENT: &str = "assignment.csv";
pub const PADS: &str = "pads.csv";
pub const CEFS_AUDIT: &str = "cefs_audit.csv";
pub const MODEL: &str = "model.padm";
pub const TRAIN_TRACE: &str = "train_trace.csv";
pub const DETECTIONS: &str = "detections.csv";
pub const REPORT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Acquire,
    Embed,
    Cluster,
    Select,
    Train,
    Detect,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Acquire,
        Stage::Embed,
        Stage::Cluster,
        Stage::Select,
        Stage::Train,
        Stage::Detect,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Acquire => "acquire",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Select => "select",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    /// Whether `synth.seed` was given explicitly instead of derived.
    pub synth_seed_explicit: bool,
    pub acquire: ContrastiveConfig,
    pub cluster_k_min: Option<usize>,
    pub cluster_k_max: Option<usize>,
    pub metric: DadMetric,
    pub combination_cap: u128,
    pub train: PadaConfig,
    pub pool_format: PoolFormat,
    /// Top-ranked combinations trained for the report's accuracy column.
    pub report_evaluate: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            synth: SynthSpec::default(),
            synth_seed_explicit: false,
            acquire: ContrastiveConfig::default(),
            cluster_k_min: None,
            cluster_k_max: None,
            metric: DadMetric::Jsd,
            combination_cap: DEFAULT_COMBINATION_CAP,
            train: PadaConfig::default(),
            pool_format: PoolFormat::Binary,
            report_evaluate: 3,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("synth.") {
            if rest == "seed" {
                self.synth_seed_explicit = true;
            }
            return self.synth.set(rest, value).map_err(|e| match e {
                Error::Config { message, .. } => Error::config(key, message),
                other => other,
            });
        }
        let a = &mut self.acquire;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, value)?,
            "pool.format" => {
                self.pool_format = match value.trim() {
                    "binary" => PoolFormat::Binary,
                    "csv" => PoolFormat::Csv,
                    other => return Err(Error::config(key, format!("unknown format `{other}`"))),
                }
            }
            "acquire.epochs" => a.epochs = num(key, value)?,
            "acquire.batch_size" => a.batch_size = num(key, value)?,
            "acquire.learning_rate" => a.learning_rate = num(key, value)?,
            "acquire.momentum" => a.momentum = num(key, value)?,
            "acquire.temperature" => a.temperature = num(key, value)?,
            "acquire.view_jitter" => a.view_jitter = num(key, value)?,
            "acquire.hidden_dim" => a.hidden_dim = num(key, value)?,
            "acquire.embed_dim" => a.embed_dim = num(key, value)?,
            "acquire.proj_dim" => a.proj_dim = num(key, value)?,
            "cluster.k_min" => self.cluster_k_min = Some(num(key, value)?),
            "cluster.k_max" => self.cluster_k_max = Some(num(key, value)?),
            "select.metric" => {
                self.metric = match value.trim() {
                    "mmd" => DadMetric::Mmd(self.train.mmd),
                    other => other.parse().map_err(|_| Error::config(key, format!("unknown metric `{other}`")))?,
                }
            }
            "select.cap" => self.combination_cap = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.learning_rate" => t.learning_rate = num(key, value)?,
            "train.momentum" => t.momentum = num(key, value)?,
            "train.lambda" => t.lambda = num(key, value)?,
            "train.gamma" => t.gamma = num(key, value)?,
            "train.holdout_fraction" => t.holdout_fraction = num(key, value)?,
            "train.afe_hidden" => t.arch.afe_hidden = num(key, value)?,
            "train.afe_dim" => t.arch.afe_dim = num(key, value)?,
            "train.q_dim" => t.arch.q_dim = num(key, value)?,
            "mmd.kernel_count" => {
                let v = num(key, value)?;
                self.set_mmd(|m| m.kernel_count = v)
            }
            "mmd.bandwidth_base" => {
                let v = num(key, value)?;
                self.set_mmd(|m| m.bandwidth_base = v)
            }
            "mmd.bandwidth_step" => {
                let v = num(key, value)?;
                self.set_mmd(|m| m.bandwidth_step = v)
            }
            "report.evaluate" => self.report_evaluate = num(key, value)?,
            _ => return Err(Error::config(key, "unknown setting")),
        }
        Ok(())
    }

    fn set_mmd(&mut self, f: impl FnOnce(&mut MmdConfig)) {
        let mut m = self.train.mmd;
        f(&mut m);
        self.train.mmd = m;
        if let DadMetric::Mmd(_) = self.metric {
            self.metric = DadMetric::Mmd(m);
        }
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let pairs = parse_key_values(text)?;
        let explicit_mixture = pairs.iter().any(|(k, _)| k == "synth.target_mixture");
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        if !explicit_mixture {
            cfg.synth.target_mixture = vec![1.0 / cfg.synth.families.max(1) as f64; cfg.synth.families];
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_kv_str(&text)
    }

    /// Replaces the root seed and rederives dependent seeds.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.finish()?;
        Ok(self)
    }

    fn finish(&mut self) -> Result<()> {
        if !self.synth_seed_explicit {
            self.synth.seed = derive_seed(self.seed, "synth");
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let a = &self.acquire;
        if a.batch_size < 2 {
            return Err(Error::config("acquire.batch_size", "must be at least 2"));
        }
        if !(a.temperature > 0.0) {
            return Err(Error::config("acquire.temperature", "must be positive"));
        }
        if !(a.learning_rate > 0.0) {
            return Err(Error::config("acquire.learning_rate", "must be positive"));
        }
        if !(a.view_jitter >= 0.0) {
            return Err(Error::config("acquire.view_jitter", "must be non-negative"));
        }
        if a.hidden_dim == 0 || a.embed_dim == 0 || a.proj_dim == 0 {
            return Err(Error::config("acquire.hidden_dim", "network widths must be positive"));
        }
        if self.train.arch.afe_hidden == 0 || self.train.arch.afe_dim == 0 || self.train.arch.q_dim == 0 {
            return Err(Error::config("train.afe_dim", "network widths must be positive"));
        }
        if let (Some(lo), Some(hi)) = (self.cluster_k_min, self.cluster_k_max) {
            if lo > hi {
                return Err(Error::config("cluster.k_min", "exceeds cluster.k_max"));
            }
        }
        if self.cluster_k_min.is_some_and(|k| k < 2) {
            return Err(Error::config("cluster.k_min", "must be at least 2"));
        }
        if self.combination_cap == 0 {
            return Err(Error::config("select.cap", "must be positive"));
        }
        Ok(())
    }

    pub fn rng(&self, stage: &str) -> Rng {
        Rng::new(self.seed).substream(stage)
    }
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::StageArtifactMissing(p))
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn pool_file(cfg: &PipelineConfig) -> &'static str {
    match cfg.pool_format {
        PoolFormat::Binary => "pool.padf",
        PoolFormat::Csv => "pool.csv",
    }
}

/// Two-column `name,value` CSV with a header line.
fn parse_pairs(path: &Path, header: &str) -> Result<Vec<(String, String)>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::FormatViolation(format!("{} must start with `{header}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: i + 2,
                    message: format!("expected two fields in {}", path.display()),
                })
        })
        .collect()
}

/// Source domains for the chosen attacks plus the evenly mixed proxy.
pub fn build_sources(
    chosen: &[String],
    clu: &LabeledExampleSet,
    benign_clu: &LabeledExampleSet,
    acq: &LabeledExampleSet,
    benign_acq: &LabeledExampleSet,
) -> Result<SourceDomainSet> {
    let known = clu.attacks();
    let sources = chosen
        .iter()
        .map(|id| {
            if !known.contains(id) {
                return Err(Error::InvalidInput(format!("attack `{id}` is not in the example set")));
            }
            Ok(SourceDomain {
                name: id.clone(),
                benign: benign_clu.rows_of(id),
                adversarial: clu.rows_of(id),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let proxy = Matrix::vstack(&[acq.inputs(), benign_acq.inputs()])?;
    SourceDomainSet::new(sources, proxy)
}

/// Accuracy of a trained model on a target set tagged benign / other.
pub fn target_accuracy(model: &MudaModel, target: &LabeledExampleSet) -> Result<f64> {
    let det = detect(model, target.inputs())?;
    Ok(accuracy(&det, &target_labels(target)))
}

pub fn target_labels(target: &LabeledExampleSet) -> Vec<usize> {
    target
        .attack_ids()
        .iter()
        .map(|id| if id == BENIGN_ID { BENIGN } else { ADVERSARIAL })
        .collect()
}

/// Clustering search honouring the configured `k` range.
pub fn cluster_pool(pool: &DomainPool, cfg: &PipelineConfig) -> Result<ClusterSearch> {
    let w = similarity_matrix(pool)?;
    let m = w.len();
    let lo = cfg.cluster_k_min.unwrap_or(MIN_AUTO_K);
    let hi = cfg.cluster_k_max.unwrap_or(m.saturating_sub(1));
    if m < lo + 1 {
        return Err(Error::PoolTooSmall(m));
    }
    auto_cluster_range(&w, lo, hi.min(m - 1), &cfg.rng("cluster"))
}

/// Artifact directory bound to a configuration.
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: PipelineConfig,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { dir, cfg })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn run(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Acquire => self.acquire(),
            Stage::Embed => self.embed(),
            Stage::Cluster => self.cluster(),
            Stage::Select => self.select(),
            Stage::Train => self.train(),
            Stage::Detect => self.detect(),
            Stage::Report => self.report(),
        }
    }

    /// Every stage in order; returns all written artifacts.
    pub fn pipeline(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for s in Stage::ALL {
            out.extend(self.run(s)?);
        }
        Ok(out)
    }

    fn examples(&self, name: &str) -> Result<LabeledExampleSet> {
        LabeledExampleSet::load_csv(&require(&self.dir, name)?)
    }

    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        let spec = &self.cfg.synth;
        let pool: SynthPool = gen_pool(spec)?;
        let target = gen_target(spec, &pool.geometry, &mut self.cfg.rng("target"))?;
        let mut out = Vec::new();
        for (name, set) in [
            (ACQ, &pool.acquisition),
            (CLU, &pool.clustering),
            (BENIGN_ACQ, &pool.benign_acquisition),
            (BENIGN_CLU, &pool.benign_clustering),
            (TARGET, &target),
        ] {
            let p = self.path(name);
            set.save_csv(&p)?;
            out.push(p);
        }
        let mut fam = String::from("attack_id,family\n");
        for (id, f) in pool.attack_ids.iter().zip(&pool.geometry.families) {
            let _ = writeln!(fam, "{id},{f}");
        }
        out.push(write(&self.dir, FAMILIES, &fam)?);
        out.push(write(&self.dir, SYNTH_SPEC, &spec.to_kv_string())?);
        Ok(out)
    }

    pub fn acquire(&self) -> Result<Vec<PathBuf>> {
        let acq = self.examples(ACQ)?;
        let enc = train_encoder(&acq, &self.cfg.acquire, &mut self.cfg.rng("acquire"))?;
        let p = self.path(ENCODER);
        enc.save(&p)?;
        let mut trace = String::from("epoch,loss\n");
        for (e, l) in enc.loss_trace.iter().enumerate() {
            let _ = writeln!(trace, "{e},{l:?}");
        }
        Ok(vec![p, write(&self.dir, ACQUIRE_TRACE, &trace)?])
    }

    fn load_encoder(&self) -> Result<ContrastiveEncoder> {
        ContrastiveEncoder::load(&require(&self.dir, ENCODER)?)
    }

    pub fn embed(&self) -> Result<Vec<PathBuf>> {
        let enc = self.load_encoder()?;
        let clu = self.examples(CLU)?;
        let pool = embed_pool(&enc.encoder, &clu)?;
        let p = self.path(pool_file(&self.cfg));
        save_pool(&pool, &p, self.cfg.pool_format)?;
        Ok(vec![p])
    }

    pub fn load_pool(&self) -> Result<DomainPool> {
        load_pool(&require(&self.dir, pool_file(&self.cfg))?, self.cfg.pool_format)
    }

    pub fn cluster(&self) -> Result<Vec<PathBuf>> {
        let pool = self.load_pool()?;
        let w = similarity_matrix(&pool)?;
        let search = cluster_pool(&pool, &self.cfg)?;
        let ids = pool.attack_ids();
        let mut sim = format!("attack_id,{}\n", ids.join(","));
        for (i, id) in ids.iter().enumerate() {
            let row: Vec<String> = w.matrix().row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(sim, "{id},{}", row.join(","));
        }
        let mut ch = String::from("k,ch\n");
        for (k, s) in &search.scores {
            let _ = writeln!(ch, "{k},{s:?}");
        }
        let mut asg = String::from("attack_id,cluster\n");
        for (id, l) in ids.iter().zip(&search.best.labels) {
            let _ = writeln!(asg, "{id},{l}");
        }
        Ok(vec![
            write(&self.dir, SIMILARITY, &sim)?,
            write(&self.dir, CH_SCORES, &ch)?,
            write(&self.dir, ASSIGNMENT, &asg)?,
        ])
    }

    /// Assignment aligned with the pool's domain order.
    pub fn load_assignment(&self, pool: &DomainPool) -> Result<ClusterAssignment> {
        let path = require(&self.dir, ASSIGNMENT)?;
        let pairs = parse_pairs(&path, "attack_id,cluster")?;
        let mut labels = vec![usize::MAX; pool.len()];
        for (id, c) in pairs {
            let i = pool
                .index_of(&id)
                .ok_or_else(|| Error::FormatViolation(format!("assignment names unknown attack `{id}`")))?;
            labels[i] = num("cluster", &c)?;
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::FormatViolation("assignment does not cover every domain".into()));
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        if (0..k).any(|c| !labels.contains(&c)) {
            return Err(Error::FormatViolation("assignment has an empty cluster".into()));
        }
        Ok(ClusterAssignment {
            k,
            labels,
            embedding: Matrix::zeros(pool.len(), k),
        })
    }

    pub fn select(&self) -> Result<Vec<PathBuf>> {
        let pool = self.load_pool()?;
        let assignment = self.load_assignment(&pool)?;
        let sel = select_pads(&pool, &assignment, &self.cfg.metric, self.cfg.combination_cap)?;
        let mut pads = String::from("cluster,attack_id\n");
        for (c, id) in sel.chosen.iter().enumerate() {
            let _ = writeln!(pads, "{c},{id}");
        }
        Ok(vec![write(&self.dir, PADS, &pads)?, write(&self.dir, CEFS_AUDIT, &sel.audit_csv())?])
    }

    pub fn load_pads(&self) -> Result<Vec<String>> {
        let path = require(&self.dir, PADS)?;
        Ok(parse_pairs(&path, "cluster,attack_id")?.into_iter().map(|(_, id)| id).collect())
    }

    fn sources_for(&self, chosen: &[String]) -> Result<SourceDomainSet> {
        build_sources(
            chosen,
            &self.examples(CLU)?,
            &self.examples(BENIGN_CLU)?,
            &self.examples(ACQ)?,
            &self.examples(BENIGN_ACQ)?,
        )
    }

    pub fn train(&self) -> Result<Vec<PathBuf>> {
        let chosen = self.load_pads()?;
        let data = self.sources_for(&chosen)?;
        let run = train_pada(&data, &self.cfg.train, &mut self.cfg.rng("train"))?;
        let p = self.path(MODEL);
        run.model.save(&p)?;
        Ok(vec![p, write(&self.dir, TRAIN_TRACE, &run.trace_csv())?])
    }

    pub fn detect(&self) -> Result<Vec<PathBuf>> {
        let model = MudaModel::load(&require(&self.dir, MODEL)?)?;
        let target = self.examples(TARGET)?;
        let det = detect(&model, target.inputs())?;
        let mut out = String::from("index,truth,label,score\n");
        for (i, (d, truth)) in det.iter().zip(target.attack_ids()).enumerate() {
            let label = if d.adversarial { "adversarial" } else { "benign" };
            let _ = writeln!(out, "{i},{truth},{label},{:?}", d.score);
        }
        Ok(vec![write(&self.dir, DETECTIONS, &out)?])
    }

    /// Trains on one combination with a stream derived from its name.
    pub fn evaluate_combination(&self, combo: &[String], target: &LabeledExampleSet) -> Result<f64> {
        let data = self.sources_for(combo)?;
        let mut rng = self.cfg.rng(&format!("report-{}", combo.join("+")));
        let run = train_pada(&data, &self.cfg.train, &mut rng)?;
        target_accuracy(&run.model, target)
    }

    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let ch = parse_pairs(&require(&self.dir, CH_SCORES)?, "k,ch")?;
        let asg = parse_pairs(&require(&self.dir, ASSIGNMENT)?, "attack_id,cluster")?;
        let audit = read(&require(&self.dir, CEFS_AUDIT)?)?;
        let chosen = self.load_pads()?;
        let detections = read(&require(&self.dir, DETECTIONS)?)?;
        let acquire_trace = read(&require(&self.dir, ACQUIRE_TRACE)?)?;
        let train_trace = read(&require(&self.dir, TRAIN_TRACE)?)?;
        let target = self.examples(TARGET)?;

        let mut r = String::new();
        let _ = writeln!(r, "padaforge report");
        let _ = writeln!(r, "seed {}", self.cfg.seed);
        let _ = writeln!(r);
        let _ = writeln!(r, "CH score by k");
        let _ = writeln!(r, "{:>4}  {:>16}", "k", "CH");
        for (k, s) in &ch {
            let v: f64 = num("ch", s)?;
            let _ = writeln!(r, "{k:>4}  {v:>16.4}");
        }
        let k = asg.iter().filter_map(|(_, c)| c.parse::<usize>().ok()).max().map_or(0, |m| m + 1);
        let _ = writeln!(r, "selected k = {k}");
        let _ = writeln!(r);
        let _ = writeln!(r, "Clusters");
        for c in 0..k {
            let members: Vec<&str> = asg.iter().filter(|(_, l)| *l == c.to_string()).map(|(id, _)| id.as_str()).collect();
            let _ = writeln!(r, "{c:>4}  {}", members.join(" "));
        }
        let _ = writeln!(r);

        let mut ranked: Vec<(String, f64)> = audit
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (c, s) = l.split_once(';').ok_or_else(|| Error::FormatViolation("bad audit line".into()))?;
                Ok((c.to_string(), num::<f64>("cefs", s)?))
            })
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let shown = ranked.len().min(self.cfg.report_evaluate.max(1));
        let _ = writeln!(r, "CEFS ranking (top {shown} of {} combinations)", ranked.len());
        let _ = writeln!(r, "{:>4}  {:<40}  {:>12}  {:>9}", "rank", "combination", "CEFS", "accuracy");
        for (i, (combo, score)) in ranked.iter().take(shown).enumerate() {
            let acc = if i < self.cfg.report_evaluate {
                let ids: Vec<String> = combo.split('+').map(str::to_string).collect();
                format!("{:.4}", self.evaluate_combination(&ids, &target)?)
            } else {
                "-".into()
            };
            let _ = writeln!(r, "{:>4}  {:<40}  {:>12.6}  {:>9}", i + 1, combo, score, acc);
        }
        let _ = writeln!(r);

        let mut hits = [0usize; 2];
        let mut totals = [0usize; 2];
        for line in detections.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::FormatViolation("bad detections line".into()));
            }
            let truth = usize::from(f[1] != BENIGN_ID);
            let said = usize::from(f[2] == "adversarial");
            totals[truth] += 1;
            hits[truth] += usize::from(truth == said);
        }
        let n = totals[0] + totals[1];
        let all = if n == 0 { 0.0 } else { (hits[0] + hits[1]) as f64 / n as f64 };
        let rate = |c: usize| if totals[c] == 0 { 0.0 } else { hits[c] as f64 / totals[c] as f64 };
        let _ = writeln!(r, "Selected PADs: {}", chosen.join(" "));
        let _ = writeln!(r, "Target detection");
        let _ = writeln!(r, "{:<12}  {:>8}  {:>9}", "subset", "samples", "accuracy");
        let _ = writeln!(r, "{:<12}  {:>8}  {:>9.4}", "all", n, all);
        let _ = writeln!(r, "{:<12}  {:>8}  {:>9.4}", "benign", totals[0], rate(0));
        let _ = writeln!(r, "{:<12}  {:>8}  {:>9.4}", "adversarial", totals[1], rate(1));
        let _ = writeln!(r);
        let _ = writeln!(r, "Encoder loss trace");
        r.push_str(&acquire_trace);
        let _ = writeln!(r);
        let _ = writeln!(r, "Adaptation loss trace");
        r.push_str(&train_trace);
        Ok(vec![write(&self.dir, REPORT, &r)?])
    }
}

/// In-memory identification stage for one synthetic pool.
#[derive(Debug, Clone)]
pub struct Identified {
    pub encoder: ContrastiveEncoder,
    pub pool: DomainPool,
    pub search: ClusterSearch,
    pub selection: PadSelection,
}

/// Encoder training, embedding, clustering and selection without files.
pub fn identify(data: &SynthPool, cfg: &PipelineConfig) -> Result<Identified> {
    let encoder = train_encoder(&data.acquisition, &cfg.acquire, &mut cfg.rng("acquire"))?;
    let pool = embed_pool(&encoder.encoder, &data.clustering)?;
    let search = cluster_pool(&pool, cfg)?;
    let selection = select_pads(&pool, &search.best, &cfg.metric, cfg.combination_cap)?;
    Ok(Identified {
        encoder,
        pool,
        search,
        selection,
    })
}

/// Sources for `chosen` drawn from an in-memory synthetic pool.
pub fn synth_sources(data: &SynthPool, chosen: &[String]) -> Result<SourceDomainSet> {
    build_sources(
        chosen,
        &data.clustering,
        &data.benign_clustering,
        &data.acquisition,
        &data.benign_acquisition,
    )
}

/// Trains on `chosen` and scores the target.
pub fn evaluate_sources(
    data: &SynthPool,
    chosen: &[String],
    target: &LabeledExampleSet,
    train: &PadaConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let run = train_pada(&synth_sources(data, chosen)?, train, rng)?;
    target_accuracy(&run.model, target)
}
