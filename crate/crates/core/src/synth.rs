//! Synthetic benchmark with planted attack families.
//!
//! Benign features are standard normal. Each family owns a centre at distance
//! `family_radius` from the origin; each attack of the family is an isotropic
//! Gaussian around a jittered copy of that centre. The unseen target attack is
//! a mixture over families whose components sit at fresh jittered centres,
//! pulled towards the benign mean by `target_displacement`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::advscl::LabeledExampleSet;
use crate::error::{Error, Result};
use crate::numerics::{norm2, sq_dist, Matrix, Rng};

pub const BENIGN_ID: &str = "benign";
pub const TARGET_ID: &str = "target";
const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub families: usize,
    pub attacks_per_family: Vec<usize>,
    pub dim: usize,
    /// Minimum pairwise distance between family centres.
    pub family_separation: f64,
    /// Standard deviation of an attack's samples around its centre.
    pub within_family_spread: f64,
    /// Per-attack samples in each of the acquisition and clustering splits.
    pub samples_per_attack: usize,
    pub target_mixture: Vec<f64>,
    pub seed: u64,
    pub family_radius: f64,
    /// Expected distance of an attack centre from its family centre.
    pub center_jitter: f64,
    /// Attack spreads are drawn from `spread * [1 - v, 1 + v]`.
    pub spread_variation: f64,
    /// Adversarial target samples (and as many benign ones).
    pub target_samples: usize,
    /// Fraction of the family radius the target is moved towards the origin.
    pub target_displacement: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            families: 3,
            attacks_per_family: vec![3, 3, 3],
            dim: 16,
            family_separation: 4.0,
            within_family_spread: 1.0,
            samples_per_attack: 100,
            target_mixture: vec![1.0 / 3.0; 3],
            seed: 7,
            family_radius: 3.8,
            center_jitter: 0.2,
            spread_variation: 0.0,
            target_samples: 300,
            target_displacement: 0.2,
        }
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::config(field, format!("cannot parse `{v}`"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(field, format!("cannot parse `{value}`")))
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected key = value, found `{line}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families == 0 {
            return Err(Error::config("families", "must be at least 1"));
        }
        if self.attacks_per_family.len() != self.families {
            return Err(Error::config(
                "attacks_per_family",
                format!("{} entries for {} families", self.attacks_per_family.len(), self.families),
            ));
        }
        if self.attacks_per_family.iter().any(|&a| a == 0) {
            return Err(Error::config("attacks_per_family", "every count must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.samples_per_attack < 2 {
            return Err(Error::config("samples_per_attack", "must be at least 2"));
        }
        if self.target_samples == 0 {
            return Err(Error::config("target_samples", "must be at least 1"));
        }
        if !(self.within_family_spread > 0.0) {
            return Err(Error::config("within_family_spread", "must be positive"));
        }
        if !(self.family_separation > self.within_family_spread) {
            return Err(Error::config("family_separation", "must exceed within_family_spread"));
        }
        if !(self.family_radius > 0.0) {
            return Err(Error::config("family_radius", "must be positive"));
        }
        if !(self.center_jitter >= 0.0) {
            return Err(Error::config("center_jitter", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.spread_variation) {
            return Err(Error::config("spread_variation", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.target_displacement) {
            return Err(Error::config("target_displacement", "must lie in [0, 1)"));
        }
        if self.target_mixture.len() != self.families {
            return Err(Error::config(
                "target_mixture",
                format!("{} weights for {} families", self.target_mixture.len(), self.families),
            ));
        }
        if self.target_mixture.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("target_mixture", "weights must be non-negative"));
        }
        let total: f64 = self.target_mixture.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::config("target_mixture", format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn attack_count(&self) -> usize {
        self.attacks_per_family.iter().sum()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "families" => self.families = parse_one(key, value)?,
            "attacks_per_family" => self.attacks_per_family = parse_list(key, value)?,
            "dim" => self.dim = parse_one(key, value)?,
            "family_separation" => self.family_separation = parse_one(key, value)?,
            "within_family_spread" => self.within_family_spread = parse_one(key, value)?,
            "samples_per_attack" => self.samples_per_attack = parse_one(key, value)?,
            "target_mixture" => self.target_mixture = parse_list(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "family_radius" => self.family_radius = parse_one(key, value)?,
            "center_jitter" => self.center_jitter = parse_one(key, value)?,
            "spread_variation" => self.spread_variation = parse_one(key, value)?,
            "target_samples" => self.target_samples = parse_one(key, value)?,
            "target_displacement" => self.target_displacement = parse_one(key, value)?,
            _ => return Err(Error::config(key, "unknown synth setting")),
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        let pairs = parse_key_values(text)?;
        let explicit_mixture = pairs.iter().any(|(k, _)| k == "target_mixture");
        for (k, v) in &pairs {
            spec.set(k, v)?;
        }
        if !explicit_mixture {
            spec.target_mixture = vec![1.0 / spec.families as f64; spec.families];
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthSpec::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "families = {}", self.families);
        let _ = writeln!(
            s,
            "attacks_per_family = {}",
            join(&self.attacks_per_family.iter().map(|a| a.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "family_separation = {:?}", self.family_separation);
        let _ = writeln!(s, "within_family_spread = {:?}", self.within_family_spread);
        let _ = writeln!(s, "samples_per_attack = {}", self.samples_per_attack);
        let _ = writeln!(
            s,
            "target_mixture = {}",
            join(&self.target_mixture.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>())
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "family_radius = {:?}", self.family_radius);
        let _ = writeln!(s, "center_jitter = {:?}", self.center_jitter);
        let _ = writeln!(s, "spread_variation = {:?}", self.spread_variation);
        let _ = writeln!(s, "target_samples = {}", self.target_samples);
        let _ = writeln!(s, "target_displacement = {:?}", self.target_displacement);
        s
    }

    /// Attack ids `f{family}a{index}` in family order.
    pub fn attack_ids(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.attack_count());
        for (f, &n) in self.attacks_per_family.iter().enumerate() {
            for a in 0..n {
                out.push(format!("f{f}a{a}"));
            }
        }
        out
    }
}

/// The planted geometry behind a generated pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGeometry {
    pub family_centers: Vec<Vec<f64>>,
    pub attack_centers: Vec<Vec<f64>>,
    pub attack_spreads: Vec<f64>,
    /// Family of every attack, in attack order.
    pub families: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPool {
    pub attack_ids: Vec<String>,
    /// Adversarial examples used to train the contrastive encoder.
    pub acquisition: LabeledExampleSet,
    /// Held-out adversarial examples that form the domains.
    pub clustering: LabeledExampleSet,
    /// Benign counterparts of `acquisition`, tagged with the same attack ids.
    pub benign_acquisition: LabeledExampleSet,
    /// Benign counterparts of `clustering`.
    pub benign_clustering: LabeledExampleSet,
    pub geometry: PlantedGeometry,
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm2(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn place_family_centers(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let min_sq = spec.family_separation * spec.family_separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.families);
    let mut attempts = 0;
    while centers.len() < spec.families {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(Error::InfeasibleSeparation {
                families: spec.families,
                separation: spec.family_separation,
                attempts,
            });
        }
        attempts += 1;
        let c: Vec<f64> = random_unit(spec.dim, rng).into_iter().map(|x| x * spec.family_radius).collect();
        if centers.iter().all(|o| sq_dist(o, &c) >= min_sq) {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn jitter(center: &[f64], amount: f64, rng: &mut Rng) -> Vec<f64> {
    let scale = amount / (center.len() as f64).sqrt();
    center.iter().map(|c| c + scale * rng.normal()).collect()
}

fn gaussian_rows(center: &[f64], spread: f64, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| center.iter().map(|c| c + spread * rng.normal()).collect())
        .collect()
}

/// Draws the planted geometry and every example split.
pub fn gen_pool(spec: &SynthSpec) -> Result<SynthPool> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut geo_rng = root.substream("geometry");
    let family_centers = place_family_centers(spec, &mut geo_rng)?;
    let mut families = Vec::new();
    let mut attack_centers = Vec::new();
    let mut attack_spreads = Vec::new();
    for (f, &n) in spec.attacks_per_family.iter().enumerate() {
        for _ in 0..n {
            families.push(f);
            attack_centers.push(jitter(&family_centers[f], spec.center_jitter, &mut geo_rng));
            let v = spec.spread_variation;
            attack_spreads.push(spec.within_family_spread * geo_rng.uniform_in(1.0 - v, 1.0 + v));
        }
    }
    let ids = spec.attack_ids();
    let n = spec.samples_per_attack;
    let split = |label: &str, benign: bool| -> Result<LabeledExampleSet> {
        let mut rng = root.substream(label);
        let mut rows = Vec::with_capacity(ids.len() * n);
        let mut labels = Vec::with_capacity(ids.len() * n);
        let origin = vec![0.0; spec.dim];
        for (a, id) in ids.iter().enumerate() {
            let r = if benign {
                gaussian_rows(&origin, 1.0, n, &mut rng)
            } else {
                gaussian_rows(&attack_centers[a], attack_spreads[a], n, &mut rng)
            };
            rows.extend(r);
            labels.extend(std::iter::repeat(id.clone()).take(n));
        }
        LabeledExampleSet::from_rows(&rows, labels)
    };
    Ok(SynthPool {
        acquisition: split("acquisition", false)?,
        clustering: split("clustering", false)?,
        benign_acquisition: split("benign-acquisition", true)?,
        benign_clustering: split("benign-clustering", true)?,
        attack_ids: ids.clone(),
        geometry: PlantedGeometry {
            family_centers,
            attack_centers,
            attack_spreads,
            families,
        },
    })
}

/// Unseen target: `target_samples` adversarial rows tagged [`TARGET_ID`]
/// followed by as many benign rows tagged [`BENIGN_ID`].
pub fn gen_target(spec: &SynthSpec, geometry: &PlantedGeometry, rng: &mut Rng) -> Result<LabeledExampleSet> {
    spec.validate()?;
    if geometry.family_centers.len() != spec.families {
        return Err(Error::ShapeMismatch("geometry does not match the generator settings".into()));
    }
    let keep = 1.0 - spec.target_displacement;
    let centers: Vec<Vec<f64>> = geometry
        .family_centers
        .iter()
        .map(|c| {
            let moved: Vec<f64> = c.iter().map(|v| v * keep).collect();
            jitter(&moved, spec.center_jitter, rng)
        })
        .collect();
    let mut cumulative = Vec::with_capacity(spec.families);
    let mut acc = 0.0;
    for w in &spec.target_mixture {
        acc += w;
        cumulative.push(acc);
    }
    let mut rows = Vec::with_capacity(2 * spec.target_samples);
    for _ in 0..spec.target_samples {
        let u = rng.uniform() * acc;
        let f = cumulative.iter().position(|&c| u < c).unwrap_or(spec.families - 1);
        rows.extend(gaussian_rows(&centers[f], spec.within_family_spread, 1, rng));
    }
    rows.extend(gaussian_rows(&vec![0.0; spec.dim], 1.0, spec.target_samples, rng));
    let mut labels = vec![TARGET_ID.to_string(); spec.target_samples];
    labels.extend(std::iter::repeat(BENIGN_ID.to_string()).take(spec.target_samples));
    LabeledExampleSet::new(Matrix::from_rows(&rows)?, labels)
}
