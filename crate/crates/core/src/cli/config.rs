//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are grouped by dotted prefixes:
//!
//! ```text
//! seed = 7
//! out = runs/common
//! dataset = mixture
//! dataset.means = 1,1; -1,1; 1,-1; -1,-1
//! dataset.std = 0.25
//! schedule.steps = 4
//! train.mode = R0
//! reward.0.name = mode_proximity
//! reward.0.centers = 1,1; -1,1
//! reward.0.tau = 0.5
//! reward.0.weight = 1
//! ```
//!
//! Every key must be recognised and every number is range-checked when the file loads.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::EtaPolicy;
use crate::rewards::{parse_points, ExplicitReward, RewardKind, RewardTerm, SigmaRule, Weighting};
use crate::schedule::{LadderKind, NoiseSchedule};
use crate::trainer::{Mode, StepRule};

/// Which nets `pretrain` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    /// Unconditional generator initialization.
    Phi,
    /// Class-conditional net for guidance.
    Psi,
    /// Unconditional net on the smoothed data.
    Smooth,
}

impl NetRole {
    pub fn file_stem(self) -> &'static str {
        match self {
            NetRole::Phi => "phi",
            NetRole::Psi => "psi",
            NetRole::Smooth => "smooth",
        }
    }
}

impl FromStr for NetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "phi" => Ok(NetRole::Phi),
            "psi" => Ok(NetRole::Psi),
            "smooth" => Ok(NetRole::Smooth),
            other => Err(Error::invalid(format!("unknown net `{other}` (phi, psi, smooth)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub label_dropout: f64,
    pub hidden: Vec<usize>,
    pub skip: bool,
    /// Component width of the smoothed dataset.
    pub smoothed_std: f64,
    pub nets: Vec<NetRole>,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub mode: Mode,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub omega_reg: f64,
    pub omega_cfg: f64,
    pub cfg_class: Option<usize>,
    pub eta: EtaPolicy,
    pub weighting: Weighting,
    pub sigma_rule: SigmaRule,
    pub step_rule: StepRule,
    /// Write `checkpoints/theta_<iter>.ckpt` every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub init: PathBuf,
    pub psi: PathBuf,
    pub smooth: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SampleSettings {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub eta: EtaPolicy,
    pub class: Option<usize>,
    pub trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub samples: PathBuf,
    pub radius: f64,
    /// Modes to measure coverage against; the grid argmax when absent.
    pub modes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct GridSettings {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// sha256 of the config text.
    pub hash: String,
    pub seed: u64,
    pub out: PathBuf,
    dataset: Option<Dataset>,
    pub schedule: NoiseSchedule,
    pub pretrain: PretrainSettings,
    pub train: TrainSettings,
    pub rewards: Vec<RewardTerm>,
    pub sample: SampleSettings,
    pub eval: EvalSettings,
    pub oracle: GridSettings,
    /// Record real wall-clock times in the run log instead of zeros.
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::read(text)?;
        let cfg = RunConfig::from_entries(&mut e)?;
        e.reject_unused()?;
        Ok(RunConfig {
            hash: hex_sha256(text.as_bytes()),
            ..cfg
        })
    }

    /// The dataset, which is required by `pretrain` and `eval`.
    pub fn dataset(&self) -> Result<&Dataset> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::config(None, "missing required key `dataset`"))
    }

    pub fn has_dataset(&self) -> bool {
        self.dataset.is_some()
    }

    /// Resolves a configured path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn from_entries(e: &mut Entries) -> Result<Self> {
        let seed = e.num("seed", 0u64, |_| true, "")?;
        let out = PathBuf::from(e.string("out").unwrap_or_else(|| "runs/default".into()));
        let dataset = read_dataset(e)?;

        let steps = e.num("schedule.steps", 4usize, |k| (1..=64).contains(k), "1..=64")?;
        let kind = e.parsed("schedule.kind", LadderKind::Linear)?;
        let schedule = NoiseSchedule::new(steps, kind)?;

        let pretrain = PretrainSettings {
            steps: e.num("pretrain.steps", 4000usize, |v| *v >= 1, ">= 1")?,
            batch: e.num("pretrain.batch", 128usize, |v| *v >= 1, ">= 1")?,
            lr: e.real("pretrain.lr", 1e-3, |v| *v > 0.0 && v.is_finite(), "> 0")?,
            lr_final: e.real("pretrain.lr_final", 1e-5, |v| *v > 0.0 && v.is_finite(), "> 0")?,
            label_dropout: e.real("pretrain.label_dropout", 0.1, |v| (0.0..=1.0).contains(v), "[0, 1]")?,
            hidden: e.list("pretrain.hidden", vec![64, 64, 64], |v: &usize| *v >= 1, ">= 1")?,
            skip: e.parsed("pretrain.skip", true)?,
            smoothed_std: e.real("pretrain.smoothed_std", 0.5, |v| *v > 0.0 && v.is_finite(), "> 0")?,
            nets: e.list("pretrain.nets", vec![NetRole::Phi, NetRole::Psi, NetRole::Smooth], |_| true, "")?,
        };
        if pretrain.lr_final > pretrain.lr {
            return Err(e.error_at("pretrain.lr_final", "must not exceed pretrain.lr"));
        }

        let floor = e.real("train.norm_floor", 1e-8, |v| *v > 0.0, "> 0")?;
        let weighting = match e.string("train.weighting").as_deref() {
            None | Some("normalized") => Weighting::Normalized { floor },
            Some("fixed") => Weighting::Fixed,
            Some(other) => {
                return Err(e.error_at("train.weighting", format!("expected normalized|fixed, got `{other}`")))
            }
        };
        let sigma_lo = e.real("train.sigma_lo", 0.2, |v| *v > 0.0 && *v < 1.0, "(0, 1)")?;
        let sigma_hi = e.real("train.sigma_hi", 0.8, |v| *v > 0.0 && *v < 1.0, "(0, 1)")?;
        let sigma_rule =
            SigmaRule::new(sigma_lo, sigma_hi).map_err(|err| e.error_at("train.sigma_hi", err.to_string()))?;
        let step_rule = match e.string("train.step_rule").as_deref() {
            None | Some("uniform") => StepRule::Uniform,
            Some(v) => match v.parse::<usize>() {
                Ok(k) if (1..=steps).contains(&k) => StepRule::Fixed(k),
                _ => return Err(e.error_at("train.step_rule", format!("expected `uniform` or 1..={steps}"))),
            },
        };
        let train = TrainSettings {
            mode: e.parsed("train.mode", Mode::R0)?,
            iterations: e.num("train.iterations", 1000usize, |v| *v >= 1, ">= 1")?,
            batch: e.num("train.batch", 64usize, |v| *v >= 1, ">= 1")?,
            lr: e.real("train.lr", 1e-3, |v| *v > 0.0 && v.is_finite(), "> 0")?,
            omega_reg: e.real("train.omega_reg", 0.1, |v| *v >= 0.0 && v.is_finite(), ">= 0")?,
            omega_cfg: e.real("train.omega_cfg", 0.0, |v| *v >= 0.0 && v.is_finite(), ">= 0")?,
            cfg_class: e.opt_num("train.cfg_class")?,
            eta: e.parsed("train.eta", EtaPolicy::Random)?,
            weighting,
            sigma_rule,
            step_rule,
            checkpoint_every: e.num("train.checkpoint_every", 0usize, |_| true, "")?,
            init: e.path("train.init", "phi.ckpt"),
            psi: e.path("train.psi", "psi.ckpt"),
            smooth: e.path("train.smooth", "smooth.ckpt"),
        };
        if train.omega_cfg > 0.0 && train.cfg_class.is_none() {
            return Err(e.error_at("train.omega_cfg", "omega_cfg > 0 requires train.cfg_class"));
        }

        let rewards = read_rewards(e)?;

        let sample = SampleSettings {
            checkpoint: e.path("sample.checkpoint", "theta.ckpt"),
            count: e.num("sample.count", 1000usize, |_| true, "")?,
            eta: e.parsed("sample.eta", EtaPolicy::Random)?,
            class: e.opt_num("sample.class")?,
            trajectory: e.parsed("sample.trajectory", false)?,
        };
        let eval = EvalSettings {
            samples: e.path("eval.samples", "samples.csv"),
            radius: e.real("eval.radius", 0.3, |v| *v > 0.0 && v.is_finite(), "> 0")?,
            modes: match e.string("eval.modes") {
                Some(v) => Some(parse_points("eval.modes", &v).map_err(|err| e.error_at("eval.modes", err.to_string()))?),
                None => None,
            },
        };
        let oracle = GridSettings {
            lo: e.real("oracle.lo", -3.0, |v| v.is_finite(), "finite")?,
            hi: e.real("oracle.hi", 3.0, |v| v.is_finite(), "finite")?,
            resolution: e.num("oracle.resolution", 401usize, |v| *v >= 2, ">= 2")?,
        };
        if oracle.hi <= oracle.lo {
            return Err(e.error_at("oracle.hi", "must exceed oracle.lo"));
        }
        let wall_clock = e.parsed("log.wall_clock", false)?;

        Ok(RunConfig {
            hash: String::new(),
            seed,
            out,
            dataset,
            schedule,
            pretrain,
            train,
            rewards,
            sample,
            eval,
            oracle,
            wall_clock,
        })
    }
}

fn read_dataset(e: &mut Entries) -> Result<Option<Dataset>> {
    let Some(kind) = e.string("dataset") else {
        return Ok(None);
    };
    let points = |e: &mut Entries, key: &str| -> Result<Vec<Vec<f64>>> {
        let v = e.required(key)?;
        parse_points(key, &v).map_err(|err| e.error_at(key, err.to_string()))
    };
    let ds = match kind.as_str() {
        "point" => {
            let mut p = points(e, "dataset.point")?;
            if p.len() != 1 {
                return Err(e.error_at("dataset.point", "expected a single point"));
            }
            Dataset::point(p.remove(0))
        }
        "standard_normal" => {
            let dim = e.num("dataset.dim", 2usize, |v| *v >= 1, ">= 1")?;
            Dataset::standard_normal(dim)
        }
        "mixture" => {
            let means = points(e, "dataset.means")?;
            let std = e.real("dataset.std", 0.1, |v| *v >= 0.0 && v.is_finite(), ">= 0")?;
            let labels = e.opt_list::<usize>("dataset.labels")?;
            let weights = e.opt_list::<f64>("dataset.weights")?;
            Dataset::mixture(means, std, labels, weights)
        }
        other => {
            return Err(e.error_at(
                "dataset",
                format!("unknown dataset `{other}` (point, standard_normal, mixture)"),
            ))
        }
    };
    ds.map(Some).map_err(|err| e.error_at("dataset", err.to_string()))
}

const REWARD_FIELDS: [&str; 9] = [
    "name", "weight", "scale", "centers", "tau", "direction", "offset", "lambda", "class",
];

fn read_rewards(e: &mut Entries) -> Result<Vec<RewardTerm>> {
    let mut indices = BTreeSet::new();
    for key in e.keys_with_prefix("reward.") {
        let mut parts = key.splitn(3, '.');
        parts.next();
        let idx = parts.next().and_then(|i| i.parse::<usize>().ok());
        let field = parts.next();
        match (idx, field) {
            (Some(i), Some(f)) if REWARD_FIELDS.contains(&f) => {
                indices.insert(i);
            }
            _ => return Err(e.error_at(&key, format!("unknown key `{key}`"))),
        }
    }
    let mut terms = Vec::new();
    for i in indices {
        let key = |f: &str| format!("reward.{i}.{f}");
        let name = e.required(&key("name"))?;
        let weight = e.real(&key("weight"), 1.0, |v| *v > 0.0 && v.is_finite(), "> 0")?;
        let label = format!("{name}.{i}");
        let allowed: &[&str] = match name.as_str() {
            "mode_proximity" => &["centers", "tau", "scale"],
            "half_space" => &["direction", "offset", "scale"],
            "anti_saturation" => &["lambda", "scale"],
            "cfg" => &["class"],
            "density_ratio" => &[],
            other => {
                return Err(e.error_at(
                    &key("name"),
                    format!("unknown reward `{other}` (mode_proximity, half_space, anti_saturation, cfg, density_ratio)"),
                ))
            }
        };
        for f in REWARD_FIELDS.iter().filter(|f| !["name", "weight"].contains(f)) {
            if !allowed.contains(f) && e.contains(&key(f)) {
                return Err(e.error_at(&key(f), format!("reward `{name}` takes no parameter `{f}`")));
            }
        }
        let kind = match name.as_str() {
            "cfg" => RewardKind::CfgImplicit {
                class: e.num(&key("class"), 0usize, |_| true, "")?,
            },
            "density_ratio" => RewardKind::DensityRatio,
            _ => {
                let mut params = BTreeMap::new();
                for f in allowed.iter().filter(|f| **f != "scale") {
                    if let Some(v) = e.string(&key(f)) {
                        params.insert(f.to_string(), v);
                    }
                }
                let reward =
                    ExplicitReward::from_name(&name, &params).map_err(|err| e.error_at(&key("name"), err.to_string()))?;
                let scale = e.real(&key("scale"), 1.0, |v| *v > 0.0 && v.is_finite(), "> 0")?;
                RewardKind::Explicit { reward, scale }
            }
        };
        terms.push(RewardTerm::new(label, weight, kind)?);
    }
    Ok(terms)
}

/// Raw entries with line numbers, tracking which keys were consumed.
struct Entries {
    map: BTreeMap<String, (String, usize)>,
    used: BTreeSet<String>,
}

impl Entries {
    fn read(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::config(Some(line), format!("expected `key = value`, got `{content}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(Some(line), "empty key"));
            }
            if let Some((_, first)) = map.insert(k.to_string(), (v.to_string(), line)) {
                return Err(Error::config(Some(line), format!("duplicate key `{k}` (first set on line {first})")));
            }
        }
        Ok(Entries {
            map,
            used: BTreeSet::new(),
        })
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|(_, l)| *l)
    }

    fn error_at(&self, key: &str, message: impl Into<String>) -> Error {
        Error::config(self.line_of(key), format!("`{key}`: {}", message.into()))
    }

    fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    fn string(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key)?.0.clone();
        self.used.insert(key.to_string());
        Some(v)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.string(key)
            .ok_or_else(|| Error::config(None, format!("missing required key `{key}`")))
    }

    fn path(&mut self, key: &str, default: &str) -> PathBuf {
        PathBuf::from(self.string(key).unwrap_or_else(|| default.to_string()))
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.string(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|err: T::Err| self.error_at(key, err.to_string())),
        }
    }

    fn num<T>(&mut self, key: &str, default: T, ok: impl Fn(&T) -> bool, range: &str) -> Result<T>
    where
        T: FromStr + std::fmt::Display,
    {
        let Some(v) = self.string(key) else {
            return Ok(default);
        };
        let parsed: T = v
            .parse()
            .map_err(|_| self.error_at(key, format!("expected a number, got `{v}`")))?;
        if !ok(&parsed) {
            return Err(self.error_at(key, format!("value {parsed} out of range ({range})")));
        }
        Ok(parsed)
    }

    fn real(&mut self, key: &str, default: f64, ok: impl Fn(&f64) -> bool, range: &str) -> Result<f64> {
        self.num(key, default, ok, range)
    }

    fn opt_num<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.string(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.error_at(key, format!("expected a non-negative integer, got `{v}`"))),
        }
    }

    fn list<T>(&mut self, key: &str, default: Vec<T>, ok: impl Fn(&T) -> bool, range: &str) -> Result<Vec<T>>
    where
        T: FromStr,
    {
        match self.opt_list(key)? {
            None => Ok(default),
            Some(v) if v.is_empty() || !v.iter().all(&ok) => {
                Err(self.error_at(key, format!("every entry must be {range}")))
            }
            Some(v) => Ok(v),
        }
    }

    fn opt_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.string(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| self.error_at(key, format!("could not parse list `{v}`")))
    }

    fn reject_unused(&self) -> Result<()> {
        match self.map.iter().find(|(k, _)| !self.used.contains(*k)) {
            Some((k, (_, line))) => Err(Error::config(Some(*line), format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_dataset() {
        let cfg = RunConfig::parse("# empty\n").unwrap();
        assert_eq!(cfg.schedule.steps(), 4);
        assert_eq!(cfg.train.mode, Mode::R0);
        assert!(cfg.rewards.is_empty());
        match cfg.dataset() {
            Err(Error::Config { line: None, message }) => assert!(message.contains("`dataset`")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_config() {
        let text = "\
seed = 3
out = runs/x
dataset = mixture
dataset.means = 1,1; -1,1
dataset.std = 0.25
schedule.steps = 8
schedule.kind = cosine
train.mode = R0+
train.eta = 0.5
train.step_rule = 3
reward.1.name = half_space
reward.1.direction = 1,0
reward.0.name = mode_proximity   # comment
reward.0.centers = 1,1;-1,1
reward.0.tau = 0.5
reward.0.weight = 2
reward.2.name = cfg
reward.2.class = 1
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset().unwrap().components().len(), 2);
        assert_eq!(cfg.schedule.kind(), LadderKind::Cosine);
        assert_eq!(cfg.train.mode, Mode::R0Plus);
        assert_eq!(cfg.train.eta, EtaPolicy::Fixed(0.5));
        assert_eq!(cfg.train.step_rule, StepRule::Fixed(3));
        let names: Vec<_> = cfg.rewards.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["mode_proximity.0", "half_space.1", "cfg.2"]);
        assert_eq!(cfg.rewards[0].base_weight, 2.0);
        assert_eq!(cfg.resolve(Path::new("a.ckpt")), PathBuf::from("runs/x/a.ckpt"));
        assert_eq!(cfg.hash.len(), 64);
    }

    fn err_line(text: &str) -> (Option<usize>, String) {
        match RunConfig::parse(text) {
            Err(Error::Config { line, message }) => (line, message),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(err_line("seed = 1\nbogus = 2\n").0, Some(2));
        assert_eq!(err_line("seed = 1\n\ntrain.lr = -1\n").0, Some(3));
        assert_eq!(err_line("train.iterations = many\n").0, Some(1));
        assert_eq!(err_line("seed = 1\nno equals sign\n").0, Some(2));
        assert_eq!(err_line("seed = 1\nseed = 2\n").0, Some(2));
        assert_eq!(err_line("reward.0.name = mode_proximity\nreward.0.tau = 1\nreward.0.lambda = 1\n").0, Some(3));
        assert_eq!(err_line("reward.x.name = cfg\n").0, Some(1));
        assert_eq!(err_line("schedule.steps = 0\n").0, Some(1));
        assert_eq!(err_line("train.omega_cfg = 1\n").0, Some(1));
        let (line, msg) = err_line("dataset = mixture\n");
        assert_eq!(line, None);
        assert!(msg.contains("dataset.means"));
    }
}
