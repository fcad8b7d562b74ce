use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::config::{hex_sha256, NetRole, RunConfig};
use super::plot::{line_chart, Series};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::generator::sample_batch;
use crate::oracle::{grid_argmax, mode_coverage, GridSpec, ModeReport};
use crate::rewards::{weighted_value, RewardKind, RewardTerm};
use crate::rng::{derive, normal_vec, stream};
use crate::scorenet::{pretrain_denoiser, DenoiseModel, Denoiser, PretrainConfig};
use crate::trainer::{train, Control, FrozenNets, IterationRecord, TrainConfig, TrainHooks};

/// Largest probe error accepted for a single-point dataset.
pub const POINT_PROBE_TOLERANCE: f64 = 1e-2;

/// Record of what a command did, written as `manifest_<command>.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

/// Result of a command: its manifest and a human-readable summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub summary: String,
}

struct Artifacts<'a> {
    out: &'a Path,
    written: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(out: &'a Path) -> Self {
        Artifacts { out, written: Vec::new() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(self.out).unwrap_or(path);
        self.written.push(rel.display().to_string());
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        self.record(&p);
        Ok(p)
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        ck.save(&p)?;
        self.record(&p);
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, seeds: BTreeMap<String, u64>) -> Result<Manifest> {
        let mut manifest = Manifest {
            command: command.to_string(),
            config_sha256: cfg.hash.clone(),
            seeds,
            artifacts: Vec::new(),
        };
        let name = format!("manifest_{command}.json");
        self.written.push(name.clone());
        manifest.artifacts = self.written;
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.out.join(name), text.as_bytes())?;
        Ok(manifest)
    }
}

fn seeds(entries: &[(&str, u64)]) -> BTreeMap<String, u64> {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Pretrains the configured nets and writes their checkpoints and loss curves.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Outcome> {
    let data = cfg.dataset()?;
    let mut art = Artifacts::new(&cfg.out);
    let mut seed_log = vec![("seed", cfg.seed)];
    let mut summary = String::new();
    let mut phi = None;
    for (i, role) in cfg.pretrain.nets.iter().enumerate() {
        let p = &cfg.pretrain;
        let dataset = match role {
            NetRole::Smooth => data.with_component_std(p.smoothed_std),
            _ => data.clone(),
        };
        let pc = PretrainConfig {
            dataset,
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            label_dropout: p.label_dropout,
            conditional: *role == NetRole::Psi,
            hidden: p.hidden.clone(),
            skip: p.skip,
            lr_final: p.lr_final,
        };
        let seed = derive(cfg.seed, &[i as u64 + 1]);
        seed_log.push((role.file_stem(), seed));
        let outcome = pretrain_denoiser(&pc, seed)?;
        let stem = role.file_stem();
        art.checkpoint(
            &format!("{stem}.ckpt"),
            &Checkpoint::new("pretrain", seed, outcome.net.clone(), Some(cfg.schedule.clone())),
        )?;
        let mut csv = String::from("step,loss\n");
        for (s, l) in outcome.losses.iter().enumerate() {
            let _ = writeln!(csv, "{s},{l:e}");
        }
        art.write(&format!("pretrain_{stem}_loss.csv"), csv.as_bytes())?;
        let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
        let _ = writeln!(
            summary,
            "{stem}: {} steps, final loss (mean of last {}) {:.5}",
            p.steps,
            tail.len(),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
        if *role == NetRole::Phi {
            phi = Some(outcome.net);
        }
    }

    if let (Some(net), [component]) = (&phi, data.components()) {
        if component.std == 0.0 {
            let err = point_probe(net, &component.mean, cfg.seed)?;
            let record = json!({ "max_abs_error": err, "tolerance": POINT_PROBE_TOLERANCE });
            art.write("probe.json", format!("{record}\n").as_bytes())?;
            let _ = writeln!(summary, "single-point probe: max |denoise - x*| = {err:.2e}");
            if !(err <= POINT_PROBE_TOLERANCE) {
                return Err(Error::numeric(
                    "single-point probe",
                    format!("max error {err:.3e} exceeds {POINT_PROBE_TOLERANCE:e}"),
                ));
            }
        }
    }
    let manifest = art.finish("pretrain", cfg, seeds(&seed_log))?;
    Ok(Outcome { manifest, summary })
}

/// Largest coordinate error of the denoiser against the data point over forward-process inputs.
pub fn point_probe(net: &Denoiser, point: &[f64], seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[0x9e0b]);
    let mut worst: f64 = 0.0;
    for i in 0..256 {
        let sigma = (i as f64 + 0.5) / 256.0;
        let a = (1.0 - sigma * sigma).sqrt();
        let eps = normal_vec(&mut rng, point.len());
        let x: Vec<f64> = point.iter().zip(&eps).map(|(p, e)| a * p + sigma * e).collect();
        let pred = net.denoise(&x, sigma, None)?;
        for (p, q) in pred.iter().zip(point) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

struct TrainArtifacts<'a> {
    every: usize,
    dir: &'a Path,
    seed: u64,
    cfg: &'a RunConfig,
    written: Vec<PathBuf>,
    failed: Option<Error>,
}

impl TrainHooks for TrainArtifacts<'_> {
    fn after_iteration(&mut self, record: &IterationRecord, theta: &Denoiser) -> Result<Control> {
        if self.every > 0 && (record.iter + 1).is_multiple_of(self.every) {
            let p = self.dir.join(format!("checkpoints/theta_{:06}.ckpt", record.iter + 1));
            Checkpoint::new("train", self.seed, theta.clone(), Some(self.cfg.schedule.clone())).save(&p)?;
            self.written.push(p);
        }
        Ok(Control::Continue)
    }

    fn on_divergence(&mut self, _iteration: usize, last_good: &Denoiser) {
        let p = self.dir.join("theta_last_good.ckpt");
        match Checkpoint::new("train", self.seed, last_good.clone(), Some(self.cfg.schedule.clone())).save(&p) {
            Ok(()) => self.written.push(p),
            Err(e) => self.failed = Some(e),
        }
    }
}

fn load_net(path: &Path) -> Result<Denoiser> {
    Ok(Checkpoint::load(path)?.net)
}

/// Builds the trainer configuration from the run settings.
pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let t = &cfg.train;
    let mut tc = TrainConfig::new(t.mode, cfg.schedule.clone(), cfg.rewards.clone());
    tc.iterations = t.iterations;
    tc.batch = t.batch;
    tc.lr = t.lr;
    tc.omega_reg = t.omega_reg;
    tc.omega_cfg = t.omega_cfg;
    tc.cfg_class = t.cfg_class;
    tc.eta = t.eta;
    tc.weighting = t.weighting;
    tc.sigma_rule = t.sigma_rule;
    tc.step_rule = t.step_rule;
    tc.seed = cfg.seed;
    tc
}

/// Fine-tunes the pretrained generator and writes the final checkpoint, run log and plots.
pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let tc = train_config(cfg);
    tc.validate()?;
    let phi = load_net(&cfg.train.init)?;
    let needs_cfg = tc.all_terms().iter().any(|t| matches!(t.kind, RewardKind::CfgImplicit { .. }));
    let needs_ratio = cfg.rewards.iter().any(|t| matches!(t.kind, RewardKind::DensityRatio));
    let psi = if needs_cfg { Some(load_net(&cfg.train.psi)?) } else { None };
    let smooth = if needs_ratio { Some(load_net(&cfg.train.smooth)?) } else { None };

    let mut nets = FrozenNets::new(&phi);
    nets.cfg = psi.as_ref().map(|n| n as &dyn DenoiseModel);
    nets.ratio = smooth.as_ref().map(|b| (&phi as &dyn DenoiseModel, b as &dyn DenoiseModel));

    let mut hooks = TrainArtifacts {
        every: cfg.train.checkpoint_every,
        dir: &cfg.out,
        seed: cfg.seed,
        cfg,
        written: Vec::new(),
        failed: None,
    };
    let result = train(&tc, &nets, &mut hooks);
    if let Some(e) = hooks.failed.take() {
        return Err(e);
    }
    let outcome = result?;

    let mut art = Artifacts::new(&cfg.out);
    for p in &hooks.written {
        art.record(p);
    }
    art.checkpoint(
        "theta.ckpt",
        &Checkpoint::new("train", cfg.seed, outcome.theta.clone(), Some(cfg.schedule.clone())),
    )?;
    let log = &outcome.log;
    art.write("runlog.csv", log.to_csv(cfg.wall_clock).as_bytes())?;

    let iters = |f: &dyn Fn(&IterationRecord) -> f64| -> Vec<(f64, f64)> {
        log.records.iter().map(|r| (r.iter as f64, f(r))).collect()
    };
    let values: Vec<Series> = log
        .term_names
        .iter()
        .enumerate()
        .map(|(i, n)| Series { name: n, points: iters(&|r| r.terms[i].value) })
        .collect();
    art.write("plots/reward_values.svg", line_chart("Reward values", "iteration", &values).as_bytes())?;
    let mut norms: Vec<Series> = log
        .term_names
        .iter()
        .enumerate()
        .map(|(i, n)| Series { name: n, points: iters(&|r| r.terms[i].raw_norm) })
        .collect();
    norms.push(Series { name: "regularization", points: iters(&|r| r.reg_grad_norm) });
    art.write("plots/grad_norms.svg", line_chart("Gradient norms", "iteration", &norms).as_bytes())?;
    let cos = [Series { name: "cos(reward, reg)", points: iters(&|r| r.cos_reward_reg) }];
    art.write(
        "plots/cos_reward_reg.svg",
        line_chart("Cosine between reward and regularization gradients", "iteration", &cos).as_bytes(),
    )?;

    let mut summary = format!("{} for {} iterations (K = {})\n", tc.mode, log.records.len(), tc.schedule.steps());
    if let Some(last) = log.records.last() {
        for (n, t) in log.term_names.iter().zip(&last.terms) {
            let _ = writeln!(summary, "  {n}: value {:.4}, raw gradient norm {:.3e}", t.value, t.raw_norm);
        }
        let _ = writeln!(summary, "  ||theta - phi||^2 = {:.4e}", last.reg_loss);
    }
    let manifest = art.finish("train", cfg, seeds(&[("seed", cfg.seed)]))?;
    Ok(Outcome { manifest, summary })
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Draws samples from a checkpoint and writes them with a provenance header.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    let s = &cfg.sample;
    let bytes = std::fs::read(&s.checkpoint).map_err(|e| Error::file(&s.checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes, &s.checkpoint)?;
    let schedule = ck.schedule.clone().unwrap_or_else(|| cfg.schedule.clone());
    let trajectories = sample_batch(&ck.net, &schedule, s.eta, s.class, s.count, cfg.seed)?;
    let d = ck.net.dim();

    let mut head = String::new();
    let _ = writeln!(head, "# checkpoint_sha256={}", hex_sha256(&bytes));
    let _ = writeln!(head, "# seed={}", cfg.seed);
    let _ = writeln!(head, "# eta={}", s.eta);
    let _ = writeln!(head, "# steps={}", schedule.steps());
    let _ = writeln!(head, "# count={}", s.count);
    let columns: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();

    let mut csv = head.clone();
    let _ = writeln!(csv, "{}", columns.join(","));
    for t in &trajectories {
        let _ = writeln!(csv, "{}", fmt_row(t.sample()));
    }
    let mut art = Artifacts::new(&cfg.out);
    art.write("samples.csv", csv.as_bytes())?;

    if s.trajectory {
        let mut tcsv = head;
        let _ = writeln!(tcsv, "sample,level,sigma,{}", columns.join(","));
        for (i, t) in trajectories.iter().enumerate() {
            for (j, x) in t.states.iter().enumerate() {
                let level = schedule.steps() - j;
                let _ = writeln!(tcsv, "{i},{level},{},{}", schedule.sigma(level), fmt_row(x));
            }
        }
        art.write("trajectory.csv", tcsv.as_bytes())?;
    }
    let summary = format!(
        "{} samples from {} (K = {}, eta = {})\n",
        s.count,
        s.checkpoint.display(),
        schedule.steps(),
        s.eta
    );
    let manifest = art.finish("sample", cfg, seeds(&[("seed", cfg.seed)]))?;
    Ok(Outcome { manifest, summary })
}

/// Reads a samples CSV: `#` comment lines, a header of `x0,x1,...`, then one row per sample.
pub fn read_samples(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut dim = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(d) = dim else {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.iter().enumerate().any(|(j, c)| *c != format!("x{j}")) {
                return Err(Error::Parse {
                    row,
                    message: format!("expected a header `x0,x1,...`, got `{line}`"),
                });
            }
            dim = Some(cols.len());
            continue;
        };
        let values: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                row,
                message: format!("not a row of numbers: `{line}`"),
            })?;
        if values.len() != d {
            return Err(Error::Parse {
                row,
                message: format!("expected {d} columns, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { row, message: "non-finite value".into() });
        }
        out.push(values);
    }
    if dim.is_none() {
        return Err(Error::Parse { row: 0, message: "missing header row".into() });
    }
    Ok(out)
}

fn explicit_terms(cfg: &RunConfig) -> Result<(Vec<RewardTerm>, Vec<f64>)> {
    if cfg.rewards.is_empty() {
        return Err(Error::config(None, "no reward terms configured (`reward.<i>.name`)"));
    }
    if let Some(t) = cfg.rewards.iter().find(|t| !t.is_explicit()) {
        return Err(Error::config(None, format!("reward `{}` has no analytic value", t.name)));
    }
    let weights = cfg.rewards.iter().map(|t| t.base_weight).collect();
    Ok((cfg.rewards.clone(), weights))
}

fn grid_report(cfg: &RunConfig, terms: &[RewardTerm], weights: &[f64], dim: usize) -> Result<ModeReport> {
    let g = &cfg.oracle;
    grid_argmax(terms, weights, &GridSpec::cube(dim, g.lo, g.hi, g.resolution)?)
}

fn reward_dim(terms: &[RewardTerm], cfg: &RunConfig) -> Result<usize> {
    use crate::rewards::ExplicitReward;
    for t in terms {
        if let RewardKind::Explicit { reward, .. } = &t.kind {
            match reward {
                ExplicitReward::ModeProximity { centers, .. } => return Ok(centers[0].len()),
                ExplicitReward::HalfSpace { direction, .. } => return Ok(direction.len()),
                ExplicitReward::AntiSaturation { .. } => {}
            }
        }
    }
    Ok(cfg.dataset().map(|d| d.dim()).unwrap_or(2))
}

fn mode_report_table(r: &ModeReport, terms: &[RewardTerm]) -> String {
    let mut s = format!("argmax {:?}  combined {:.6}\n", r.argmax, r.max_value);
    for (t, v) in terms.iter().zip(&r.per_term) {
        let _ = writeln!(s, "  {:<24} {:.6}", t.name, v);
    }
    for (p, v) in &r.runners_up {
        let _ = writeln!(s, "  local max {p:?} {v:.6}");
    }
    s
}

/// Scores a samples file against the configured rewards and the grid oracle.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let path = &cfg.eval.samples;
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let samples = read_samples(&text)?;
    let (terms, weights) = explicit_terms(cfg)?;
    let dim = samples.first().map_or(reward_dim(&terms, cfg)?, Vec::len);
    let report = grid_report(cfg, &terms, &weights, dim)?;
    let modes = cfg.eval.modes.clone().unwrap_or_else(|| vec![report.argmax.clone()]);
    let cov = mode_coverage(&samples, &modes, cfg.eval.radius)?;
    let n = samples.len() as f64;
    let mut reward_sum = 0.0;
    for x in &samples {
        reward_sum += weighted_value(&terms, &weights, x)?;
    }
    let support = match cfg.dataset() {
        Ok(d) => Some(samples.iter().map(|x| d.distance_to_support(x)).sum::<f64>() / n),
        Err(_) => None,
    };
    let metrics = json!({
        "record": "metrics",
        "samples": samples.len(),
        "radius": cfg.eval.radius,
        "modes": modes,
        "on_mode": cov.on_mode,
        "per_mode": cov.per_mode,
        "mean_min_distance": cov.mean_min_distance,
        "mean_combined_reward": reward_sum / n,
        "mean_distance_to_support": support,
    });
    let mut mode_record = serde_json::to_value(&report).expect("report serializes");
    mode_record["record"] = json!("mode_report");
    let jsonl = format!("{metrics}\n{mode_record}\n");

    let mut table = String::new();
    let _ = writeln!(table, "samples                   {}", samples.len());
    for (m, f) in modes.iter().zip(&cov.per_mode) {
        let _ = writeln!(table, "within {} of {m:?}  {f:.4}", cfg.eval.radius);
    }
    let _ = writeln!(table, "on-mode fraction          {:.4}", cov.on_mode);
    let _ = writeln!(table, "mean combined reward      {:.6}", reward_sum / n);
    if let Some(s) = support {
        let _ = writeln!(table, "mean distance to support  {s:.6}");
    }
    table.push_str(&mode_report_table(&report, &terms));

    let mut art = Artifacts::new(&cfg.out);
    art.write("eval.jsonl", jsonl.as_bytes())?;
    art.write("eval.txt", table.as_bytes())?;
    let manifest = art.finish("eval", cfg, seeds(&[("seed", cfg.seed)]))?;
    Ok(Outcome { manifest, summary: table })
}

/// Brute-force maximization of the configured combined reward.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<Outcome> {
    let (terms, weights) = explicit_terms(cfg)?;
    let dim = reward_dim(&terms, cfg)?;
    let report = grid_report(cfg, &terms, &weights, dim)?;
    let mut record = serde_json::to_value(&report).expect("report serializes");
    record["record"] = json!("mode_report");
    let mut art = Artifacts::new(&cfg.out);
    art.write("oracle.jsonl", format!("{record}\n").as_bytes())?;
    let summary = mode_report_table(&report, &terms);
    let manifest = art.finish("oracle", cfg, seeds(&[("seed", cfg.seed)]))?;
    Ok(Outcome { manifest, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_csv_parsing() {
        let ok = "# seed=1\nx0,x1\n1,2\n\n-0.5,3e-2\n";
        assert_eq!(read_samples(ok).unwrap(), vec![vec![1.0, 2.0], vec![-0.5, 0.03]]);
        assert!(read_samples("# only comments\nx0,x1\n").unwrap().is_empty());

        let row = |t: &str| match read_samples(t) {
            Err(Error::Parse { row, .. }) => row,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(row("# c\nx0,x1\n1,2\n1,oops\n"), 4);
        assert_eq!(row("x0,x1\n1,2,3\n"), 2);
        assert_eq!(row("a,b\n"), 1);
        assert_eq!(row("x0\nNaN\n"), 2);
        assert_eq!(row(""), 0);
    }
}
