//! Pipeline stages. Each stage reads only its predecessors' files from the
//! output directory and records what it wrote in `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hybrid_lora_core::allocator::{allocate, allocate_from_full, validate_plan, Direction};
use hybrid_lora_core::checkpoint::{self, sha256_hex};
use hybrid_lora_core::lora::attach_lora;
use hybrid_lora_core::scoring::{
    alpha_report, collect_sensitivities, hybrid_score, mean_std, perturbation_scores, spearman, OracleEntry,
};
use hybrid_lora_core::trainer::{
    hybrid_train, pretrain, probe_batches, probing_warmup, validation_metric, MetricRecord,
};
use hybrid_lora_core::{AllocationPlan, HybridScoreReport, Model, ModuleId};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const M0_CKPT: &str = "m0.ckpt";
pub const PROBE_CKPT: &str = "probe.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const SCORES_FILE: &str = "scores.json";
pub const ALPHA_FILE: &str = "alpha_scores.json";
pub const PLAN_FILE: &str = "plan.json";
pub const GRID_FILE: &str = "grid.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const ORACLE_FILE: &str = "oracle.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimes {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<RunConfig>,
    pub stages: BTreeMap<String, StageTimes>,
    /// File name to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// An output directory plus the stage being run in it.
struct Stage<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    name: &'static str,
    started: u64,
    written: Vec<String>,
}

impl<'a> Stage<'a> {
    /// Validates the config, checks for existing outputs and writes the
    /// resolved config.
    fn begin(cfg: &'a RunConfig, name: &'static str, outputs: &[&str], overwrite: bool) -> Result<Self, CliError> {
        cfg.validate()?;
        let dir = cfg.resolved_output_dir();
        std::fs::create_dir_all(&dir)?;
        if !overwrite {
            if let Some(f) = outputs.iter().find(|f| dir.join(f).exists()) {
                return Err(CliError::validation(format!(
                    "{} already exists in {}; pass --overwrite to replace it",
                    f,
                    dir.display()
                )));
            }
        }
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
        eprintln!("[{name}] output directory {}", dir.display());
        Ok(Self {
            cfg,
            dir,
            name,
            started: now(),
            written: vec![CONFIG_FILE.into()],
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.path(file), bytes)?;
        self.written.push(file.into());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(file, &bytes)
    }

    fn save_model(&mut self, file: &str, model: &Model) -> Result<(), CliError> {
        let bytes = checkpoint::to_bytes(model)?;
        self.write(file, &bytes)
    }

    fn load_model(&self, file: &str) -> Result<Model, CliError> {
        let path = self.path(file);
        if !path.exists() {
            return Err(CliError::missing(format!("missing checkpoint {}", path.display())));
        }
        Ok(checkpoint::load(&path)?)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, file: &str) -> Result<T, CliError> {
        let path = self.path(file);
        let bytes = std::fs::read(&path).map_err(|e| CliError::missing(format!("missing artifact {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("malformed {}: {e}", path.display())))
    }

    fn finish(self) -> Result<PathBuf, CliError> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut manifest: RunManifest = match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => RunManifest::default(),
        };
        manifest.config = Some(self.cfg.clone());
        manifest.stages.insert(
            self.name.into(),
            StageTimes {
                started_unix: self.started,
                finished_unix: now(),
            },
        );
        for f in &self.written {
            manifest.artifacts.insert(f.clone(), sha256_hex(&std::fs::read(self.dir.join(f))?));
        }
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        eprintln!("[{}] done", self.name);
        Ok(self.dir)
    }
}

fn module_list(ids: &[ModuleId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Pretrains the starting checkpoint, attaches branches to every candidate
/// and runs the probing warmup.
pub fn cmd_probe(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf, CliError> {
    let mut st = Stage::begin(cfg, "probe", &[M0_CKPT, PROBE_CKPT], overwrite)?;
    let mut m0 = Model::new(cfg.model.clone())?;
    let losses = pretrain(&mut m0, &cfg.task, cfg.pretrain_steps, cfg.train.batch_size, cfg.pretrain_lr, cfg.train.seed)?;
    if let Some(l) = losses.last() {
        eprintln!("[probe] starting checkpoint: {} supervised steps, final loss {l:.4}", losses.len());
    }
    st.save_model(M0_CKPT, &m0)?;

    let mut probe = m0;
    let universe = probe.universe();
    attach_lora(&mut probe, &universe, cfg.rank, cfg.adapter_seed)?;
    let losses = probing_warmup(&mut probe, &cfg.task, &cfg.train)?;
    if let Some(l) = losses.last() {
        eprintln!("[probe] warmup: {} steps, final loss {l:.4}", losses.len());
    }
    st.save_model(PROBE_CKPT, &probe)?;
    st.finish()
}

/// Scores every candidate module on the probed checkpoint.
pub fn cmd_score(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf, CliError> {
    let mut st = Stage::begin(cfg, "score", &[SCORES_FILE, ALPHA_FILE], overwrite)?;
    let mut probe = st.load_model(PROBE_CKPT)?;
    let batches = probe_batches(&cfg.task, cfg.partitions, cfg.train.batch_size)?;
    let records = collect_sensitivities(&mut probe, &batches, cfg.partition_seed)?;
    let report = hybrid_score(&records, cfg.score_variant, cfg.partition_seed)?;
    report.verify().map_err(CliError::invariant)?;
    if report.entries.len() != 7 * probe.config.num_layers {
        return Err(CliError::invariant(format!(
            "score report covers {} modules, expected {}",
            report.entries.len(),
            7 * probe.config.num_layers
        )));
    }
    st.write_json(SCORES_FILE, &report)?;
    st.write_json(ALPHA_FILE, &alpha_report(&probe))?;
    st.finish()
}

fn check_universe(what: &str, got: &[ModuleId], model: &Model) -> Result<(), CliError> {
    let a: BTreeSet<ModuleId> = got.iter().copied().collect();
    let b: BTreeSet<ModuleId> = model.universe().into_iter().collect();
    if a != b || a.len() != got.len() {
        return Err(CliError::validation(format!(
            "{what} universe does not match the model universe\n  {what}: {}\n  model: {}",
            module_list(got),
            module_list(&model.universe())
        )));
    }
    Ok(())
}

/// Splits the universe into FFT and LoRA sets from the score report.
pub fn cmd_allocate(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf, CliError> {
    let mut st = Stage::begin(cfg, "allocate", &[PLAN_FILE, GRID_FILE], overwrite)?;
    let report: HybridScoreReport = st.read_json(SCORES_FILE)?;
    report.verify().map_err(CliError::invariant)?;
    let shape = Model::new(cfg.model.clone())?;
    check_universe("score report", &report.modules(), &shape)?;
    let params = shape.candidate_modules();
    let plan = match cfg.direction {
        Direction::AscendingFromLora => allocate(&report, &params, cfg.r_fft)?,
        Direction::DescendingFromFft => allocate_from_full(&report, &params, cfg.r_fft)?,
    };
    validate_plan(&plan, &params).map_err(|v| CliError::invariant(v.to_string()))?;
    eprintln!(
        "[allocate] {} FFT / {} LoRA modules, FFT parameter ratio {:.4} (budget {})",
        plan.fft_set.len(),
        plan.lora_set.len(),
        plan.used_ratio,
        plan.budget_ratio
    );
    st.write_json(PLAN_FILE, &plan)?;
    st.write(GRID_FILE, plan.grid_csv(cfg.model.num_layers).as_bytes())?;
    st.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metric: String,
    /// Validation metric of the starting checkpoint.
    pub baseline: f64,
    pub best: f64,
    pub best_step: usize,
    pub fft_modules_changed: usize,
    pub lora_base_frozen: bool,
    pub final_digest: String,
}

fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("step,stage,objective,metric,value,train_loss,train_reward,best,fft_modules,lora_modules\n");
    for r in records {
        let objective = serde_json::to_value(r.objective).expect("objective serialises");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            objective.as_str().unwrap_or_default(),
            r.metric,
            r.value,
            r.train_loss,
            r.train_reward.map(|v| v.to_string()).unwrap_or_default(),
            r.best,
            r.fft_modules,
            r.lora_modules
        )
        .unwrap();
    }
    out
}

/// Final hybrid training from the starting checkpoint under the plan.
pub fn cmd_train(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf, CliError> {
    let mut st = Stage::begin(cfg, "train", &[FINAL_CKPT, METRICS_JSONL, METRICS_CSV, TRAIN_SUMMARY], overwrite)?;
    let m0 = st.load_model(M0_CKPT)?;
    let plan: AllocationPlan = st.read_json(PLAN_FILE)?;
    let planned: Vec<ModuleId> = plan.fft_set.iter().chain(&plan.lora_set).copied().collect();
    check_universe("plan", &planned, &m0)?;

    let baseline = validation_metric(&m0, &cfg.task, &cfg.train, &cfg.grpo)?;
    let out = hybrid_train(&m0, &plan, cfg.rank, cfg.adapter_seed, &cfg.task, &cfg.train, &cfg.grpo)?;

    let mut lora_base_frozen = true;
    for &id in &plan.lora_set {
        if out.model.module_digest(id)? != m0.module_digest(id)? {
            lora_base_frozen = false;
        }
    }
    if !lora_base_frozen {
        return Err(CliError::invariant("a LoRA-set module's base weights changed during training"));
    }
    let mut fft_modules_changed = 0;
    for &id in &plan.fft_set {
        if out.model.module_digest(id)? != m0.module_digest(id)? {
            fft_modules_changed += 1;
        }
    }
    let metric = out.metrics.first().map(|m| m.metric.clone()).unwrap_or_default();
    eprintln!(
        "[train] {metric}: start {baseline:.4}, best {:.4} at step {}",
        out.best_value, out.best_step
    );

    let mut jsonl = Vec::new();
    for r in &out.metrics {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.push(b'\n');
    }
    st.write(METRICS_JSONL, &jsonl)?;
    st.write(METRICS_CSV, metrics_csv(&out.metrics).as_bytes())?;
    st.save_model(FINAL_CKPT, &out.model)?;
    st.write_json(
        TRAIN_SUMMARY,
        &TrainSummary {
            metric,
            baseline,
            best: out.best_value,
            best_step: out.best_step,
            fft_modules_changed,
            lora_base_frozen,
            final_digest: out.model.full_digest(),
        },
    )?;
    st.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleModule {
    #[serde(flatten)]
    pub entry: OracleEntry,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub base_loss: f64,
    /// Full validation-set evaluations performed.
    pub evaluations: usize,
    /// Spearman correlation between the `μ` and perturbation orderings.
    pub spearman_mu: Option<f64>,
    pub entries: Vec<OracleModule>,
}

/// Leave-one-branch-out perturbation scores on the probed checkpoint.
pub fn cmd_oracle(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf, CliError> {
    let mut st = Stage::begin(cfg, "oracle", &[ORACLE_FILE], overwrite)?;
    let mut probe = st.load_model(PROBE_CKPT)?;
    let batches = probe_batches(&cfg.task, cfg.partitions, cfg.train.batch_size)?;
    let report = perturbation_scores(&mut probe, &batches)?;
    let records = collect_sensitivities(&mut probe, &batches, cfg.partition_seed)?;
    let mus: BTreeMap<ModuleId, f64> = records.iter().map(|r| (r.module, mean_std(&r.samples).0)).collect();
    let entries: Vec<OracleModule> = report
        .entries
        .into_iter()
        .map(|entry| OracleModule {
            mu: mus[&entry.module],
            entry,
        })
        .collect();
    let p: Vec<f64> = entries.iter().map(|e| e.entry.perturbation).collect();
    let m: Vec<f64> = entries.iter().map(|e| e.mu).collect();
    let summary = OracleSummary {
        base_loss: report.base_loss,
        evaluations: report.evaluations,
        spearman_mu: spearman(&m, &p),
        entries,
    };
    eprintln!(
        "[oracle] {} full validation evaluations; Spearman(mu, P) = {}",
        summary.evaluations,
        summary.spearman_mu.map_or("undefined".into(), |s| format!("{s:.4}"))
    );
    st.write_json(ORACLE_FILE, &summary)?;
    st.finish()
}

/// probe, score, allocate and train in sequence, optionally followed by
/// the oracle.
pub fn cmd_pipeline(cfg: &RunConfig, overwrite: bool, with_oracle: bool) -> Result<PathBuf, CliError> {
    cmd_probe(cfg, overwrite)?;
    cmd_score(cfg, overwrite)?;
    cmd_allocate(cfg, overwrite)?;
    let dir = cmd_train(cfg, overwrite)?;
    if with_oracle {
        cmd_oracle(cfg, overwrite)?;
    }
    Ok(dir)
}

/// Checks every manifest digest and summarises the run.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| CliError::missing(format!("missing manifest {}: {e}", path.display())))?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)?;
    let mut out = String::new();
    writeln!(out, "run directory: {}", dir.display()).unwrap();
    writeln!(out, "stages: {}", manifest.stages.keys().cloned().collect::<Vec<_>>().join(", ")).unwrap();
    for (file, digest) in &manifest.artifacts {
        let actual = std::fs::read(dir.join(file))
            .map_err(|_| CliError::invariant(format!("artifact {file} listed in the manifest is missing")))?;
        if &sha256_hex(&actual) != digest {
            return Err(CliError::invariant(format!("artifact {file} does not match its manifest digest")));
        }
    }
    writeln!(out, "artifacts: {} verified", manifest.artifacts.len()).unwrap();

    if let Ok(b) = std::fs::read(dir.join(PLAN_FILE)) {
        let plan: AllocationPlan = serde_json::from_slice(&b)?;
        writeln!(
            out,
            "plan: {} FFT / {} LoRA, ratio {:.4} of budget {} ({:?})",
            plan.fft_set.len(),
            plan.lora_set.len(),
            plan.used_ratio,
            plan.budget_ratio,
            plan.direction
        )
        .unwrap();
        writeln!(out, "FFT modules: {}", module_list(&plan.fft_set)).unwrap();
    }
    if let Ok(grid) = std::fs::read_to_string(dir.join(GRID_FILE)) {
        out.push_str(&grid);
    }
    if let Ok(b) = std::fs::read(dir.join(TRAIN_SUMMARY)) {
        let s: TrainSummary = serde_json::from_slice(&b)?;
        writeln!(out, "{}: start {:.4}, best {:.4} at step {}", s.metric, s.baseline, s.best, s.best_step).unwrap();
    }
    if let Ok(b) = std::fs::read(dir.join(ORACLE_FILE)) {
        let s: OracleSummary = serde_json::from_slice(&b)?;
        writeln!(
            out,
            "oracle: {} evaluations, Spearman(mu, P) {}",
            s.evaluations,
            s.spearman_mu.map_or("undefined".into(), |v| format!("{v:.4}"))
        )
        .unwrap();
    }
    Ok(out)
}
