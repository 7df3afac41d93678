//! Config-driven experiment runner, results persistence and the
//! detection-dump import path.
//!
//! Results layout under the output directory:
//!
//! ```text
//! config.json                      resolved config, defaults expanded
//! aggregate.json                   seed-mean curves, anchor, data savings
//! anchor/<seed>.json               fully-trained reference (checksummed)
//! <method>/<seed>/pool_###.json    pools at the start of each cycle (checksummed)
//! <method>/<seed>/cycle_###.csv    one report row per evaluated cycle
//! <method>/<seed>/models_###.json  teacher, students and report (checksummed)
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! killed run leaves either the old or the new file, never a torn one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::alloop::{
    aggregate, run_trial, Aggregate, CycleModels, CycleReport, Curves, ModelsConfig, Pool, PoolState, Protocol,
    TrialContext, TrialObserver, TrialStart,
};
use crate::detectors::{Detection, StudentEnsemble, StudentModel, TeacherModel};
use crate::error::{Error, Result};
use crate::eval::{ap40, band_ap, BandAp};
use crate::geometry::{Box3D, ScoredBox, N_BOX_PARAMS};
use crate::registry::StrategySpec;
use crate::rng;
use crate::scoring::{self, FrameDetections, ScoreBreakdown, ScoringConfig};
use crate::synthworld::{build_dataset, generate_scenes, Dataset, Scene, WorldConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MONOLIG_OUT";
pub const DEFAULT_OUT: &str = "results";
pub const CSV_HEADER: [&str; 8] = [
    "seed",
    "cycle",
    "labeled_fraction",
    "method",
    "ap_easy",
    "ap_mod",
    "ap_hard",
    "wall_ms",
];

/// First id of the held-out evaluation scenes, far above any pool id.
const EVAL_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Load the pool from this `dataset.json` instead of generating it.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default = "default_methods")]
    pub methods: Vec<StrategySpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Train a fully-labeled reference per seed for data savings.
    #[serde(default = "default_anchor")]
    pub anchor: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_methods() -> Vec<StrategySpec> {
    vec![StrategySpec::named("random"), StrategySpec::named("monolig")]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_anchor() -> bool {
    true
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.models.validate()?;
        self.protocol.validate()?;
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::usage("methods and seeds must be non-empty"));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            let method = scoring::build(m)?;
            if method.needs_ensemble() && self.models.ensemble_size < 2 {
                return Err(Error::usage(format!(
                    "method `{}` needs models.ensemble_size >= 2",
                    m.name
                )));
            }
            if !names.insert(m.to_string()) {
                return Err(Error::usage(format!("method `{m}` listed twice")));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::usage("seeds must be unique"));
        }
        Ok(())
    }
}

/// Parse a `--key=value` value: JSON if it parses, a plain string otherwise.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `path` (dot-separated object keys) in `doc` to `raw`, creating
/// intermediate objects as needed.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::usage(format!("malformed override key `{path}`")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::usage(format!(
                "override `{path}`: `{}` is not an object",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), parse_override_value(raw));
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Deserialize with the failing field path in the message.
pub fn from_value_with_path<T: DeserializeOwned>(what: &str, doc: Value) -> Result<T> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::schema(format!("{what}: {}", e.inner()))
        } else {
            Error::schema(format!("{what}: {} at `{path}`", e.inner()))
        }
    })
}

/// Read a config file and apply `(dotted key, value)` overrides.
pub fn load_config<T: DeserializeOwned>(path: &Path, overrides: &[(String, String)]) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    from_value_with_path(&path.display().to_string(), doc)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Checksummed JSON wrapper for files a resumed run trusts.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    kind: String,
    sha256: String,
    payload: Value,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_checkpoint<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let payload = serde_json::to_value(payload)?;
    let sha256 = digest(serde_json::to_string(&payload)?.as_bytes());
    let env = Envelope {
        kind: kind.to_string(),
        sha256,
        payload,
    };
    write_atomic(path, serde_json::to_string(&env)?.as_bytes())
}

pub fn read_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let integrity = |reason: String| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope = serde_json::from_str(&text).map_err(|e| integrity(format!("unreadable checkpoint: {e}")))?;
    if env.kind != kind {
        return Err(integrity(format!("expected a `{kind}` checkpoint, found `{}`", env.kind)));
    }
    if digest(serde_json::to_string(&env.payload)?.as_bytes()) != env.sha256 {
        return Err(integrity("checksum mismatch".to_string()));
    }
    serde_json::from_value(env.payload).map_err(|e| integrity(format!("payload does not match its schema: {e}")))
}

/// Row of a `cycle_###.csv` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub seed: u64,
    pub cycle: usize,
    pub labeled_fraction: f64,
    pub method: String,
    pub ap_easy: Option<f64>,
    pub ap_mod: Option<f64>,
    pub ap_hard: Option<f64>,
    pub wall_ms: u64,
}

impl From<&CycleReport> for CsvRow {
    fn from(r: &CycleReport) -> Self {
        CsvRow {
            seed: r.seed,
            cycle: r.cycle,
            labeled_fraction: r.labeled_fraction,
            method: r.method.clone(),
            ap_easy: r.ap.easy,
            ap_mod: r.ap.moderate,
            ap_hard: r.ap.hard,
            wall_ms: r.wall_ms,
        }
    }
}

pub fn csv_bytes(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<csv buffer>"),
        source: e.into_error(),
    })
}

pub fn read_csv_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::schema(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Serialize, Deserialize)]
struct ModelsCheckpoint {
    report: CycleReport,
    teacher: Value,
    members: Vec<Value>,
}

fn models_to_checkpoint(report: &CycleReport, m: &CycleModels) -> Result<ModelsCheckpoint> {
    Ok(ModelsCheckpoint {
        report: report.clone(),
        teacher: serde_json::from_str(&m.teacher.to_json()?)?,
        members: m
            .ensemble
            .members
            .iter()
            .map(|s| Ok(serde_json::from_str(&s.to_json()?)?))
            .collect::<Result<_>>()?,
    })
}

fn models_from_checkpoint(ck: ModelsCheckpoint) -> Result<(CycleReport, CycleModels)> {
    let teacher = TeacherModel::from_json(&ck.teacher.to_string())?;
    let members = ck
        .members
        .iter()
        .map(|v| StudentModel::from_json(&v.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ck.report,
        CycleModels {
            teacher,
            ensemble: StudentEnsemble { members },
        },
    ))
}

/// File-system names of a method; parameters are folded in so that two
/// parameterisations of one strategy land in different directories.
pub fn method_dir_name(spec: &StrategySpec) -> String {
    spec.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn trial_dir(out: &Path, spec: &StrategySpec, seed: u64) -> PathBuf {
    out.join(method_dir_name(spec)).join(seed.to_string())
}

fn numbered(dir: &Path, stem: &str, k: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{k:03}.{ext}"))
}

/// Persists a trial as it runs.
struct DirObserver {
    dir: PathBuf,
    save_models: bool,
}

impl TrialObserver for DirObserver {
    fn on_cycle(&mut self, report: &CycleReport, models: &CycleModels) -> Result<()> {
        // Models first: a cycle counts as evaluated once its CSV exists.
        if self.save_models {
            write_checkpoint(
                &numbered(&self.dir, "models", report.cycle, "json"),
                "models",
                &models_to_checkpoint(report, models)?,
            )?;
        }
        write_atomic(
            &numbered(&self.dir, "cycle", report.cycle, "csv"),
            &csv_bytes(&[CsvRow::from(report)])?,
        )
    }

    fn on_pool(&mut self, state: &PoolState) -> Result<()> {
        write_checkpoint(&numbered(&self.dir, "pool", state.cycle, "json"), "pool", state)
    }
}

/// Reconstruct where a trial stopped, or `None` for a fresh start.
fn resume_point(ctx: &TrialContext<'_>, dir: &Path, spec: &StrategySpec, seed: u64) -> Result<Option<TrialStart>> {
    let mut k = 0;
    while numbered(dir, "pool", k, "json").exists() {
        k += 1;
    }
    if k == 0 {
        return Ok(None);
    }
    let state: PoolState = read_checkpoint(&numbered(dir, "pool", k - 1, "json"), "pool")?;
    let integrity = |reason: String| Error::Integrity {
        path: dir.to_path_buf(),
        reason,
    };
    if state.cycle != k - 1 {
        return Err(integrity(format!("pool_{:03}.json records cycle {}", k - 1, state.cycle)));
    }
    state.validate()?;
    let mut ids = ctx.pool.ids();
    ids.sort_unstable();
    let mut have: Vec<u64> = state.labeled.iter().chain(&state.unlabeled).copied().collect();
    have.sort_unstable();
    if have != ids {
        return Err(integrity("pool state does not cover the dataset".to_string()));
    }
    let mut history = Vec::new();
    let mut models = None;
    for j in 0..=state.cycle {
        let csv = numbered(dir, "cycle", j, "csv");
        if !csv.exists() {
            if j == state.cycle {
                break;
            }
            return Err(integrity(format!("missing {}", csv.display())));
        }
        let rows = read_csv_rows(&csv)?;
        let ck_path = numbered(dir, "models", j, "json");
        let (report, m) = if ck_path.exists() {
            models_from_checkpoint(read_checkpoint(&ck_path, "models")?)?
        } else if j == state.cycle {
            // Retraining reproduces the lost checkpoint exactly.
            let method = scoring::build(spec)?;
            let (m, r) = ctx.train_and_evaluate(&state, method.as_ref(), &spec.to_string(), seed)?;
            write_checkpoint(&ck_path, "models", &models_to_checkpoint(&r, &m)?)?;
            (r, m)
        } else {
            return Err(integrity(format!("missing {}", ck_path.display())));
        };
        let mut expected = CsvRow::from(&report);
        expected.wall_ms = rows.first().map_or(0, |r| r.wall_ms);
        if rows != [expected] {
            return Err(integrity(format!("{} disagrees with its models checkpoint", csv.display())));
        }
        let mut report = report;
        report.wall_ms = rows[0].wall_ms;
        history.push(report);
        if j == state.cycle {
            models = Some(m);
        }
    }
    Ok(Some(TrialStart { state, history, models }))
}

/// Held-out scenes drawn from the same world with a separate seed.
pub fn eval_scenes(world: &WorldConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    let mut cfg = world.clone();
    cfg.n_scenes = n_scenes;
    cfg.seed = rng::derive_seed(world.seed, &[rng::tag("held-out")]);
    generate_scenes(&cfg, EVAL_ID_OFFSET)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorRecord {
    seed: u64,
    student: BandAp,
    teacher: BandAp,
}

/// Result of [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub curves: Curves,
    pub anchors: Vec<Option<f64>>,
    pub aggregate: Aggregate,
}

/// Output directory: explicit argument, then config, then the environment,
/// then `results`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    cli.or(cfg)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_pool(cfg: &ExperimentConfig) -> Result<(Vec<Scene>, WorldConfig)> {
    match &cfg.dataset {
        Some(path) => {
            let ds = Dataset::load(path)?;
            Ok((ds.scenes, ds.world))
        }
        None => {
            let ds = build_dataset(&cfg.world)?;
            Ok((ds.scenes, ds.world))
        }
    }
}

/// Run every (method, seed) trial, resuming from whatever the output
/// directory already holds.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let resolved = serde_json::to_string_pretty(cfg)?;
    let cfg_path = out.join("config.json");
    if cfg_path.exists() {
        let previous = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if previous != resolved {
            return Err(Error::Integrity {
                path: cfg_path,
                reason: "results directory belongs to a different config".to_string(),
            });
        }
    } else {
        write_atomic(&cfg_path, resolved.as_bytes())?;
    }

    let (scenes, world) = load_pool(cfg)?;
    let eval = eval_scenes(&world, cfg.protocol.eval.n_scenes)?;
    let ctx = TrialContext {
        pool: Pool::new(&scenes, world.n_categories as usize)?,
        eval: &eval,
        models: &cfg.models,
        protocol: &cfg.protocol,
    };
    info!("pool {} scenes, held-out {} scenes", scenes.len(), eval.len());

    let jobs: Vec<(&StrategySpec, u64)> = cfg
        .methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<Vec<CycleReport>> = jobs
        .par_iter()
        .map(|&(spec, seed)| {
            let dir = trial_dir(out, spec, seed);
            let start = resume_point(&ctx, &dir, spec, seed)?;
            if let Some(s) = &start {
                info!("resuming {spec} seed {seed} at cycle {}", s.state.cycle);
            }
            let mut obs = DirObserver {
                dir,
                save_models: true,
            };
            run_trial(&ctx, spec, seed, start, &mut obs)
        })
        .collect::<Result<_>>()?;
    let mut curves = Curves::new();
    for ((spec, seed), r) in jobs.into_iter().zip(results) {
        curves.entry(spec.to_string()).or_default().push((seed, r));
    }

    let anchors: Vec<Option<f64>> = if cfg.anchor {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let path = out.join("anchor").join(format!("{seed}.json"));
                let rec = if path.exists() {
                    read_checkpoint::<AnchorRecord>(&path, "anchor")?
                } else {
                    let (student, teacher) = ctx.fully_trained(seed)?;
                    let rec = AnchorRecord { seed, student, teacher };
                    write_checkpoint(&path, "anchor", &rec)?;
                    rec
                };
                Ok(rec.student.get(cfg.protocol.eval.headline))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let agg = aggregate(&curves, &anchors, &cfg.protocol.eval);
    write_atomic(&out.join("aggregate.json"), serde_json::to_string_pretty(&agg)?.as_bytes())?;
    Ok(RunOutput {
        out_dir: out.to_path_buf(),
        curves,
        anchors,
        aggregate: agg,
    })
}

/// Write the dataset of `world` to `path`.
pub fn cmd_generate(world: &WorldConfig, path: &Path) -> Result<Dataset> {
    let ds = build_dataset(world)?;
    write_atomic(path, ds.to_json()?.as_bytes())?;
    Ok(ds)
}

/// Teacher detection in a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpTeacherDet {
    #[serde(rename = "box")]
    pub bbox: [f64; N_BOX_PARAMS],
    pub category: u32,
    pub p: f64,
    pub sigma: [f64; 3],
}

/// Student detection in a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpStudentDet {
    #[serde(rename = "box")]
    pub bbox: [f64; N_BOX_PARAMS],
    pub category: u32,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpFrame {
    pub frame_id: u64,
    pub teacher: Vec<DumpTeacherDet>,
    /// One detection list per ensemble member.
    pub members: Vec<Vec<DumpStudentDet>>,
}

/// Detections produced outside the library (or exported from it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDump {
    pub frames: Vec<DumpFrame>,
}

fn check_prob(p: f64, what: &dyn Fn() -> String) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::schema(format!("{}: probability {p} outside [0, 1]", what())));
    }
    Ok(())
}

fn dump_box(b: &[f64; N_BOX_PARAMS], what: &dyn Fn() -> String) -> Result<Box3D> {
    Box3D::new(b[0], b[1], b[2], b[3], b[4], b[5], b[6]).map_err(|e| Error::schema(format!("{}: {e}", what())))
}

impl DetectionDump {
    /// Parse a dump. Unknown fields are reported through the log and
    /// returned, then ignored.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let dump: DetectionDump = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::schema(format!("detection dump: {e}")))?;
        for u in &unknown {
            warn!("detection dump: ignoring unknown field `{u}`");
        }
        dump.validate()?;
        Ok((dump, unknown))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.frames.first().map_or(0, |f| f.members.len());
        for f in &self.frames {
            if f.members.len() != m {
                return Err(Error::schema(format!(
                    "frame {}: {} members, expected {m} as in the first frame",
                    f.frame_id,
                    f.members.len()
                )));
            }
            for (i, d) in f.teacher.iter().enumerate() {
                let what = || format!("frame {} teacher detection {i}", f.frame_id);
                check_prob(d.p, &what)?;
                if d.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::schema(format!("{}: sigmas must be positive", what())));
                }
                dump_box(&d.bbox, &what)?;
            }
            for (k, dets) in f.members.iter().enumerate() {
                for (i, d) in dets.iter().enumerate() {
                    let what = || format!("frame {} member {k} detection {i}", f.frame_id);
                    check_prob(d.p, &what)?;
                    dump_box(&d.bbox, &what)?;
                }
            }
        }
        Ok(())
    }

    pub fn member_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.members.len())
    }

    /// Convert to the scoring input; the dump must already be valid.
    pub fn to_frames(&self) -> Result<Vec<FrameDetections>> {
        self.frames
            .iter()
            .map(|f| {
                let what = || format!("frame {}", f.frame_id);
                let teacher = f
                    .teacher
                    .iter()
                    .map(|d| {
                        Ok(Detection {
                            bbox: dump_box(&d.bbox, &what)?,
                            category: d.category,
                            p: d.p,
                            sigma_xyz: Some(d.sigma),
                            proposal: None,
                            class_probs: vec![],
                        })
                    })
                    .collect::<Result<_>>()?;
                let members = f
                    .members
                    .iter()
                    .map(|dets| {
                        dets.iter()
                            .map(|d| {
                                Ok(Detection {
                                    bbox: dump_box(&d.bbox, &what)?,
                                    category: d.category,
                                    p: d.p,
                                    sigma_xyz: None,
                                    proposal: None,
                                    class_probs: vec![],
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                Ok(FrameDetections {
                    scene_id: f.frame_id,
                    teacher,
                    members,
                })
            })
            .collect()
    }

    /// Export library detections in the dump schema.
    pub fn from_frames(frames: &[FrameDetections]) -> Result<Self> {
        let frames = frames
            .iter()
            .map(|f| {
                let teacher = f
                    .teacher
                    .iter()
                    .map(|d| {
                        let sigma = d
                            .sigma_xyz
                            .ok_or_else(|| Error::usage("teacher detection without aleatoric sigmas"))?;
                        Ok(DumpTeacherDet {
                            bbox: d.bbox.params(),
                            category: d.category,
                            p: d.p,
                            sigma,
                        })
                    })
                    .collect::<Result<_>>()?;
                let members = f
                    .members
                    .iter()
                    .map(|dets| {
                        dets.iter()
                            .map(|d| DumpStudentDet {
                                bbox: d.bbox.params(),
                                category: d.category,
                                p: d.p,
                            })
                            .collect()
                    })
                    .collect();
                Ok(DumpFrame {
                    frame_id: f.scene_id,
                    teacher,
                    members,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DetectionDump { frames })
    }
}

/// Score a dump and write the ranked CSV.
pub fn cmd_score_file<W: Write>(dump: &DetectionDump, cfg: &ScoringConfig, out: W) -> Result<Vec<ScoreBreakdown>> {
    if dump.member_count() < 2 {
        return Err(Error::schema("scoring needs detections from at least 2 ensemble members"));
    }
    let breakdowns = scoring::score_detections(&dump.to_frames()?, cfg)?;
    scoring::write_ranked_csv(out, &breakdowns)?;
    Ok(breakdowns)
}

/// Which detections of a dump to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpSource {
    Teacher,
    Member(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub iou_thresh: f64,
    pub ap: Option<f64>,
    pub bands: BandAp,
    pub frames: usize,
}

/// AP of dumped detections against the objects of a dataset. Every frame
/// id must name a dataset scene; dataset scenes absent from the dump count
/// as frames without detections.
pub fn cmd_eval(dump: &DetectionDump, gt: &Dataset, source: DumpSource, iou_thresh: f64) -> Result<EvalOutput> {
    let frames = dump.to_frames()?;
    let mut by_id = std::collections::HashMap::new();
    for f in &frames {
        if by_id.insert(f.scene_id, f).is_some() {
            return Err(Error::schema(format!("frame {} appears twice", f.scene_id)));
        }
    }
    for id in by_id.keys() {
        if !gt.scenes.iter().any(|s| s.id == *id) {
            return Err(Error::schema(format!("frame {id} is not in the ground-truth dataset")));
        }
    }
    let mut dets = Vec::with_capacity(gt.scenes.len());
    let mut gts = Vec::with_capacity(gt.scenes.len());
    for s in &gt.scenes {
        let d: Vec<ScoredBox> = match by_id.get(&s.id) {
            None => vec![],
            Some(f) => match source {
                DumpSource::Teacher => f.teacher.iter().map(Detection::scored_box).collect(),
                DumpSource::Member(k) => f
                    .members
                    .get(k)
                    .ok_or_else(|| Error::usage(format!("dump has no member {k}")))?
                    .iter()
                    .map(Detection::scored_box)
                    .collect(),
            },
        };
        dets.push(d);
        gts.push(s.objects.iter().map(|o| ScoredBox::new(o.bbox, 1.0, o.category)).collect());
    }
    Ok(EvalOutput {
        iou_thresh,
        ap: ap40(&dets, &gts, iou_thresh)?,
        bands: band_ap(&dets, &gts, iou_thresh)?,
        frames: frames.len(),
    })
}
