//! Stage orchestration with on-disk artifacts.
//!
//! Each stage writes into `<out>/<stage>/` and reads its inputs back from
//! earlier stage directories, so a run can resume from any stage. The run
//! manifest records the config hash and a sha256 for every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::FixedOffset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clusterer::{extract_medoids, select_k, DEFAULT_KMAX};
use crate::descriptives::{describe, observation_days_by_user};
use crate::ingest::{
    parse_events, parse_profiles, validate_log, CategoryCatalog, EventFormat, EventLog, OverlapPolicy,
    ParseReport, ProfileTable, ValidationReport,
};
use crate::mixedmodel::{build_design, circadian_grid, fit_design, FitResult, MarginalMean, ModelSpec};
use crate::patterns::{
    median_spell_duration, pool_medoids, rank_patterns, subgroup_breakdown, Attribute,
    UserMedoids,
};
use crate::sessionizer::{
    read_thresholds_csv, sessionize_log, sessionize_with_thresholds, write_sessions_csv, write_thresholds_csv,
    SessionKind, UserSessions, DEFAULT_THRESHOLD_SECS,
};
use crate::spellseq::{distance_matrix, to_spell_sequence, CostModel, DissimilarityMatrix, Normalize, SpellSequence};
use crate::svg::render_pattern_plot;
use crate::trajectory::{
    build_trajectories, read_records_csv, read_trajectories_csv, reengagement_records, write_records_csv,
    write_trajectories_csv, SwitchRateRecord, DEFAULT_SLOT_SECS, WINDOW_GCD_SECS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Sessionize,
    Describe,
    Dist,
    Cluster,
    Patterns,
    Trajectories,
    Reengage,
    Lmm,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Sessionize,
        Stage::Describe,
        Stage::Dist,
        Stage::Cluster,
        Stage::Patterns,
        Stage::Trajectories,
        Stage::Reengage,
        Stage::Lmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Sessionize => "sessionize",
            Stage::Describe => "describe",
            Stage::Dist => "dist",
            Stage::Cluster => "cluster",
            Stage::Patterns => "patterns",
            Stage::Trajectories => "trajectories",
            Stage::Reengage => "reengage",
            Stage::Lmm => "lmm",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Duration split for light/heavy bucketing of pattern spells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Median spell duration over all multi-app sessions.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub events: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub format: EventFormat,
    pub out: PathBuf,
    pub overlap: OverlapPolicy,
    pub default_threshold_secs: f64,
    pub substitution_cost: f64,
    pub indel_cost: f64,
    pub expansion_cost: f64,
    pub duration_unit_secs: f64,
    pub normalize: Normalize,
    pub kmin: usize,
    pub kmax: usize,
    pub split: SplitRule,
    pub top_n: usize,
    pub slot_secs: u32,
    pub tz_offset: FixedOffset,
    pub formula: String,
    pub logit: bool,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            events: None,
            profiles: None,
            categories: None,
            format: EventFormat::Csv,
            out: PathBuf::from("out"),
            overlap: OverlapPolicy::Reject,
            default_threshold_secs: DEFAULT_THRESHOLD_SECS,
            substitution_cost: 2.0,
            indel_cost: 1.0,
            expansion_cost: 0.5,
            duration_unit_secs: 60.0,
            normalize: Normalize::None,
            kmin: 2,
            kmax: DEFAULT_KMAX,
            split: SplitRule::Median,
            top_n: 30,
            slot_secs: DEFAULT_SLOT_SECS,
            tz_offset: FixedOffset::east_opt(8 * 3600).expect("valid offset"),
            formula: "rate ~ timespan*gender + timespan*age_group + timespan*education + occupation + (1|user)"
                .to_string(),
            logit: false,
            jobs: 0,
            seed: 42,
        }
    }
}

pub const CONFIG_KEYS: [&str; 22] = [
    "events",
    "profiles",
    "categories",
    "format",
    "out",
    "overlap",
    "default_threshold_secs",
    "substitution_cost",
    "indel_cost",
    "expansion_cost",
    "duration_unit_secs",
    "normalize",
    "kmin",
    "kmax",
    "split",
    "top_n",
    "slot_secs",
    "tz_offset",
    "formula",
    "logit",
    "jobs",
    "seed",
];

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| usage(format!("config `{key}`: cannot parse `{v}`")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "events" => self.events = path(v),
            "profiles" => self.profiles = path(v),
            "categories" => self.categories = path(v),
            "format" => self.format = v.parse().map_err(usage)?,
            "out" => self.out = PathBuf::from(v),
            "overlap" => self.overlap = v.parse().map_err(usage)?,
            "default_threshold_secs" => self.default_threshold_secs = num(key, v)?,
            "substitution_cost" => self.substitution_cost = num(key, v)?,
            "indel_cost" => self.indel_cost = num(key, v)?,
            "expansion_cost" => self.expansion_cost = num(key, v)?,
            "duration_unit_secs" => self.duration_unit_secs = num(key, v)?,
            "normalize" => self.normalize = v.parse().map_err(usage)?,
            "kmin" => self.kmin = num(key, v)?,
            "kmax" => self.kmax = num(key, v)?,
            "split" => {
                self.split = if v == "median" {
                    SplitRule::Median
                } else {
                    SplitRule::Fixed(num(key, v)?)
                }
            }
            "top_n" => self.top_n = num(key, v)?,
            "slot_secs" => self.slot_secs = num(key, v)?,
            "tz_offset" => {
                self.tz_offset = v
                    .parse()
                    .map_err(|_| usage(format!("config `tz_offset`: expected +HH:MM, got `{v}`")))?
            }
            "formula" => self.formula = v.to_string(),
            "logit" => self.logit = num(key, v)?,
            "jobs" => self.jobs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    fn value(&self, key: &str) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "events" => p(&self.events),
            "profiles" => p(&self.profiles),
            "categories" => p(&self.categories),
            "format" => match self.format {
                EventFormat::Csv => "csv".into(),
                EventFormat::Jsonl => "jsonl".into(),
            },
            "out" => self.out.display().to_string(),
            "overlap" => match self.overlap {
                OverlapPolicy::Reject => "reject".into(),
                OverlapPolicy::Clip => "clip".into(),
            },
            "default_threshold_secs" => self.default_threshold_secs.to_string(),
            "substitution_cost" => self.substitution_cost.to_string(),
            "indel_cost" => self.indel_cost.to_string(),
            "expansion_cost" => self.expansion_cost.to_string(),
            "duration_unit_secs" => self.duration_unit_secs.to_string(),
            "normalize" => match self.normalize {
                Normalize::None => "none".into(),
                Normalize::Max => "max".into(),
            },
            "kmin" => self.kmin.to_string(),
            "kmax" => self.kmax.to_string(),
            "split" => match self.split {
                SplitRule::Median => "median".into(),
                SplitRule::Fixed(s) => s.to_string(),
            },
            "top_n" => self.top_n.to_string(),
            "slot_secs" => self.slot_secs.to_string(),
            "tz_offset" => self.tz_offset.to_string(),
            "formula" => self.formula.clone(),
            "logit" => self.logit.to_string(),
            "jobs" => self.jobs.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("key list is closed"),
        }
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value(k)))
            .collect()
    }

    /// Hash over every setting that can change artifacts (`out` and `jobs`
    /// excluded).
    pub fn hash(&self) -> String {
        let text: String = CONFIG_KEYS
            .iter()
            .filter(|k| !matches!(**k, "out" | "jobs"))
            .map(|k| format!("{k} = {}\n", self.value(k)))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.default_threshold_secs > 0.0 && self.default_threshold_secs.is_finite()) {
            return Err(usage("default_threshold_secs must be positive"));
        }
        if self.kmin < 2 || self.kmax < self.kmin {
            return Err(usage("need 2 <= kmin <= kmax"));
        }
        if let SplitRule::Fixed(s) = self.split {
            if !(s > 0.0 && s.is_finite()) {
                return Err(usage("split must be `median` or a positive number of seconds"));
            }
        }
        if self.top_n == 0 {
            return Err(usage("top_n must be positive"));
        }
        if self.slot_secs == 0 || WINDOW_GCD_SECS % self.slot_secs != 0 {
            return Err(usage(format!("slot_secs must divide {WINDOW_GCD_SECS}")));
        }
        self.cost_model(1)?;
        self.model_spec()?;
        Ok(())
    }

    pub fn cost_model(&self, n_states: usize) -> Result<CostModel> {
        Ok(CostModel::constant(
            n_states,
            self.substitution_cost,
            self.indel_cost,
            self.expansion_cost,
            self.duration_unit_secs,
        )?
        .with_normalize(self.normalize))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::parse(&self.formula)?;
        spec.logit = self.logit;
        Ok(spec)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn data_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

pub fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| data_err(path, e))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&raw).map_err(|e| data_err(path, e))
}

/// Runs a writer closure against a freshly created file.
pub fn write_csv_file<E: fmt::Display>(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> std::result::Result<(), E>,
) -> Result<()> {
    let mut w = create_file(path)?;
    f(&mut w).map_err(|e| data_err(path, e))?;
    w.flush().map_err(io_err(path))
}

pub fn load_catalog(path: Option<&Path>) -> Result<CategoryCatalog> {
    match path {
        Some(p) => Ok(CategoryCatalog::from_reader(open_file(p)?)?),
        None => Ok(CategoryCatalog::default()),
    }
}

pub fn read_events(path: &Path, format: EventFormat, catalog: &CategoryCatalog) -> Result<(EventLog, ParseReport)> {
    parse_events(open_file(path)?, format, catalog).map_err(|e| data_err(path, e))
}

pub fn read_profiles(path: &Path) -> Result<ProfileTable> {
    parse_profiles(open_file(path)?).map_err(|e| data_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub parse: ParseReport,
    pub validation: ValidationReport,
    pub users: usize,
    pub events: usize,
    pub users_without_profile: Vec<String>,
}

/// Sequences of one user's multi-app sessions and their matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequences {
    pub user_id: String,
    /// Sidecar file name within the dist directory, if a matrix was written.
    pub matrix: Option<String>,
    pub sequences: Vec<SpellSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserClusters {
    pub user_id: String,
    pub k: usize,
    pub medoids: Vec<usize>,
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    pub asw_by_k: Vec<(usize, f64)>,
    pub degenerate: bool,
    pub medoid_sequences: Vec<(SpellSequence, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmReport {
    pub formula: String,
    pub logit: bool,
    pub dropped_columns: Vec<String>,
    pub fit: FitResult,
    pub marginal_means: Vec<MarginalMean>,
}

/// Fixed artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn file(&self, stage: Stage, name: &str) -> PathBuf {
        self.dir(stage).join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

pub fn multi_sequences(users: &[UserSessions]) -> Vec<(String, Vec<SpellSequence>)> {
    users
        .iter()
        .map(|u| {
            (
                u.user_id.clone(),
                u.sessions
                    .iter()
                    .filter(|s| s.kind == SessionKind::Multi)
                    .map(to_spell_sequence)
                    .collect(),
            )
        })
        .collect()
}

/// Per-user PAM with silhouette-selected k and weighted medoids.
pub fn cluster_user(
    user_id: &str,
    d: &DissimilarityMatrix,
    sequences: &[SpellSequence],
    kmin: usize,
    kmax: usize,
) -> Result<UserClusters> {
    let sel = select_k(d, kmin, Some(kmax))?;
    let c = &sel.clustering;
    let medoid_sequences = extract_medoids(c, d)
        .into_iter()
        .map(|m| {
            let original = d.members[m.index][0];
            let seq = sequences
                .get(original)
                .cloned()
                .ok_or_else(|| Error::Data(format!("matrix member {original} has no sequence")))?;
            Ok((seq, m.weight))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UserClusters {
        user_id: user_id.to_string(),
        k: c.k,
        medoids: c.medoids.clone(),
        assignment: c.assignment.clone(),
        total_cost: c.total_cost,
        asw_by_k: sel.asw_by_k.clone(),
        degenerate: sel.degenerate,
        medoid_sequences,
    })
}

pub fn write_marginal_means_csv<W: Write>(means: &[MarginalMean], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timespan", "factor", "level", "estimate", "se"])?;
    for m in means {
        let ts = m
            .at
            .iter()
            .find(|(f, _)| *f == crate::mixedmodel::Factor::Timespan)
            .map(|(_, l)| l.as_str())
            .unwrap_or("");
        let other = m.at.iter().find(|(f, _)| *f != crate::mixedmodel::Factor::Timespan);
        w.write_record([
            ts,
            other.map(|(f, _)| f.name()).unwrap_or(""),
            other.map(|(_, l)| l.as_str()).unwrap_or(""),
            &m.estimate.to_string(),
            &m.se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit_records(records: &[SwitchRateRecord], profiles: &ProfileTable, spec: &ModelSpec) -> Result<LmmReport> {
    let design = build_design(records, profiles, spec)?;
    let fit = fit_design(&design)?;
    let marginal_means = circadian_grid(&fit, &design);
    Ok(LmmReport {
        formula: String::new(),
        logit: spec.logit,
        dropped_columns: design.dropped.clone(),
        fit,
        marginal_means,
    })
}

fn pattern_split(cfg: &PipelineConfig, seqs: &[UserSequences]) -> f64 {
    match cfg.split {
        SplitRule::Fixed(s) => s,
        SplitRule::Median => median_spell_duration(seqs.iter().flat_map(|u| u.sequences.iter()))
            .unwrap_or(cfg.duration_unit_secs),
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
}

impl Runner<'_> {
    fn catalog(&self) -> Result<CategoryCatalog> {
        load_catalog(Some(&self.layout.file(Stage::Ingest, "categories.txt")))
    }

    fn log(&self, catalog: &CategoryCatalog) -> Result<EventLog> {
        let path = self.layout.file(Stage::Ingest, "events.csv");
        let (log, report) = read_events(&path, EventFormat::Csv, catalog)?;
        if report.rows_rejected > 0 {
            return Err(data_err(&path, format!("{} rows rejected on reload", report.rows_rejected)));
        }
        Ok(log)
    }

    fn profiles(&self) -> Result<ProfileTable> {
        let path = self.layout.file(Stage::Ingest, "profiles.csv");
        if path.exists() {
            read_profiles(&path)
        } else {
            Ok(ProfileTable::default())
        }
    }

    fn sessions(&self, log: &EventLog) -> Result<Vec<UserSessions>> {
        let path = self.layout.file(Stage::Sessionize, "thresholds.csv");
        let thresholds = read_thresholds_csv(open_file(&path)?).map_err(|e| data_err(&path, e))?;
        Ok(sessionize_with_thresholds(log, &thresholds, self.cfg.default_threshold_secs))
    }

    fn sequences(&self) -> Result<Vec<UserSequences>> {
        read_json(&self.layout.file(Stage::Dist, "sequences.json"))
    }

    fn run(&self, stage: Stage) -> Result<()> {
        let l = &self.layout;
        fs::create_dir_all(l.dir(stage)).map_err(io_err(&l.dir(stage)))?;
        match stage {
            Stage::Ingest => {
                let catalog = load_catalog(self.cfg.categories.as_deref())?;
                let events = self
                    .cfg
                    .events
                    .as_deref()
                    .ok_or_else(|| usage("no events file configured (`events`)"))?;
                let (log, parse) = read_events(events, self.cfg.format, &catalog)?;
                let (log, validation) = validate_log(&log, self.cfg.overlap);
                let profiles = match &self.cfg.profiles {
                    Some(p) => Some(read_profiles(p)?),
                    None => None,
                };
                let users_without_profile = profiles.as_ref().map(|p| p.missing_users(&log)).unwrap_or_default();
                let mut w = create_file(&l.file(stage, "categories.txt"))?;
                for name in catalog.names() {
                    writeln!(w, "{name}").map_err(io_err(&l.file(stage, "categories.txt")))?;
                }
                w.flush().map_err(io_err(&l.file(stage, "categories.txt")))?;
                let path = l.file(stage, "events.csv");
                let mut w = create_file(&path)?;
                log.write_csv(&mut w).map_err(|e| data_err(&path, e))?;
                w.flush().map_err(io_err(&path))?;
                if let Some(p) = &profiles {
                    let path = l.file(stage, "profiles.csv");
                    let mut w = create_file(&path)?;
                    p.write_csv(&mut w).map_err(|e| data_err(&path, e))?;
                    w.flush().map_err(io_err(&path))?;
                }
                write_json(
                    &l.file(stage, "validation.json"),
                    &IngestReport {
                        parse,
                        validation,
                        users: log.n_users(),
                        events: log.n_events(),
                        users_without_profile,
                    },
                )
            }
            Stage::Sessionize => {
                let catalog = self.catalog()?;
                let log = self.log(&catalog)?;
                let users = sessionize_log(&log, self.cfg.default_threshold_secs);
                write_csv_file(&l.file(stage, "sessions.csv"), |w| write_sessions_csv(&users, &catalog, w))?;
                write_csv_file(&l.file(stage, "thresholds.csv"), |w| write_thresholds_csv(&users, w))
            }
            Stage::Describe => {
                let catalog = self.catalog()?;
                let log = self.log(&catalog)?;
                let users = self.sessions(&log)?;
                let days = observation_days_by_user(&log, self.cfg.tz_offset);
                let (report, tm) = describe(&users, &days, &catalog);
                write_json(&l.file(stage, "describe.json"), &report)?;
                write_csv_file(&l.file(stage, "transitions.csv"), |w| tm.write_csv(&catalog, w))
            }
            Stage::Dist => {
                let catalog = self.catalog()?;
                let log = self.log(&catalog)?;
                let users = self.sessions(&log)?;
                let cost = self.cfg.cost_model(catalog.len())?;
                let dir = l.dir(stage);
                let index = multi_sequences(&users)
                    .into_par_iter()
                    .enumerate()
                    .map(|(i, (user_id, sequences))| {
                        let matrix = if sequences.is_empty() {
                            None
                        } else {
                            let d = distance_matrix(&sequences, &cost, true);
                            let base = dir.join(format!("m{i:05}"));
                            d.export(&base)?;
                            Some(format!("m{i:05}.json"))
                        };
                        Ok(UserSequences {
                            user_id,
                            matrix,
                            sequences,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                write_json(&l.file(stage, "sequences.json"), &index)
            }
            Stage::Cluster => {
                let index = self.sequences()?;
                let dir = l.dir(Stage::Dist);
                let clusters = index
                    .par_iter()
                    .filter_map(|u| u.matrix.as_ref().map(|m| (u, dir.join(m))))
                    .map(|(u, path)| {
                        let d = DissimilarityMatrix::import(&path)?;
                        cluster_user(&u.user_id, &d, &u.sequences, self.cfg.kmin, self.cfg.kmax)
                            .map_err(|e| data_err(&path, e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                write_json(&l.file(stage, "clusters.json"), &clusters)
            }
            Stage::Patterns => {
                let catalog = self.catalog()?;
                let index = self.sequences()?;
                let clusters: Vec<UserClusters> = read_json(&l.file(Stage::Cluster, "clusters.json"))?;
                let split = pattern_split(self.cfg, &index);
                let per_user: Vec<UserMedoids> = clusters
                    .into_iter()
                    .map(|c| UserMedoids {
                        user_id: c.user_id,
                        medoids: c.medoid_sequences,
                    })
                    .collect();
                let pool = pool_medoids(&per_user);
                let patterns = rank_patterns(&pool, split, &catalog)?;
                write_csv_file(&l.file(stage, "catalog.csv"), |w| patterns.write_csv(w))?;
                write_json(&l.file(stage, "catalog.json"), &patterns)?;
                if !patterns.is_empty() {
                    let svg = render_pattern_plot(&patterns, self.cfg.top_n.min(patterns.len()), &catalog)?;
                    let path = l.file(stage, "patterns.svg");
                    fs::write(&path, svg).map_err(io_err(&path))?;
                }
                let profiles = self.profiles()?;
                if !profiles.is_empty() {
                    let mut groups = BTreeMap::new();
                    for attr in ["gender", "age_group", "education", "occupation"] {
                        let a = Attribute::parse(attr)?;
                        let b = subgroup_breakdown(&pool, &profiles, a, split, &catalog)?;
                        groups.insert(attr.to_string(), b);
                    }
                    write_json(&l.file(stage, "subgroups.json"), &groups)?;
                }
                Ok(())
            }
            Stage::Trajectories => {
                let catalog = self.catalog()?;
                let log = self.log(&catalog)?;
                let users = self.sessions(&log)?;
                let trajs = build_trajectories(&users, self.cfg.slot_secs, self.cfg.tz_offset)?;
                write_csv_file(&l.file(stage, "trajectories.csv"), |w| write_trajectories_csv(&trajs, w))
            }
            Stage::Reengage => {
                let path = l.file(Stage::Trajectories, "trajectories.csv");
                let trajs = read_trajectories_csv(open_file(&path)?).map_err(|e| data_err(&path, e))?;
                let table = reengagement_records(&trajs);
                write_csv_file(&l.file(stage, "reengagement.csv"), |w| write_records_csv(&table.records, w))?;
                write_json(
                    &l.file(stage, "summary.json"),
                    &serde_json::json!({
                        "records": table.records.len(),
                        "excluded_no_off_positions": table.excluded,
                    }),
                )
            }
            Stage::Lmm => {
                let path = l.file(Stage::Reengage, "reengagement.csv");
                let records = read_records_csv(open_file(&path)?).map_err(|e| data_err(&path, e))?;
                let spec = self.cfg.model_spec()?;
                let mut report = fit_records(&records, &self.profiles()?, &spec)?;
                report.formula = self.cfg.formula.clone();
                write_json(&l.file(stage, "fit.json"), &report)?;
                write_csv_file(&l.file(stage, "marginal_means.csv"), |w| {
                    write_marginal_means_csv(&report.marginal_means, w)
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Path relative to the output directory -> sha256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: String,
    pub generated_at: String,
    pub completed: bool,
    pub failed_stage: Option<Stage>,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn stage_checksums(layout: &Layout, stage: Stage) -> Result<Option<StageRecord>> {
    let dir = layout.dir(stage);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut files = BTreeMap::new();
    for p in names {
        let rel = format!(
            "{}/{}",
            stage.name(),
            p.file_name().expect("file has a name").to_string_lossy()
        );
        files.insert(rel, sha256_file(&p)?);
    }
    Ok(Some(StageRecord { stage, files }))
}

fn write_manifest(layout: &Layout, cfg: &PipelineConfig, failed: Option<Stage>) -> Result<Manifest> {
    let mut stages = Vec::new();
    for s in Stage::ALL {
        if Some(s) == failed {
            break;
        }
        if let Some(r) = stage_checksums(layout, s)? {
            stages.push(r);
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        generated_at: chrono::Utc::now().to_rfc3339(),
        completed: failed.is_none(),
        failed_stage: failed,
        stages,
    };
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

/// Runs stages `from..=to` in order. Earlier artifacts are read from disk.
/// A failing stage aborts the run; artifacts already written are kept and
/// the manifest records the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig, from: Option<Stage>, to: Option<Stage>) -> Result<Manifest> {
    cfg.validate()?;
    let from = from.unwrap_or(Stage::Ingest);
    let to = to.unwrap_or(Stage::Lmm);
    if from > to {
        return Err(usage(format!("stage `{from}` comes after `{to}`")));
    }
    let runner = Runner {
        cfg,
        layout: Layout::new(&cfg.out),
    };
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let work = || -> Result<Manifest> {
        for stage in Stage::ALL.into_iter().filter(|s| (from..=to).contains(s)) {
            if let Err(e) = runner.run(stage) {
                write_manifest(&runner.layout, cfg, Some(stage))?;
                return Err(Error::Stage {
                    stage: stage.name(),
                    source: Box::new(e),
                });
            }
        }
        write_manifest(&runner.layout, cfg, None)
    };
    with_jobs(cfg.jobs, work)
}

/// Runs `f` on a pool of `jobs` threads (0 keeps the global pool).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("split", "45").unwrap();
        cfg.set("tz_offset", "-05:00").unwrap();
        cfg.set("events", "a.csv").unwrap();
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn config_errors_are_usage() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.set("bogus", "1").unwrap_err().exit_code(), crate::EXIT_USAGE);
        assert!(cfg.set("kmin", "x").is_err());
        assert!(PipelineConfig::from_text("no equals sign").is_err());
        cfg.slot_secs = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_out_and_jobs() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.jobs = 3;
        assert_eq!(a.hash(), b.hash());
        b.kmax = 5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }
}
