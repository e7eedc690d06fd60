//! Event-log and demographic-profile ingestion.
//!
//! Timestamps are normalized to epoch milliseconds (UTC) on parse. Events
//! are grouped per user and sorted by `(start, end)`; overlap handling is a
//! separate step ([`validate_log`]) so that parse errors and overlap errors
//! are reported independently.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The default app category labels.
pub const DEFAULT_CATEGORIES: [&str; 20] = [
    "Communication",
    "e-Commerce",
    "Education",
    "Email",
    "Entertainment",
    "Fashion",
    "Finance",
    "Games",
    "Lifestyle",
    "Music",
    "News",
    "Photo",
    "Search",
    "SNS",
    "Texting",
    "Tools",
    "Travel",
    "Video",
    "Web",
    "Misc",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("line {line}: duplicate user_id `{user_id}`")]
    DuplicateUser { line: u64, user_id: String },
    #[error("line {line}: unknown level label `{label}` for {field}")]
    UnknownLevel {
        line: u64,
        field: &'static str,
        label: String,
    },
    #[error("line {line}: expected 5 fields, found {found}")]
    FieldCount { line: u64, found: usize },
    #[error("invalid category catalog: {0}")]
    Catalog(String),
}

/// Index of an app category within a [`CategoryCatalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category(pub u16);

impl Category {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Closed set of category labels. The default holds the 20 generic
/// categories; a replacement catalog can be loaded from a label list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCatalog {
    names: Vec<String>,
}

impl Default for CategoryCatalog {
    fn default() -> Self {
        Self {
            names: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryCatalog {
    pub fn new<I, S>(labels: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = labels.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(IngestError::Catalog("empty catalog".into()));
        }
        if names.len() > u16::MAX as usize {
            return Err(IngestError::Catalog("too many categories".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(',') || n.contains('>') || n.contains(':') {
                return Err(IngestError::Catalog(format!("invalid label `{n}`")));
            }
            if !seen.insert(n.as_str()) {
                return Err(IngestError::Catalog(format!("duplicate label `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// One label per line; blank lines and `#` comments ignored.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let mut labels = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            labels.push(t.to_string());
        }
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn parse(&self, label: &str) -> Option<Category> {
        self.names
            .iter()
            .position(|n| n == label)
            .map(|i| Category(i as u16))
    }

    pub fn name(&self, c: Category) -> &str {
        &self.names[c.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = Category> + '_ {
        (0..self.names.len()).map(|i| Category(i as u16))
    }
}

/// One foreground app use, timestamps in epoch milliseconds (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppEvent {
    pub category: Category,
    pub start: i64,
    pub end: i64,
}

impl AppEvent {
    pub fn new(category: Category, start: i64, end: i64) -> Self {
        Self {
            category,
            start,
            end,
        }
    }

    pub fn duration_ms(&self) -> i64 {
        self.end - self.start
    }

    pub fn duration_secs(&self) -> f64 {
        self.duration_ms() as f64 / 1000.0
    }
}

/// Per-user, time-sorted event lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub catalog: CategoryCatalog,
    users: BTreeMap<String, Vec<AppEvent>>,
}

impl EventLog {
    pub fn new(catalog: CategoryCatalog) -> Self {
        Self {
            catalog,
            users: BTreeMap::new(),
        }
    }

    /// Builds a log from unsorted per-user events; each list is sorted.
    pub fn from_users(
        catalog: CategoryCatalog,
        users: BTreeMap<String, Vec<AppEvent>>,
    ) -> Self {
        let mut log = Self { catalog, users };
        log.sort();
        log
    }

    pub fn push(&mut self, user_id: &str, event: AppEvent) {
        self.users.entry(user_id.to_string()).or_default().push(event);
    }

    pub fn sort(&mut self) {
        for events in self.users.values_mut() {
            events.sort_by_key(|e| (e.start, e.end));
        }
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[AppEvent])> {
        self.users.iter().map(|(u, e)| (u.as_str(), e.as_slice()))
    }

    pub fn user_events(&self, user_id: &str) -> Option<&[AppEvent]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_events(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// Writes `user_id,category,start,end` with epoch-millisecond stamps.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user_id", "category", "start", "end"])?;
        for (user, events) in &self.users {
            for e in events {
                w.write_record([
                    user.as_str(),
                    self.catalog.name(e.category),
                    &e.start.to_string(),
                    &e.end.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown event format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

/// Row-level outcome of [`parse_events`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows_in: u64,
    pub rows_valid: u64,
    pub rows_rejected: u64,
    pub errors: Vec<RowError>,
}

impl ParseReport {
    fn reject(&mut self, line: u64, message: impl Into<String>) {
        self.rows_rejected += 1;
        self.errors.push(RowError {
            line,
            message: message.into(),
        });
    }
}

/// Accepts integer epoch milliseconds or RFC 3339 / ISO-8601 with offset.
pub fn parse_timestamp(raw: &str) -> Result<i64, String> {
    let t = raw.trim();
    if let Ok(ms) = t.parse::<i64>() {
        return Ok(ms);
    }
    DateTime::parse_from_rfc3339(t)
        .map(|dt| dt.timestamp_millis())
        .map_err(|_| format!("invalid timestamp `{t}`"))
}

fn build_event(
    catalog: &CategoryCatalog,
    category: &str,
    start: Result<i64, String>,
    end: Result<i64, String>,
) -> Result<AppEvent, String> {
    let category = catalog
        .parse(category.trim())
        .ok_or_else(|| format!("unknown category `{}`", category.trim()))?;
    let start = start?;
    let end = end?;
    if end < start {
        return Err(format!("end {end} precedes start {start}"));
    }
    Ok(AppEvent::new(category, start, end))
}

/// Parses an event stream. Malformed rows land in the report; valid rows
/// are kept. Only an unreadable stream or a bad header is a hard error.
pub fn parse_events<R: Read>(
    reader: R,
    format: EventFormat,
    catalog: &CategoryCatalog,
) -> Result<(EventLog, ParseReport), IngestError> {
    let mut log = EventLog::new(catalog.clone());
    let mut report = ParseReport::default();
    match format {
        EventFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            let headers = rdr.headers()?.clone();
            let col = |name: &'static str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or(IngestError::MissingColumn(name))
            };
            let (iu, ic, is, ie) = (col("user_id")?, col("category")?, col("start")?, col("end")?);
            for (row_idx, rec) in rdr.records().enumerate() {
                let line = row_idx as u64 + 2;
                report.rows_in += 1;
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) if e.is_io_error() => return Err(e.into()),
                    Err(e) => {
                        report.reject(line, e.to_string());
                        continue;
                    }
                };
                let field = |i: usize| rec.get(i);
                let (Some(user), Some(cat), Some(s), Some(e)) =
                    (field(iu), field(ic), field(is), field(ie))
                else {
                    report.reject(line, "missing field");
                    continue;
                };
                if user.is_empty() {
                    report.reject(line, "empty user_id");
                    continue;
                }
                match build_event(catalog, cat, parse_timestamp(s), parse_timestamp(e)) {
                    Ok(ev) => {
                        log.push(user, ev);
                        report.rows_valid += 1;
                    }
                    Err(msg) => report.reject(line, msg),
                }
            }
        }
        EventFormat::Jsonl => {
            for (row_idx, line_res) in BufReader::new(reader).lines().enumerate() {
                let line_no = row_idx as u64 + 1;
                let text = line_res?;
                if text.trim().is_empty() {
                    continue;
                }
                report.rows_in += 1;
                let value: serde_json::Value = match serde_json::from_str(&text) {
                    Ok(v) => v,
                    Err(e) => {
                        report.reject(line_no, format!("invalid json: {e}"));
                        continue;
                    }
                };
                let stamp = |key: &str| -> Result<i64, String> {
                    match value.get(key) {
                        Some(serde_json::Value::Number(n)) => {
                            n.as_i64().ok_or_else(|| format!("`{key}` is not an integer"))
                        }
                        Some(serde_json::Value::String(s)) => parse_timestamp(s),
                        _ => Err(format!("missing `{key}`")),
                    }
                };
                let user = match value.get("user_id") {
                    Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
                    Some(serde_json::Value::Number(n)) => n.to_string(),
                    _ => {
                        report.reject(line_no, "missing `user_id`");
                        continue;
                    }
                };
                let Some(cat) = value.get("category").and_then(|v| v.as_str()) else {
                    report.reject(line_no, "missing `category`");
                    continue;
                };
                match build_event(catalog, cat, stamp("start"), stamp("end")) {
                    Ok(ev) => {
                        log.push(&user, ev);
                        report.rows_valid += 1;
                    }
                    Err(msg) => report.reject(line_no, msg),
                }
            }
        }
    }
    log.sort();
    Ok((log, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPolicy {
    #[default]
    Reject,
    Clip,
}

impl std::str::FromStr for OverlapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reject" => Ok(Self::Reject),
            "clip" => Ok(Self::Clip),
            other => Err(format!("unknown overlap policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapEntry {
    pub user_id: String,
    pub first: (i64, i64),
    pub second: (i64, i64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub policy: Option<OverlapPolicy>,
    pub events_in: u64,
    pub events_out: u64,
    pub events_dropped: u64,
    pub events_clipped: u64,
    pub overlaps: u64,
    pub zero_duration_retained: u64,
    pub errors: Vec<OverlapEntry>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps == 0
    }
}

/// Resolves same-user overlaps. Zero-duration events are kept.
pub fn validate_log(log: &EventLog, policy: OverlapPolicy) -> (EventLog, ValidationReport) {
    let mut out = EventLog::new(log.catalog.clone());
    let mut report = ValidationReport {
        policy: Some(policy),
        ..Default::default()
    };
    for (user, events) in log.users() {
        report.events_in += events.len() as u64;
        let mut sorted = events.to_vec();
        sorted.sort_by_key(|e| (e.start, e.end));
        let kept = match policy {
            OverlapPolicy::Reject => {
                let mut drop = vec![false; sorted.len()];
                for i in 0..sorted.len() {
                    for j in i + 1..sorted.len() {
                        if sorted[j].start >= sorted[i].end {
                            break;
                        }
                        report.overlaps += 1;
                        report.errors.push(OverlapEntry {
                            user_id: user.to_string(),
                            first: (sorted[i].start, sorted[i].end),
                            second: (sorted[j].start, sorted[j].end),
                        });
                        drop[i] = true;
                        drop[j] = true;
                    }
                }
                sorted
                    .into_iter()
                    .zip(drop)
                    .filter_map(|(e, d)| (!d).then_some(e))
                    .collect::<Vec<_>>()
            }
            OverlapPolicy::Clip => {
                for i in 1..sorted.len() {
                    let next_start = sorted[i].start;
                    let prev = &mut sorted[i - 1];
                    if prev.end > next_start {
                        report.overlaps += 1;
                        report.events_clipped += 1;
                        prev.end = next_start;
                    }
                }
                sorted
            }
        };
        report.events_dropped += (events.len() - kept.len()) as u64;
        report.events_out += kept.len() as u64;
        report.zero_duration_retained += kept.iter().filter(|e| e.start == e.end).count() as u64;
        if !kept.is_empty() {
            out.users.insert(user.to_string(), kept);
        }
    }
    (out, report)
}

macro_rules! closed_enum {
    ($name:ident, $field:literal, { $($variant:ident => $label:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $label)]
                $variant,
            )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const FIELD: &'static str = $field;

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label,)+
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $($label => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

closed_enum!(Gender, "gender", { Male => "male", Female => "female" });
closed_enum!(AgeGroup, "age_group", {
    A18to20 => "18-20",
    A21to30 => "21-30",
    A31to40 => "31-40",
    A41to50 => "41-50",
    A51to64 => "51-64",
});
closed_enum!(Education, "education", { Low => "low", Medium => "medium", High => "high" });
closed_enum!(Occupation, "occupation", {
    Managers => "managers",
    Professionals => "professionals",
    Clerks => "clerks",
    Workers => "workers",
    Students => "students",
    Unemployed => "unemployed",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub education: Education,
    pub occupation: Occupation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileTable {
    profiles: BTreeMap<String, UserProfile>,
}

impl ProfileTable {
    pub fn from_profiles<I: IntoIterator<Item = UserProfile>>(iter: I) -> Self {
        Self {
            profiles: iter.into_iter().map(|p| (p.user_id.clone(), p)).collect(),
        }
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.profiles.get(user_id)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserProfile> {
        self.profiles.values()
    }

    /// Users present in the log but without a profile.
    pub fn missing_users(&self, log: &EventLog) -> Vec<String> {
        log.user_ids()
            .filter(|u| !self.profiles.contains_key(*u))
            .map(str::to_string)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user_id", "gender", "age_group", "education", "occupation"])?;
        for p in self.profiles.values() {
            w.write_record([
                p.user_id.as_str(),
                p.gender.label(),
                p.age_group.label(),
                p.education.label(),
                p.occupation.label(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses `user_id,gender,age_group,education,occupation`.
pub fn parse_profiles<R: Read>(reader: R) -> Result<ProfileTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = HashMap::new();
    for name in ["user_id", "gender", "age_group", "education", "occupation"] {
        let pos = headers
            .iter()
            .position(|h| h == name)
            .ok_or(IngestError::MissingColumn(name))?;
        idx.insert(name, pos);
    }
    let mut profiles = BTreeMap::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let line = row_idx as u64 + 2;
        let rec = rec?;
        if rec.len() < 5 {
            return Err(IngestError::FieldCount {
                line,
                found: rec.len(),
            });
        }
        let get = |name: &str| rec.get(idx[name]).unwrap_or("");
        fn level<T>(
            line: u64,
            field: &'static str,
            raw: &str,
            parse: fn(&str) -> Option<T>,
        ) -> Result<T, IngestError> {
            parse(raw).ok_or_else(|| IngestError::UnknownLevel {
                line,
                field,
                label: raw.to_string(),
            })
        }
        let user_id = get("user_id").to_string();
        let profile = UserProfile {
            gender: level(line, Gender::FIELD, get("gender"), Gender::parse)?,
            age_group: level(line, AgeGroup::FIELD, get("age_group"), AgeGroup::parse)?,
            education: level(line, Education::FIELD, get("education"), Education::parse)?,
            occupation: level(line, Occupation::FIELD, get("occupation"), Occupation::parse)?,
            user_id: user_id.clone(),
        };
        if profiles.insert(user_id.clone(), profile).is_some() {
            return Err(IngestError::DuplicateUser { line, user_id });
        }
    }
    Ok(ProfileTable { profiles })
}
