//! Median-threshold sessionization.
//!
//! A gap is the idle time between the end of one app use and the start of
//! the next. Two consecutive uses belong to the same session iff their gap
//! is strictly smaller than the user's threshold (the median of all the
//! user's gaps).

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{AppEvent, Category, CategoryCatalog, EventLog};

/// Fallback threshold for users with fewer than two events.
pub const DEFAULT_THRESHOLD_SECS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionKind {
    SoloOnce,
    SoloRepeated,
    Multi,
}

impl SessionKind {
    pub fn label(self) -> &'static str {
        match self {
            SessionKind::SoloOnce => "solo_once",
            SessionKind::SoloRepeated => "solo_repeated",
            SessionKind::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "solo_once" => Some(Self::SoloOnce),
            "solo_repeated" => Some(Self::SoloRepeated),
            "multi" => Some(Self::Multi),
            _ => None,
        }
    }

    pub fn is_solo(self) -> bool {
        !matches!(self, SessionKind::Multi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    /// Position of the session within the user's stream, from 0.
    pub index: usize,
    pub events: Vec<AppEvent>,
    pub kind: SessionKind,
}

impl Session {
    pub fn new(user_id: impl Into<String>, index: usize, events: Vec<AppEvent>) -> Self {
        assert!(!events.is_empty(), "session must hold at least one event");
        let kind = classify(&events);
        Self {
            user_id: user_id.into(),
            index,
            events,
            kind,
        }
    }

    pub fn start(&self) -> i64 {
        self.events[0].start
    }

    pub fn end(&self) -> i64 {
        self.events[self.events.len() - 1].end
    }

    pub fn duration_secs(&self) -> f64 {
        (self.end() - self.start()) as f64 / 1000.0
    }

    /// Time spent in apps, internal gaps excluded.
    pub fn active_secs(&self) -> f64 {
        self.events.iter().map(AppEvent::duration_secs).sum()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Number of spell boundaries (adjacent category changes).
    pub fn n_transitions(&self) -> usize {
        self.events
            .windows(2)
            .filter(|w| w[0].category != w[1].category)
            .count()
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.events.iter().map(|e| e.category)
    }

    pub fn category_string(&self, catalog: &CategoryCatalog) -> String {
        self.categories()
            .map(|c| catalog.name(c))
            .collect::<Vec<_>>()
            .join(">")
    }
}

fn classify(events: &[AppEvent]) -> SessionKind {
    match events {
        [_] => SessionKind::SoloOnce,
        [first, rest @ ..] if rest.iter().all(|e| e.category == first.category) => {
            SessionKind::SoloRepeated
        }
        _ => SessionKind::Multi,
    }
}

pub fn classify_session(session: &Session) -> SessionKind {
    classify(&session.events)
}

/// Idle gaps in seconds between consecutive events.
pub fn inter_event_gaps(events: &[AppEvent]) -> Vec<f64> {
    events
        .windows(2)
        .map(|w| (w[1].start - w[0].end) as f64 / 1000.0)
        .collect()
}

/// Median of `gaps`, or `default` when empty.
pub fn median_threshold(gaps: &[f64], default: f64) -> f64 {
    median(gaps).unwrap_or(default)
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Splits one user's sorted events into sessions.
pub fn sessionize(user_id: &str, events: &[AppEvent], threshold_secs: f64) -> Vec<Session> {
    let mut sessions = Vec::new();
    let mut current: Vec<AppEvent> = Vec::new();
    for ev in events {
        if let Some(prev) = current.last() {
            let gap = (ev.start - prev.end) as f64 / 1000.0;
            if gap >= threshold_secs {
                let idx = sessions.len();
                sessions.push(Session::new(user_id, idx, std::mem::take(&mut current)));
            }
        }
        current.push(*ev);
    }
    if !current.is_empty() {
        let idx = sessions.len();
        sessions.push(Session::new(user_id, idx, current));
    }
    sessions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSessions {
    pub user_id: String,
    pub threshold_secs: f64,
    pub n_gaps: usize,
    pub sessions: Vec<Session>,
}

/// Sessionizes every user with their own median threshold.
pub fn sessionize_log(log: &EventLog, default_threshold: f64) -> Vec<UserSessions> {
    let users: Vec<(&str, &[AppEvent])> = log.users().collect();
    users
        .par_iter()
        .map(|(user, events)| {
            let gaps = inter_event_gaps(events);
            let threshold = median_threshold(&gaps, default_threshold);
            UserSessions {
                user_id: user.to_string(),
                threshold_secs: threshold,
                n_gaps: gaps.len(),
                sessions: sessionize(user, events, threshold),
            }
        })
        .collect()
}

/// Re-applies previously computed per-user thresholds.
pub fn sessionize_with_thresholds(
    log: &EventLog,
    thresholds: &BTreeMap<String, f64>,
    default_threshold: f64,
) -> Vec<UserSessions> {
    let users: Vec<(&str, &[AppEvent])> = log.users().collect();
    users
        .par_iter()
        .map(|(user, events)| {
            let threshold = thresholds.get(*user).copied().unwrap_or(default_threshold);
            UserSessions {
                user_id: user.to_string(),
                threshold_secs: threshold,
                n_gaps: events.len().saturating_sub(1),
                sessions: sessionize(user, events, threshold),
            }
        })
        .collect()
}

pub fn write_sessions_csv<W: Write>(
    users: &[UserSessions],
    catalog: &CategoryCatalog,
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "user_id",
        "session_id",
        "kind",
        "start",
        "end",
        "n_events",
        "n_transitions",
        "categories",
    ])?;
    for u in users {
        for s in &u.sessions {
            w.write_record([
                s.user_id.as_str(),
                &s.index.to_string(),
                s.kind.label(),
                &s.start().to_string(),
                &s.end().to_string(),
                &s.n_events().to_string(),
                &s.n_transitions().to_string(),
                &s.category_string(catalog),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_thresholds_csv<W: Write>(users: &[UserSessions], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "threshold_secs", "n_gaps", "n_sessions"])?;
    for u in users {
        w.write_record([
            u.user_id.as_str(),
            &u.threshold_secs.to_string(),
            &u.n_gaps.to_string(),
            &u.sessions.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_thresholds_csv<R: std::io::Read>(reader: R) -> Result<BTreeMap<String, f64>, String> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let user = rec.get(0).ok_or_else(|| format!("row {}: missing user_id", i + 2))?;
        let t: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("row {}: bad threshold", i + 2))?;
        out.insert(user.to_string(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(c: u16, s: i64, e: i64) -> AppEvent {
        AppEvent::new(Category(c), s * 1000, e * 1000)
    }

    #[test]
    fn gaps_are_idle_time() {
        let events = [ev(0, 0, 100), ev(0, 130, 200), ev(0, 500, 600)];
        assert_eq!(inter_event_gaps(&events), vec![30.0, 300.0]);
        assert!(inter_event_gaps(&events[..1]).is_empty());
        assert_eq!(inter_event_gaps(&[ev(0, 0, 100), ev(0, 100, 150)]), vec![0.0]);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median_threshold(&[10.0, 20.0, 30.0], 60.0), 20.0);
        assert_eq!(median_threshold(&[40.0, 10.0, 30.0, 20.0], 60.0), 25.0);
        assert_eq!(median_threshold(&[], DEFAULT_THRESHOLD_SECS), 60.0);
    }

    #[test]
    fn sessionize_applies_strict_rule() {
        let events = [ev(0, 0, 100), ev(1, 130, 200), ev(0, 500, 600)];
        let s = sessionize("u", &events, 165.0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].n_events(), 2);
        assert_eq!(s[1].n_events(), 1);
        // gap exactly at threshold splits
        let s = sessionize("u", &events, 30.0);
        assert_eq!(s.len(), 3);
        let s = sessionize("u", &events[..1], 0.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].kind, SessionKind::SoloOnce);
    }

    #[test]
    fn classification() {
        let one = Session::new("u", 0, vec![ev(13, 0, 1)]);
        assert_eq!(classify_session(&one), SessionKind::SoloOnce);
        let rep = Session::new("u", 0, vec![ev(13, 0, 1), ev(13, 2, 3)]);
        assert_eq!(classify_session(&rep), SessionKind::SoloRepeated);
        let multi = Session::new("u", 0, vec![ev(0, 0, 1), ev(13, 2, 3)]);
        assert_eq!(classify_session(&multi), SessionKind::Multi);
        assert_eq!(multi.n_transitions(), 1);
        assert_eq!(rep.n_transitions(), 0);
    }

    #[test]
    fn session_bounds() {
        let s = Session::new("u", 0, vec![ev(0, 10, 20), ev(1, 25, 40)]);
        assert_eq!(s.start(), 10_000);
        assert_eq!(s.end(), 40_000);
        assert_eq!(s.duration_secs(), 30.0);
        assert_eq!(s.active_secs(), 25.0);
    }

    #[test]
    fn thresholds_csv_round_trip() {
        let mut log = EventLog::new(CategoryCatalog::default());
        for (s, e) in [(0, 10), (15, 20), (100, 110)] {
            log.push("a", ev(0, s, e));
        }
        let users = sessionize_log(&log, 60.0);
        let mut buf = Vec::new();
        write_thresholds_csv(&users, &mut buf).unwrap();
        let t = read_thresholds_csv(buf.as_slice()).unwrap();
        assert_eq!(t["a"], users[0].threshold_secs);
        let again = sessionize_with_thresholds(&log, &t, 60.0);
        assert_eq!(again[0].sessions, users[0].sessions);
    }
}
