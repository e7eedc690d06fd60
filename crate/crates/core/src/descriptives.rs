//! Session-level descriptive statistics: volumes, durations, repertoires,
//! initiating apps, transitions and the duration/transition correlation.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, FixedOffset, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::ingest::{AppEvent, CategoryCatalog, EventLog};
use crate::sessionizer::{Session, SessionKind, UserSessions};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1); 0 for n < 2.
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean,
            median: crate::sessionizer::median(values).unwrap_or(0.0),
            sd,
        }
    }
}

pub(crate) fn local_date(ms: i64, offset: FixedOffset) -> NaiveDate {
    DateTime::from_timestamp_millis(ms)
        .expect("timestamp in range")
        .with_timezone(&offset)
        .date_naive()
}

/// Inclusive day span between a user's first and last event (local dates).
pub fn observation_days(events: &[AppEvent], offset: FixedOffset) -> u32 {
    let Some(first) = events.iter().map(|e| e.start).min() else {
        return 0;
    };
    let last = events.iter().map(|e| e.end).max().expect("non-empty");
    let span = local_date(last, offset) - local_date(first, offset);
    span.num_days() as u32 + 1
}

pub fn observation_days_by_user(log: &EventLog, offset: FixedOffset) -> BTreeMap<String, u32> {
    log.users()
        .map(|(u, ev)| (u.to_string(), observation_days(ev, offset)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: String,
    pub n_sessions: usize,
    pub observation_days: u32,
    pub sessions_per_day: f64,
    pub mean_session_duration_s: f64,
    pub repertoire_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KindShares {
    pub solo_once: f64,
    pub solo_repeated: f64,
    pub multi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub n_users: usize,
    pub n_sessions: usize,
    pub sessions_per_day: Summary,
    /// Pooled over all sessions.
    pub session_duration_s: Summary,
    /// Over per-user mean durations.
    pub user_mean_duration_s: Summary,
    pub kind_counts: BTreeMap<String, usize>,
    pub kind_shares: KindShares,
    /// Share of total session time spent in solo-app sessions.
    pub solo_time_share: f64,
    pub repertoire_size: Summary,
    pub users: Vec<UserStats>,
}

pub fn session_statistics(
    users: &[UserSessions],
    observation_days: &BTreeMap<String, u32>,
) -> SessionStats {
    let mut all_durations = Vec::new();
    let mut per_user = Vec::with_capacity(users.len());
    let mut kinds = [0usize; 3];
    let (mut solo_time, mut total_time) = (0.0, 0.0);
    for u in users {
        let mut seen = std::collections::BTreeSet::new();
        let mut dur_sum = 0.0;
        for s in &u.sessions {
            let d = s.duration_secs();
            all_durations.push(d);
            dur_sum += d;
            total_time += d;
            if s.kind.is_solo() {
                solo_time += d;
            }
            kinds[s.kind as usize] += 1;
            seen.extend(s.categories());
        }
        let days = observation_days.get(&u.user_id).copied().unwrap_or(1).max(1);
        let n = u.sessions.len();
        per_user.push(UserStats {
            user_id: u.user_id.clone(),
            n_sessions: n,
            observation_days: days,
            sessions_per_day: n as f64 / days as f64,
            mean_session_duration_s: if n > 0 { dur_sum / n as f64 } else { 0.0 },
            repertoire_size: seen.len(),
        });
    }
    let n_sessions = all_durations.len();
    let share = |c: usize| if n_sessions > 0 { c as f64 / n_sessions as f64 } else { 0.0 };
    let col = |f: fn(&UserStats) -> f64| per_user.iter().map(f).collect::<Vec<_>>();
    SessionStats {
        n_users: users.len(),
        n_sessions,
        sessions_per_day: Summary::of(&col(|u| u.sessions_per_day)),
        session_duration_s: Summary::of(&all_durations),
        user_mean_duration_s: Summary::of(&col(|u| u.mean_session_duration_s)),
        kind_counts: [
            (SessionKind::SoloOnce, kinds[0]),
            (SessionKind::SoloRepeated, kinds[1]),
            (SessionKind::Multi, kinds[2]),
        ]
        .into_iter()
        .map(|(k, c)| (k.label().to_string(), c))
        .collect(),
        kind_shares: KindShares {
            solo_once: share(kinds[0]),
            solo_repeated: share(kinds[1]),
            multi: share(kinds[2]),
        },
        solo_time_share: if total_time > 0.0 { solo_time / total_time } else { 0.0 },
        repertoire_size: Summary::of(&col(|u| u.repertoire_size as f64)),
        users: per_user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitiatingScope {
    Multi,
    Solo,
    SecondApp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub counts: Vec<u64>,
    pub shares: Vec<f64>,
    pub total: u64,
}

/// Share of sessions per category for the chosen scope: the initiating
/// app of multi-app sessions, the app of solo sessions, or the second
/// distinct app of multi-app sessions.
pub fn initiating_distribution<'a, I>(sessions: I, scope: InitiatingScope, n_categories: usize) -> Distribution
where
    I: IntoIterator<Item = &'a Session>,
{
    let mut counts = vec![0u64; n_categories];
    for s in sessions {
        let first = s.events[0].category;
        let hit = match (scope, s.kind) {
            (InitiatingScope::Multi, SessionKind::Multi) => Some(first),
            (InitiatingScope::Solo, k) if k.is_solo() => Some(first),
            (InitiatingScope::SecondApp, SessionKind::Multi) => {
                s.categories().find(|&c| c != first)
            }
            _ => None,
        };
        if let Some(c) = hit {
            counts[c.index()] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let shares = counts
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect();
    Distribution {
        counts,
        shares,
        total,
    }
}

/// Counts of adjacent event pairs within sessions, by category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl TransitionMatrix {
    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.n + to]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, from: usize) -> u64 {
        (0..self.n).map(|j| self.count(from, j)).sum()
    }

    pub fn col_total(&self, to: usize) -> u64 {
        (0..self.n).map(|i| self.count(i, to)).sum()
    }

    /// Row-normalized rates; rows without transitions are all zero.
    pub fn rates(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let t = self.row_total(i);
            if t > 0 {
                for j in 0..self.n {
                    out[i * self.n + j] = self.count(i, j) as f64 / t as f64;
                }
            }
        }
        out
    }

    /// Diagonal share of row `c`.
    pub fn assortative_rate(&self, c: usize) -> Option<f64> {
        let t = self.row_total(c);
        (t > 0).then(|| self.count(c, c) as f64 / t as f64)
    }

    /// Off-diagonal share of row `c`.
    pub fn outgoing_rate(&self, c: usize) -> Option<f64> {
        let t = self.row_total(c);
        (t > 0).then(|| (t - self.count(c, c)) as f64 / t as f64)
    }

    /// Off-diagonal share of column `c`.
    pub fn incoming_rate(&self, c: usize) -> Option<f64> {
        let t = self.col_total(c);
        (t > 0).then(|| (t - self.count(c, c)) as f64 / t as f64)
    }

    pub fn write_csv<W: Write>(&self, catalog: &CategoryCatalog, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["from".to_string()];
        header.extend(catalog.names().iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut row = vec![catalog.names()[i].clone()];
            row.extend((0..self.n).map(|j| self.count(i, j).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn transition_analysis<'a, I>(sessions: I, n_categories: usize) -> TransitionMatrix
where
    I: IntoIterator<Item = &'a Session>,
{
    let mut counts = vec![0u64; n_categories * n_categories];
    for s in sessions {
        for w in s.events.windows(2) {
            counts[w[0].category.index() * n_categories + w[1].category.index()] += 1;
        }
    }
    TransitionMatrix {
        n: n_categories,
        counts,
    }
}

/// Pearson correlation; `None` when either variable has zero variance or
/// fewer than two points are given.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Session duration vs adjacent event pairs (n_events - 1).
    pub overall: Option<f64>,
    /// Session duration vs category changes.
    pub overall_category_changes: Option<f64>,
    /// Time on category c vs adjacent event pairs, over sessions using c.
    pub per_category: Option<Vec<Option<f64>>>,
    pub n_sessions: usize,
}

pub fn duration_transition_correlation(
    sessions: &[&Session],
    per_category: bool,
    n_categories: usize,
) -> CorrelationReport {
    let dur: Vec<f64> = sessions.iter().map(|s| s.duration_secs()).collect();
    let pairs: Vec<f64> = sessions.iter().map(|s| (s.n_events() - 1) as f64).collect();
    let changes: Vec<f64> = sessions.iter().map(|s| s.n_transitions() as f64).collect();
    let per_category = per_category.then(|| {
        (0..n_categories)
            .map(|c| {
                let (mut x, mut y) = (Vec::new(), Vec::new());
                for s in sessions {
                    let t: f64 = s
                        .events
                        .iter()
                        .filter(|e| e.category.index() == c)
                        .map(AppEvent::duration_secs)
                        .sum();
                    if s.events.iter().any(|e| e.category.index() == c) {
                        x.push(t);
                        y.push((s.n_events() - 1) as f64);
                    }
                }
                pearson(&x, &y)
            })
            .collect()
    });
    CorrelationReport {
        overall: pearson(&dur, &pairs),
        overall_category_changes: pearson(&dur, &changes),
        per_category,
        n_sessions: sessions.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub category: String,
    pub assortative: Option<f64>,
    pub disassortative_outgoing: Option<f64>,
    pub disassortative_incoming: Option<f64>,
}

/// Everything the `describe` stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeReport {
    pub sessions: SessionStats,
    pub initiating_multi: BTreeMap<String, f64>,
    pub initiating_solo: BTreeMap<String, f64>,
    pub second_app: BTreeMap<String, f64>,
    pub transitions_total: u64,
    pub assortative_share: Option<f64>,
    pub category_rates: Vec<CategoryRates>,
    pub correlation: CorrelationReport,
}

pub fn describe(
    users: &[UserSessions],
    observation_days: &BTreeMap<String, u32>,
    catalog: &CategoryCatalog,
) -> (DescribeReport, TransitionMatrix) {
    let n = catalog.len();
    let all: Vec<&Session> = users.iter().flat_map(|u| u.sessions.iter()).collect();
    let named = |d: Distribution| -> BTreeMap<String, f64> {
        catalog
            .names()
            .iter()
            .cloned()
            .zip(d.shares)
            .collect()
    };
    let tm = transition_analysis(all.iter().copied(), n);
    let diag: u64 = (0..n).map(|c| tm.count(c, c)).sum();
    let total = tm.total();
    let category_rates = (0..n)
        .map(|c| CategoryRates {
            category: catalog.names()[c].clone(),
            assortative: tm.assortative_rate(c),
            disassortative_outgoing: tm.outgoing_rate(c),
            disassortative_incoming: tm.incoming_rate(c),
        })
        .collect();
    let report = DescribeReport {
        sessions: session_statistics(users, observation_days),
        initiating_multi: named(initiating_distribution(all.iter().copied(), InitiatingScope::Multi, n)),
        initiating_solo: named(initiating_distribution(all.iter().copied(), InitiatingScope::Solo, n)),
        second_app: named(initiating_distribution(all.iter().copied(), InitiatingScope::SecondApp, n)),
        transitions_total: total,
        assortative_share: (total > 0).then(|| diag as f64 / total as f64),
        category_rates,
        correlation: duration_transition_correlation(&all, true, n),
    };
    (report, tm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Category;

    fn session(cats: &[u16], step: i64, dur: i64) -> Session {
        let events = cats
            .iter()
            .enumerate()
            .map(|(i, &c)| AppEvent::new(Category(c), i as i64 * step, i as i64 * step + dur))
            .collect();
        Session::new("u", 0, events)
    }

    #[test]
    fn sessions_per_day_and_repertoire() {
        let users = vec![UserSessions {
            user_id: "u".into(),
            threshold_secs: 10.0,
            n_gaps: 1,
            sessions: vec![session(&[0, 13], 1000, 500), session(&[0], 1000, 500)],
        }];
        let days = BTreeMap::from([("u".to_string(), 1)]);
        let s = session_statistics(&users, &days);
        assert_eq!(s.sessions_per_day.mean, 2.0);
        assert_eq!(s.users[0].repertoire_size, 2);
        let k = s.kind_shares;
        assert!((k.solo_once + k.solo_repeated + k.multi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn observation_span_is_inclusive() {
        let tz = FixedOffset::east_opt(0).unwrap();
        let day = 86_400_000;
        let ev = [AppEvent::new(Category(0), 0, 1), AppEvent::new(Category(0), 2 * day + 5, 2 * day + 6)];
        assert_eq!(observation_days(&ev, tz), 3);
        assert_eq!(observation_days(&ev[..1], tz), 1);
    }

    #[test]
    fn initiating_and_second_app() {
        let ss = [session(&[0, 13], 10, 5), session(&[0, 15], 10, 5)];
        let d = initiating_distribution(ss.iter(), InitiatingScope::Multi, 20);
        assert_eq!(d.shares[0], 1.0);
        let s = session(&[0, 0, 13, 2], 10, 5);
        let d = initiating_distribution([&s], InitiatingScope::SecondApp, 20);
        assert_eq!(d.counts[13], 1);
        let empty = initiating_distribution(ss.iter(), InitiatingScope::Solo, 20);
        assert_eq!(empty.total, 0);
        assert!(empty.shares.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transitions_on_raw_adjacency() {
        let s = session(&[0, 0, 1], 10, 5);
        let tm = transition_analysis([&s], 3);
        assert_eq!(tm.count(0, 0), 1);
        assert_eq!(tm.count(0, 1), 1);
        assert_eq!(tm.assortative_rate(0), Some(0.5));
        assert_eq!(tm.outgoing_rate(0), Some(0.5));
        assert_eq!(tm.incoming_rate(1), Some(1.0));
        let solo = session(&[2], 10, 5);
        assert_eq!(transition_analysis([&solo], 3).total(), 0);
    }

    #[test]
    fn correlation_cases() {
        let ss: Vec<Session> = (1..5).map(|k| session(&vec![0; k + 1], 100, 50)).collect();
        let refs: Vec<&Session> = ss.iter().collect();
        let r = duration_transition_correlation(&refs, false, 20);
        assert!((r.overall.unwrap() - 1.0).abs() < 1e-12);
        let flat: Vec<Session> = (1..5).map(|k| session(&[0, 1], 100 * k, 50)).collect();
        let refs: Vec<&Session> = flat.iter().collect();
        assert_eq!(duration_transition_correlation(&refs, false, 20).overall, None);
    }

    #[test]
    fn pearson_affine_invariance() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y = [2.0, 1.0, 5.0, 6.0];
        let r = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 10.0).collect();
        assert!((pearson(&x2, &y).unwrap() - r).abs() < 1e-12);
    }
}
