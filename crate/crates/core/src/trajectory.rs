//! Mobile trajectories and the OFF -> ON switch rate.
//!
//! Each active user-day is cut into the five circadian windows and every
//! window into fixed-width slots. A slot is ON iff some session interval
//! `[start, end)` overlaps it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{FixedOffset, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sessionizer::UserSessions;

const DAY_MS: i64 = 86_400_000;
/// Every slot width must divide this (the gcd of the window lengths).
pub const WINDOW_GCD_SECS: u32 = 7_200;
pub const DEFAULT_SLOT_SECS: u32 = 60;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("slot width {0} s must be positive and divide 7200 s")]
    SlotWidth(u32),
    #[error("switch rate needs at least one trajectory")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timespan {
    Small,
    Morning,
    Midday,
    Afternoon,
    Evening,
}

impl Timespan {
    pub const ALL: [Timespan; 5] = [
        Timespan::Small,
        Timespan::Morning,
        Timespan::Midday,
        Timespan::Afternoon,
        Timespan::Evening,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Timespan::Small => "small",
            Timespan::Morning => "morning",
            Timespan::Midday => "midday",
            Timespan::Afternoon => "afternoon",
            Timespan::Evening => "evening",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == s)
    }

    /// `[start, end)` in seconds after local midnight.
    pub fn bounds_secs(self) -> (u32, u32) {
        const H: u32 = 3_600;
        match self {
            Timespan::Small => (0, 8 * H),
            Timespan::Morning => (8 * H, 12 * H),
            Timespan::Midday => (12 * H, 14 * H),
            Timespan::Afternoon => (14 * H, 18 * H),
            Timespan::Evening => (18 * H, 24 * H),
        }
    }

    pub fn of_second(sec_of_day: u32) -> Self {
        Self::ALL
            .into_iter()
            .find(|t| {
                let (a, b) = t.bounds_secs();
                sec_of_day >= a && sec_of_day < b
            })
            .expect("windows partition the day")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotState {
    Off,
    On,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub date: NaiveDate,
    pub timespan: Timespan,
    pub slots: Vec<SlotState>,
}

fn date_of_day_index(day: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch") + chrono::Duration::days(day)
}

/// Builds one trajectory per (user, active local date, window).
pub fn build_trajectories(
    users: &[UserSessions],
    slot_secs: u32,
    offset: FixedOffset,
) -> Result<Vec<Trajectory>, TrajectoryError> {
    if slot_secs == 0 || WINDOW_GCD_SECS % slot_secs != 0 {
        return Err(TrajectoryError::SlotWidth(slot_secs));
    }
    let slot_ms = slot_secs as i64 * 1000;
    let slots_per_day = (DAY_MS / slot_ms) as usize;
    let off_ms = offset.local_minus_utc() as i64 * 1000;
    let mut out = Vec::new();
    for u in users {
        let mut days: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
        for s in &u.sessions {
            let start = s.start() + off_ms;
            // zero-length sessions still occupy the slot they start in
            let end = (s.end() + off_ms).max(start + 1);
            for day in start.div_euclid(DAY_MS)..=(end - 1).div_euclid(DAY_MS) {
                let day_start = day * DAY_MS;
                let lo = start.max(day_start) - day_start;
                let hi = end.min(day_start + DAY_MS) - day_start;
                let slots = days.entry(day).or_insert_with(|| vec![false; slots_per_day]);
                let first = (lo / slot_ms) as usize;
                let last = ((hi - 1) / slot_ms) as usize;
                slots[first..=last].iter_mut().for_each(|v| *v = true);
            }
        }
        for (day, slots) in days {
            let date = date_of_day_index(day);
            for ts in Timespan::ALL {
                let (a, b) = ts.bounds_secs();
                let range = (a / slot_secs) as usize..(b / slot_secs) as usize;
                out.push(Trajectory {
                    user_id: u.user_id.clone(),
                    date,
                    timespan: ts,
                    slots: slots[range]
                        .iter()
                        .map(|&on| if on { SlotState::On } else { SlotState::Off })
                        .collect(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchRate {
    pub rate: f64,
    pub numerator: u64,
    pub denominator: u64,
}

/// Position-pooled probability of moving from `from` at t to `to` at t+1,
/// over positions t that are not the last of their trajectory. `Ok(None)`
/// when no trajectory is in `from` at a non-terminal position.
pub fn switch_rate(
    trajectories: &[&[SlotState]],
    from: SlotState,
    to: SlotState,
) -> Result<Option<SwitchRate>, TrajectoryError> {
    if trajectories.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    let max_len = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    let (mut num, mut den) = (0u64, 0u64);
    for t in 0..max_len.saturating_sub(1) {
        for traj in trajectories {
            if t + 1 < traj.len() && traj[t] == from {
                den += 1;
                if traj[t + 1] == to {
                    num += 1;
                }
            }
        }
    }
    Ok((den > 0).then(|| SwitchRate {
        rate: num as f64 / den as f64,
        numerator: num,
        denominator: den,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRateRecord {
    pub user_id: String,
    pub date: NaiveDate,
    pub timespan: Timespan,
    pub rate: f64,
    pub n_off_positions: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReengagementTable {
    pub records: Vec<SwitchRateRecord>,
    /// Groups without any non-terminal OFF position.
    pub excluded: usize,
}

/// Switch rate OFF -> ON per (user, date, timespan) group, sorted by key.
pub fn reengagement_records(trajectories: &[Trajectory]) -> ReengagementTable {
    let mut groups: BTreeMap<(&str, NaiveDate, Timespan), Vec<&[SlotState]>> = BTreeMap::new();
    for t in trajectories {
        groups
            .entry((t.user_id.as_str(), t.date, t.timespan))
            .or_default()
            .push(&t.slots);
    }
    let mut table = ReengagementTable::default();
    for ((user, date, ts), trajs) in groups {
        match switch_rate(&trajs, SlotState::Off, SlotState::On).expect("group non-empty") {
            Some(r) => table.records.push(SwitchRateRecord {
                user_id: user.to_string(),
                date,
                timespan: ts,
                rate: r.rate,
                n_off_positions: r.denominator,
            }),
            None => table.excluded += 1,
        }
    }
    table
}

pub fn write_trajectories_csv<W: Write>(trajs: &[Trajectory], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "date", "timespan", "slots"])?;
    for t in trajs {
        let slots: String = t
            .slots
            .iter()
            .map(|s| if *s == SlotState::On { '1' } else { '0' })
            .collect();
        w.write_record([
            t.user_id.as_str(),
            &t.date.to_string(),
            t.timespan.label(),
            &slots,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |message: String| TrajectoryError::Parse { line, message };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let date = rec[1].parse().map_err(|e| err(format!("bad date: {e}")))?;
        let timespan = Timespan::parse(&rec[2]).ok_or_else(|| err(format!("bad timespan `{}`", &rec[2])))?;
        let slots = rec[3]
            .chars()
            .map(|c| match c {
                '0' => Ok(SlotState::Off),
                '1' => Ok(SlotState::On),
                other => Err(err(format!("bad slot `{other}`"))),
            })
            .collect::<Result<_, _>>()?;
        out.push(Trajectory {
            user_id: rec[0].to_string(),
            date,
            timespan,
            slots,
        });
    }
    Ok(out)
}

pub fn write_records_csv<W: Write>(records: &[SwitchRateRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "date", "timespan", "rate", "n_off_positions"])?;
    for r in records {
        w.write_record([
            r.user_id.as_str(),
            &r.date.to_string(),
            r.timespan.label(),
            &r.rate.to_string(),
            &r.n_off_positions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<SwitchRateRecord>, TrajectoryError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |message: String| TrajectoryError::Parse { line, message };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", rec.len())));
        }
        let rate: f64 = rec[3].parse().map_err(|_| err(format!("bad rate `{}`", &rec[3])))?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(err(format!("rate {rate} outside [0, 1]")));
        }
        out.push(SwitchRateRecord {
            user_id: rec[0].to_string(),
            date: rec[1].parse().map_err(|e| err(format!("bad date: {e}")))?,
            timespan: Timespan::parse(&rec[2]).ok_or_else(|| err(format!("bad timespan `{}`", &rec[2])))?,
            rate,
            n_off_positions: rec[4].parse().map_err(|_| err("bad n_off_positions".into()))?,
        });
    }
    Ok(out)
}

/// Distinct (user, date) pairs that produced trajectories.
pub fn active_days(trajs: &[Trajectory]) -> BTreeSet<(String, NaiveDate)> {
    trajs.iter().map(|t| (t.user_id.clone(), t.date)).collect()
}
