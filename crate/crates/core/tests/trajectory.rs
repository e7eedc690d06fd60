use chrono::FixedOffset;
use mobiseq::ingest::{AppEvent, Category};
use mobiseq::sessionizer::{sessionize, UserSessions};
use mobiseq::trajectory::{
    build_trajectories, read_records_csv, read_trajectories_csv, reengagement_records, switch_rate, write_records_csv,
    write_trajectories_csv, SlotState, Timespan, Trajectory, TrajectoryError,
};
use proptest::prelude::*;

fn arb_users() -> impl Strategy<Value = Vec<UserSessions>> {
    let events = prop::collection::vec((0i64..4 * 3_600_000, 0i64..1_800_000), 1..30);
    prop::collection::vec(events, 1..3).prop_map(|users| {
        users
            .into_iter()
            .enumerate()
            .map(|(u, raw)| {
                let mut t = 1_467_331_200_000;
                let evs: Vec<AppEvent> = raw
                    .into_iter()
                    .map(|(gap, d)| {
                        t += gap;
                        let e = AppEvent::new(Category(0), t, t + d);
                        t += d;
                        e
                    })
                    .collect();
                let id = format!("u{u}");
                UserSessions { user_id: id.clone(), threshold_secs: 60.0, n_gaps: 0, sessions: sessionize(&id, &evs, 60.0) }
            })
            .collect()
    })
}

fn tz() -> FixedOffset {
    FixedOffset::east_opt(8 * 3600).unwrap()
}

proptest! {
    #[test]
    fn slot_counts_and_refinement(users in arb_users(), g_idx in 0usize..5) {
        let g = [60u32, 120, 300, 600, 3600][g_idx];
        let coarse = build_trajectories(&users, g, tz()).unwrap();
        let fine = build_trajectories(&users, g / 2, tz()).unwrap();
        prop_assert_eq!(coarse.len(), fine.len());
        prop_assert_eq!(coarse.len() % 5, 0);
        for (c, f) in coarse.iter().zip(&fine) {
            let (a, b) = c.timespan.bounds_secs();
            prop_assert_eq!(c.slots.len() as u32, (b - a) / g);
            prop_assert_eq!((&c.user_id, c.date, c.timespan), (&f.user_id, f.date, f.timespan));
            // a coarse slot is ON exactly when either of its halves is ON
            for (i, s) in c.slots.iter().enumerate() {
                let on = f.slots[2 * i] == SlotState::On || f.slots[2 * i + 1] == SlotState::On;
                prop_assert_eq!(*s == SlotState::On, on);
            }
        }
        let table = reengagement_records(&coarse);
        for r in &table.records {
            prop_assert!((0.0..=1.0).contains(&r.rate));
            prop_assert!(r.n_off_positions > 0);
        }
        prop_assert_eq!(table.records.len() + table.excluded, coarse.len());
    }
}

#[test]
fn slot_width_must_divide_windows() {
    let users: Vec<UserSessions> = vec![];
    assert!(matches!(build_trajectories(&users, 7, tz()), Err(TrajectoryError::SlotWidth(7))));
    assert!(matches!(build_trajectories(&users, 0, tz()), Err(TrajectoryError::SlotWidth(0))));
    assert!(build_trajectories(&users, 7200, tz()).is_ok());
}

#[test]
fn windows_partition_the_day() {
    assert_eq!(Timespan::of_second(0), Timespan::Small);
    assert_eq!(Timespan::of_second(8 * 3600 - 1), Timespan::Small);
    assert_eq!(Timespan::of_second(8 * 3600), Timespan::Morning);
    assert_eq!(Timespan::of_second(13 * 3600), Timespan::Midday);
    assert_eq!(Timespan::of_second(86_399), Timespan::Evening);
    let total: u32 = Timespan::ALL.iter().map(|t| t.bounds_secs().1 - t.bounds_secs().0).sum();
    assert_eq!(total, 86_400);
}

#[test]
fn switch_rate_examples() {
    use SlotState::{Off, On};
    let all_on = [vec![On, On, On]];
    let refs: Vec<&[SlotState]> = all_on.iter().map(Vec::as_slice).collect();
    assert_eq!(switch_rate(&refs, Off, On).unwrap(), None);
    let terminal_off = [vec![On, Off]];
    let refs: Vec<&[SlotState]> = terminal_off.iter().map(Vec::as_slice).collect();
    assert_eq!(switch_rate(&refs, Off, On).unwrap(), None);
    assert!(switch_rate(&[], Off, On).is_err());
}

#[test]
fn session_marks_local_slots() {
    // 2016-07-01 00:00 UTC is 08:00 at +08:00; a 90 s session covers slots 0 and 1 of the morning window
    let start = 1_467_331_200_000;
    let evs = vec![AppEvent::new(Category(0), start, start + 90_000)];
    let users = vec![UserSessions { user_id: "u".into(), threshold_secs: 60.0, n_gaps: 0, sessions: sessionize("u", &evs, 60.0) }];
    let trajs = build_trajectories(&users, 60, tz()).unwrap();
    let morning = trajs.iter().find(|t| t.timespan == Timespan::Morning).unwrap();
    assert_eq!(morning.date.to_string(), "2016-07-01");
    let on: Vec<usize> = morning.slots.iter().enumerate().filter(|(_, s)| **s == SlotState::On).map(|(i, _)| i).collect();
    assert_eq!(on, vec![0, 1]);
    assert!(trajs.iter().filter(|t| t.timespan != Timespan::Morning).all(|t| t.slots.iter().all(|s| *s == SlotState::Off)));
}

#[test]
fn csv_round_trips() {
    use SlotState::{Off, On};
    let date = chrono::NaiveDate::from_ymd_opt(2016, 7, 2).unwrap();
    let trajs = vec![
        Trajectory { user_id: "a".into(), date, timespan: Timespan::Midday, slots: vec![Off, On, Off, Off] },
        Trajectory { user_id: "b".into(), date, timespan: Timespan::Evening, slots: vec![On, Off, On] },
    ];
    let mut buf = Vec::new();
    write_trajectories_csv(&trajs, &mut buf).unwrap();
    assert_eq!(read_trajectories_csv(buf.as_slice()).unwrap(), trajs);

    let table = reengagement_records(&trajs);
    let mut buf = Vec::new();
    write_records_csv(&table.records, &mut buf).unwrap();
    assert_eq!(read_records_csv(buf.as_slice()).unwrap(), table.records);
}
