use std::collections::BTreeMap;

use chrono::FixedOffset;
use mobiseq::descriptives::{
    describe, initiating_distribution, observation_days, pearson, session_statistics, transition_analysis,
    InitiatingScope, Summary,
};
use mobiseq::ingest::{AppEvent, Category, CategoryCatalog};
use mobiseq::sessionizer::{sessionize, Session, UserSessions};
use proptest::prelude::*;

fn arb_users() -> impl Strategy<Value = Vec<UserSessions>> {
    let events = prop::collection::vec((0u16..20, 0i64..200_000, 0i64..100_000), 1..50);
    prop::collection::vec(events, 1..4).prop_map(|users| {
        users
            .into_iter()
            .enumerate()
            .map(|(u, raw)| {
                let mut t = 0;
                let evs: Vec<AppEvent> = raw
                    .into_iter()
                    .map(|(c, gap, d)| {
                        t += gap;
                        let e = AppEvent::new(Category(c), t, t + d);
                        t += d;
                        e
                    })
                    .collect();
                let id = format!("u{u}");
                UserSessions { user_id: id.clone(), threshold_secs: 60.0, n_gaps: evs.len() - 1, sessions: sessionize(&id, &evs, 60.0) }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn shares_and_transition_totals(users in arb_users()) {
        let all: Vec<&Session> = users.iter().flat_map(|u| u.sessions.iter()).collect();
        for scope in [InitiatingScope::Multi, InitiatingScope::Solo, InitiatingScope::SecondApp] {
            let d = initiating_distribution(all.iter().copied(), scope, 20);
            if d.total > 0 {
                prop_assert!((d.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let multi = initiating_distribution(all.iter().copied(), InitiatingScope::Multi, 20);
        let second = initiating_distribution(all.iter().copied(), InitiatingScope::SecondApp, 20);
        prop_assert_eq!(multi.total, second.total);
        let tm = transition_analysis(all.iter().copied(), 20);
        let expected: usize = all.iter().map(|s| s.n_events() - 1).sum();
        prop_assert_eq!(tm.total() as usize, expected);
        let rows: u64 = (0..20).map(|c| tm.row_total(c)).sum();
        let cols: u64 = (0..20).map(|c| tm.col_total(c)).sum();
        prop_assert_eq!(rows, tm.total());
        prop_assert_eq!(cols, tm.total());

        let stats = session_statistics(&users, &BTreeMap::new());
        let kinds = stats.kind_shares;
        prop_assert!((kinds.solo_once + kinds.solo_repeated + kinds.multi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance(
        xy in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
        a in 0.1f64..10.0, b in -50.0f64..50.0, c in 0.1f64..10.0, d in -50.0f64..50.0,
    ) {
        let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
        let Some(r) = pearson(&x, &y) else { return Ok(()); };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let y2: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        prop_assert!((pearson(&x2, &y2).unwrap() - r).abs() < 1e-9);
        let yneg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((pearson(&x, &yneg).unwrap() + r).abs() < 1e-12);
    }
}

#[test]
fn pearson_degenerate_cases() {
    assert_eq!(pearson(&[1.0], &[2.0]), None);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn summary_statistics() {
    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!((s.n, s.mean, s.median), (4, 2.5, 2.5));
    assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Summary::of(&[]).n, 0);
}

#[test]
fn observation_days_use_local_dates() {
    let utc8 = FixedOffset::east_opt(8 * 3600).unwrap();
    // 2016-07-01 15:00 UTC is 23:00 local; 17:00 UTC is 01:00 the next local day
    let e = |ms| AppEvent::new(Category(0), ms, ms);
    let base = 1_467_385_200_000;
    assert_eq!(observation_days(&[e(base), e(base + 2 * 3_600_000)], utc8), 2);
    assert_eq!(observation_days(&[e(base), e(base + 2 * 3_600_000)], FixedOffset::east_opt(0).unwrap()), 1);
    assert_eq!(observation_days(&[], utc8), 0);
}

#[test]
fn transition_fixture_by_hand() {
    let ev = |c: u16, t: i64| AppEvent::new(Category(c), t, t);
    let s1 = Session::new("u", 0, vec![ev(0, 0), ev(1, 1), ev(1, 2), ev(0, 3)]);
    let s2 = Session::new("u", 1, vec![ev(2, 100)]);
    let tm = transition_analysis([&s1, &s2], 3);
    assert_eq!(tm.count(0, 1), 1);
    assert_eq!(tm.count(1, 1), 1);
    assert_eq!(tm.count(1, 0), 1);
    assert_eq!(tm.total(), 3);
    assert_eq!(tm.assortative_rate(1), Some(0.5));
}

#[test]
fn describe_report_is_consistent() {
    let catalog = CategoryCatalog::default();
    let ev = |c: u16, t: i64| AppEvent::new(Category(c), t, t + 1000);
    let evs = vec![ev(0, 0), ev(1, 2000), ev(0, 500_000), ev(0, 1_000_000)];
    let users = vec![UserSessions { user_id: "u".into(), threshold_secs: 60.0, n_gaps: 3, sessions: sessionize("u", &evs, 60.0) }];
    let (report, tm) = describe(&users, &BTreeMap::from([("u".to_string(), 1)]), &catalog);
    assert_eq!(report.transitions_total, tm.total());
    assert_eq!(report.sessions.users[0].n_sessions, 3);
    assert_eq!(report.initiating_multi[catalog.name(Category(0))], 1.0);
}
