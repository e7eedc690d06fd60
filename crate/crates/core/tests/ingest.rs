use mobiseq::ingest::{
    parse_events, parse_profiles, validate_log, AppEvent, Category, CategoryCatalog, EventFormat, EventLog,
    IngestError, OverlapPolicy,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn arb_log() -> impl Strategy<Value = EventLog> {
    let event = (0u16..20, 0i64..10_000_000, 0i64..600_000);
    prop::collection::btree_map("[a-e]{1,3}", prop::collection::vec(event, 1..30), 1..5).prop_map(|users| {
        let users: BTreeMap<String, Vec<AppEvent>> = users
            .into_iter()
            .map(|(u, evs)| {
                let evs = evs
                    .into_iter()
                    .map(|(c, s, d)| AppEvent::new(Category(c), s, s + d))
                    .collect();
                (u, evs)
            })
            .collect();
        EventLog::from_users(CategoryCatalog::default(), users)
    })
}

proptest! {
    #[test]
    fn csv_round_trip(log in arb_log()) {
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let (back, report) = parse_events(buf.as_slice(), EventFormat::Csv, &CategoryCatalog::default()).unwrap();
        prop_assert_eq!(report.rows_valid as usize, log.n_events());
        prop_assert!(report.errors.is_empty());
        for (u, evs) in log.users() {
            prop_assert_eq!(back.user_events(u).unwrap(), evs);
        }
    }

    #[test]
    fn validation_removes_overlaps_and_conserves_counts(log in arb_log(), clip in any::<bool>()) {
        let policy = if clip { OverlapPolicy::Clip } else { OverlapPolicy::Reject };
        let (out, report) = validate_log(&log, policy);
        prop_assert_eq!(report.events_in as usize, log.n_events());
        prop_assert_eq!(report.events_out as usize, out.n_events());
        prop_assert_eq!(report.events_in, report.events_out + report.events_dropped);
        for (_, evs) in out.users() {
            for w in evs.windows(2) {
                prop_assert!(w[1].start >= w[0].end, "overlap survived: {:?}", w);
                prop_assert!(w[0].end >= w[0].start);
            }
        }
        let (again, second) = validate_log(&out, policy);
        prop_assert_eq!(second.overlaps, 0);
        prop_assert_eq!(again.n_events(), out.n_events());
    }
}

#[test]
fn iso_and_epoch_timestamps_agree() {
    let catalog = CategoryCatalog::default();
    let csv = "user_id,category,start,end\n\
               u1,Games,2016-07-01T00:00:00Z,2016-07-01T00:00:10Z\n\
               u1,Games,1467331210000,1467331220000\n";
    let (log, report) = parse_events(csv.as_bytes(), EventFormat::Csv, &catalog).unwrap();
    assert_eq!(report.rows_valid, 2);
    let evs = log.user_events("u1").unwrap();
    assert_eq!(evs[0].end, evs[1].start);
}

#[test]
fn jsonl_matches_csv() {
    let catalog = CategoryCatalog::default();
    let csv = "user_id,category,start,end\nu1,SNS,1000,5000\nu2,Video,0,100\n";
    let jsonl = "{\"user_id\":\"u1\",\"category\":\"SNS\",\"start\":1000,\"end\":5000}\n\
                 {\"user_id\":\"u2\",\"category\":\"Video\",\"start\":\"0\",\"end\":100}\n";
    let (a, _) = parse_events(csv.as_bytes(), EventFormat::Csv, &catalog).unwrap();
    let (b, _) = parse_events(jsonl.as_bytes(), EventFormat::Jsonl, &catalog).unwrap();
    assert_eq!(a.user_events("u1"), b.user_events("u1"));
    assert_eq!(a.user_events("u2"), b.user_events("u2"));
}

#[test]
fn bad_rows_are_reported_not_fatal() {
    let catalog = CategoryCatalog::default();
    let csv = "user_id,category,start,end\nu1,Nope,0,1\nu1,SNS,10,5\nu1,SNS,x,5\nu1,SNS,0,5\n";
    let (log, report) = parse_events(csv.as_bytes(), EventFormat::Csv, &catalog).unwrap();
    assert_eq!(log.n_events(), 1);
    assert_eq!(report.rows_in, 4);
    assert_eq!(report.errors.len(), 3);
    assert_eq!(report.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3, 4]);
}

#[test]
fn missing_column_is_an_error() {
    let r = parse_events("user_id,category,start\n".as_bytes(), EventFormat::Csv, &CategoryCatalog::default());
    assert!(matches!(r, Err(IngestError::MissingColumn("end"))));
}

#[test]
fn profiles_parse_and_reject_duplicates() {
    let ok = "user_id,gender,age_group,education,occupation\nu1,female,21-30,high,students\n";
    let t = parse_profiles(ok.as_bytes()).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.get("u1").unwrap().occupation.label(), "students");
    let dup = format!("{ok}u1,male,31-40,low,workers\n");
    assert!(parse_profiles(dup.as_bytes()).is_err());
    let bad = "user_id,gender,age_group,education,occupation\nu1,robot,21-30,high,students\n";
    assert!(parse_profiles(bad.as_bytes()).is_err());
}

#[test]
fn touching_events_are_not_overlaps() {
    let mut log = EventLog::new(CategoryCatalog::default());
    log.push("u", AppEvent::new(Category(0), 0, 10));
    log.push("u", AppEvent::new(Category(1), 10, 20));
    log.push("u", AppEvent::new(Category(2), 20, 20));
    log.sort();
    let (out, report) = validate_log(&log, OverlapPolicy::Reject);
    assert_eq!(report.overlaps, 0);
    assert_eq!(out.n_events(), 3);
}
