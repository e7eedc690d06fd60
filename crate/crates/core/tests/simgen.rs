use mobiseq::ingest::CategoryCatalog;
use mobiseq::sessionizer::sessionize_log;
use mobiseq::simgen::{evaluate_recovery, generate_log, GenConfig, GenError};

#[test]
fn same_seed_same_bytes_different_seed_different_log() {
    let catalog = CategoryCatalog::default();
    let cfg = GenConfig { n_users: 8, n_days: 3, ..GenConfig::acceptance(5) };
    let bytes = |cfg: &GenConfig| {
        let g = generate_log(cfg, &catalog).unwrap();
        let mut buf = Vec::new();
        g.log.write_csv(&mut buf).unwrap();
        g.profiles.write_csv(&mut buf).unwrap();
        buf.extend(serde_json::to_vec(&g.truth).unwrap());
        buf
    };
    assert_eq!(bytes(&cfg), bytes(&cfg));
    let other = GenConfig { seed: 6, ..cfg.clone() };
    assert_ne!(bytes(&cfg), bytes(&other));
    assert_eq!(cfg.run_id(), cfg.clone().run_id());
    assert_ne!(cfg.run_id(), other.run_id());
}

#[test]
fn users_do_not_depend_on_panel_size() {
    let catalog = CategoryCatalog::default();
    let small = generate_log(&GenConfig { n_users: 3, n_days: 2, ..GenConfig::acceptance(9) }, &catalog).unwrap();
    let large = generate_log(&GenConfig { n_users: 6, n_days: 2, ..GenConfig::acceptance(9) }, &catalog).unwrap();
    for (u, evs) in small.log.users() {
        assert_eq!(large.log.user_events(u), Some(evs), "{u}");
    }
}

#[test]
fn ground_truth_matches_the_log() {
    let catalog = CategoryCatalog::default();
    let cfg = GenConfig { n_users: 10, n_days: 4, ..GenConfig::acceptance(2) };
    let g = generate_log(&cfg, &catalog).unwrap();
    assert_eq!(g.truth.users.len(), 10);
    assert_eq!(g.profiles.len(), 10);
    for (u, t) in &g.truth.users {
        let evs = g.log.user_events(u).unwrap();
        assert_eq!(t.n_events, evs.len());
        assert!(t.boundaries.windows(2).all(|w| w[0] < w[1]));
        assert!(t.boundaries.iter().all(|&b| b > 0 && b < evs.len()));
        assert!(evs.windows(2).all(|w| w[1].start >= w[0].end));
    }
    assert!(!g.truth.planted.is_empty());
    let users = sessionize_log(&g.log, 60.0);
    let r = evaluate_recovery(&g.truth, &cfg.run_id(), &users, None, None).unwrap();
    assert!(r.boundary_recall >= 0.95 && r.boundary_precision >= 0.95, "{r:?}");
    assert_eq!(r.planted_recovered, r.planted_occurrences);
}

#[test]
fn invalid_configs_are_rejected() {
    let catalog = CategoryCatalog::default();
    for cfg in [
        GenConfig { n_users: 0, ..GenConfig::default() },
        GenConfig { n_days: 0, ..GenConfig::default() },
        GenConfig { self_transition: 1.5, ..GenConfig::default() },
    ] {
        assert!(matches!(generate_log(&cfg, &catalog), Err(GenError::Config(_))));
    }
}
