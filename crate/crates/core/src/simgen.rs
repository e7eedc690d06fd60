//! Synthetic app-use logs with known session boundaries and planted patterns.
//!
//! Each user gets an independent ChaCha8 stream seeded with
//! `splitmix64(seed ^ splitmix64(user_index + 1))`, so generation is
//! reproducible and order-independent across threads.
//!
//! Within-session gaps are lognormal; between-session gaps are Pareto and
//! stretched by the inverse of the circadian intensity at the time they
//! start. Session sizes are balanced so each user has exactly as many
//! within-session gaps as between-session gaps; with non-overlapping
//! populations the median gap then falls between them.

use std::collections::BTreeMap;

use chrono::{FixedOffset, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{
    AgeGroup, AppEvent, Category, CategoryCatalog, Education, EventLog, Gender, Occupation,
    ProfileTable, UserProfile,
};
use crate::patterns::{Bucket, CanonicalForm, PatternCatalog};
use crate::sessionizer::UserSessions;
use crate::trajectory::Timespan;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("gap populations overlap: only {separated} of {users} users separable after {attempts} attempts")]
    Overlap {
        separated: usize,
        users: usize,
        attempts: usize,
    },
    #[error("ground truth belongs to run {expected}, outputs to run {found}")]
    RunMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTemplate {
    pub spells: Vec<(String, Bucket)>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_days: u32,
    pub start_date: NaiveDate,
    pub tz_offset_secs: i32,
    pub repertoire_mean: f64,
    pub repertoire_sd: f64,
    /// Row-stochastic category transition matrix; `None` uses
    /// `self_transition` on the diagonal and spreads the rest evenly.
    pub transition: Option<Vec<Vec<f64>>>,
    pub self_transition: f64,
    pub within_gap_median_secs: f64,
    pub within_gap_sigma: f64,
    pub between_gap_median_secs: f64,
    pub between_gap_alpha: f64,
    pub event_duration_median_secs: f64,
    pub event_duration_sigma: f64,
    pub light_median_secs: f64,
    pub heavy_median_secs: f64,
    pub template_duration_sigma: f64,
    pub p_solo_once: f64,
    pub p_solo_repeated: f64,
    pub templates: Vec<PlantedTemplate>,
    /// Relative session-start rate per timespan (small..evening).
    pub circadian: [f64; 5],
    /// Log-scale spread of per-user activity.
    pub user_intensity_sd: f64,
    /// Activity multiplier per age group (18-20..51-64).
    pub age_intensity: [f64; 5],
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        let t = |spells: &[(&str, Bucket)], p: f64| PlantedTemplate {
            spells: spells.iter().map(|(c, b)| (c.to_string(), *b)).collect(),
            probability: p,
        };
        Self {
            seed: 42,
            n_users: 100,
            n_days: 14,
            start_date: NaiveDate::from_ymd_opt(2016, 7, 1).expect("valid date"),
            tz_offset_secs: 8 * 3600,
            repertoire_mean: 15.0,
            repertoire_sd: 2.0,
            transition: None,
            self_transition: 0.25,
            within_gap_median_secs: 8.0,
            within_gap_sigma: 0.6,
            between_gap_median_secs: 600.0,
            between_gap_alpha: 1.2,
            event_duration_median_secs: 40.0,
            event_duration_sigma: 1.0,
            light_median_secs: 12.0,
            heavy_median_secs: 400.0,
            template_duration_sigma: 0.25,
            p_solo_once: 0.5,
            p_solo_repeated: 0.15,
            templates: vec![
                t(&[("Communication", Bucket::Light), ("SNS", Bucket::Heavy)], 0.1),
                t(
                    &[("Texting", Bucket::Light), ("Games", Bucket::Heavy), ("Texting", Bucket::Light)],
                    0.1,
                ),
                t(&[("Web", Bucket::Light), ("Video", Bucket::Heavy)], 0.1),
            ],
            circadian: [0.2, 1.0, 1.4, 1.0, 0.7],
            user_intensity_sd: 0.15,
            age_intensity: [1.15, 1.1, 1.0, 0.9, 0.85],
            max_retries: 3,
        }
    }
}

impl GenConfig {
    /// 100 users over 14 days with three templates sharing probability 0.3.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    fn validate(&self, catalog: &CategoryCatalog) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.n_users == 0 || self.n_days == 0 {
            return bad("n_users and n_days must be positive");
        }
        let probs = [self.p_solo_once, self.p_solo_repeated, self.self_transition];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p_solo_once + self.p_solo_repeated > 1.0 {
            return bad("session-kind probabilities must lie in [0, 1] and sum to at most 1");
        }
        let total: f64 = self.templates.iter().map(|t| t.probability).sum();
        if self.templates.iter().any(|t| !(0.0..=1.0).contains(&t.probability)) || total > 1.0 + 1e-12 {
            return bad("template probabilities must lie in [0, 1] and sum to at most 1");
        }
        for t in &self.templates {
            if t.spells.len() < 2 {
                return bad("templates need at least two spells");
            }
            for w in t.spells.windows(2) {
                if w[0].0 == w[1].0 {
                    return bad("adjacent template spells must differ in category");
                }
            }
            if t.spells.iter().any(|(c, _)| catalog.parse(c).is_none()) {
                return bad("template uses an unknown category");
            }
        }
        let positive = [
            self.within_gap_median_secs,
            self.between_gap_median_secs,
            self.between_gap_alpha,
            self.event_duration_median_secs,
            self.light_median_secs,
            self.heavy_median_secs,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("gap and duration parameters must be positive");
        }
        if self.circadian.iter().any(|v| !(*v > 0.0)) || self.age_intensity.iter().any(|v| !(*v > 0.0)) {
            return bad("intensities must be positive");
        }
        if let Some(m) = &self.transition {
            if m.len() != catalog.len() || m.iter().any(|r| r.len() != catalog.len()) {
                return bad("transition matrix must be square over the catalog");
            }
            for row in m {
                if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("transition rows must be probabilities summing to 1");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOccurrence {
    pub user_id: String,
    pub session: usize,
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    /// Event indices that start a new session (excluding 0).
    pub boundaries: Vec<usize>,
    pub n_events: usize,
    pub intensity: f64,
    pub repertoire: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub run_id: String,
    pub attempts: usize,
    pub separation: f64,
    pub users: BTreeMap<String, UserTruth>,
    pub planted: Vec<PlantedOccurrence>,
    pub templates: Vec<CanonicalForm>,
    pub circadian: [f64; 5],
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn user_seed(seed: u64, user_index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(user_index as u64 + 1))
}

#[derive(Debug, Clone)]
struct DraftSession {
    events: Vec<(Category, f64)>,
    /// Idle seconds before each event after the first.
    gaps: Vec<f64>,
    template: Option<usize>,
}

impl DraftSession {
    fn within(&self) -> usize {
        self.events.len() - 1
    }
}

struct UserDraft {
    events: Vec<AppEvent>,
    truth: UserTruth,
    planted: Vec<(usize, usize)>,
    profile: UserProfile,
    separated: bool,
}

struct Sampler<'a> {
    cfg: &'a GenConfig,
    within: LogNormal<f64>,
    event_dur: LogNormal<f64>,
    light: LogNormal<f64>,
    heavy: LogNormal<f64>,
    templates: Vec<Vec<(Category, Bucket)>>,
    transition: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(cfg: &'a GenConfig, catalog: &CategoryCatalog, separation: f64) -> Self {
        let ln = |median: f64, sigma: f64| LogNormal::new(median.ln(), sigma).expect("valid lognormal");
        let n = catalog.len();
        let transition = cfg.transition.clone().unwrap_or_else(|| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if i == j {
                                cfg.self_transition
                            } else {
                                (1.0 - cfg.self_transition) / (n - 1).max(1) as f64
                            }
                        })
                        .collect()
                })
                .collect()
        });
        Self {
            cfg,
            within: ln(cfg.within_gap_median_secs / separation, cfg.within_gap_sigma),
            event_dur: ln(cfg.event_duration_median_secs, cfg.event_duration_sigma),
            light: ln(cfg.light_median_secs, cfg.template_duration_sigma),
            heavy: ln(cfg.heavy_median_secs, cfg.template_duration_sigma),
            templates: cfg
                .templates
                .iter()
                .map(|t| {
                    t.spells
                        .iter()
                        .map(|(c, b)| (catalog.parse(c).expect("validated"), *b))
                        .collect()
                })
                .collect(),
            transition,
        }
    }

    fn duration(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.event_dur.sample(rng).clamp(1.0, 1800.0)
    }

    fn gap(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.within.sample(rng).max(0.001)
    }

    /// Next category within the repertoire following the transition rows.
    fn next_category(&self, rng: &mut ChaCha8Rng, from: Category, repertoire: &[Category]) -> Category {
        let row = &self.transition[from.index()];
        let total: f64 = repertoire.iter().map(|c| row[c.index()]).sum();
        if total <= 0.0 {
            return *repertoire.choose(rng).expect("non-empty repertoire");
        }
        let mut u = rng.random::<f64>() * total;
        for &c in repertoire {
            u -= row[c.index()];
            if u < 0.0 {
                return c;
            }
        }
        *repertoire.last().expect("non-empty")
    }

    fn template_session(&self, rng: &mut ChaCha8Rng, t: usize) -> DraftSession {
        let events: Vec<(Category, f64)> = self.templates[t]
            .iter()
            .map(|&(c, b)| {
                let d = match b {
                    Bucket::Light => self.light.sample(rng),
                    Bucket::Heavy => self.heavy.sample(rng),
                };
                (c, d.max(1.0))
            })
            .collect();
        let gaps = (1..events.len()).map(|_| self.gap(rng)).collect();
        DraftSession {
            events,
            gaps,
            template: Some(t),
        }
    }

    /// `u` is the kind draw: solo-once, solo-repeated, then multi-app.
    fn random_session(&self, rng: &mut ChaCha8Rng, u: f64, repertoire: &[Category]) -> DraftSession {
        let first = *repertoire.choose(rng).expect("non-empty");
        let mut cats = vec![first];
        if u < self.cfg.p_solo_once {
        } else if u < self.cfg.p_solo_once + self.cfg.p_solo_repeated {
            let n = rng.random_range(2..=3);
            cats.resize(n, first);
        } else {
            let n = rng.random_range(2..=5);
            while cats.len() < n {
                let prev = *cats.last().expect("non-empty");
                cats.push(self.next_category(rng, prev, repertoire));
            }
            if cats.iter().all(|&c| c == first) {
                let others: Vec<Category> = repertoire.iter().copied().filter(|&c| c != first).collect();
                if let Some(&c) = others.choose(rng) {
                    *cats.last_mut().expect("non-empty") = c;
                }
            }
        }
        let events = cats.into_iter().map(|c| (c, self.duration(rng))).collect::<Vec<_>>();
        let gaps = (1..events.len()).map(|_| self.gap(rng)).collect();
        DraftSession {
            events,
            gaps,
            template: None,
        }
    }

    fn draft_session(&self, rng: &mut ChaCha8Rng, repertoire: &[Category]) -> DraftSession {
        // templates replace a share of the multi-app sessions
        let u: f64 = rng.random();
        if u >= self.cfg.p_solo_once + self.cfg.p_solo_repeated {
            let v: f64 = rng.random();
            let mut acc = 0.0;
            for (t, tpl) in self.cfg.templates.iter().enumerate() {
                acc += tpl.probability;
                if v < acc {
                    return self.template_session(rng, t);
                }
            }
        }
        self.random_session(rng, u, repertoire)
    }
}

fn sample_pareto(rng: &mut ChaCha8Rng, median: f64, alpha: f64) -> f64 {
    let scale = median / 2f64.powf(1.0 / alpha);
    let u: f64 = 1.0 - rng.random::<f64>();
    scale * u.powf(-1.0 / alpha)
}

/// Moves the within-session gap count toward `target` by resizing
/// non-template sessions.
fn balance(sessions: &mut [DraftSession], target: usize, sampler: &Sampler, rng: &mut ChaCha8Rng, repertoire: &[Category]) {
    let mut order: Vec<usize> = (0..sessions.len()).filter(|&i| sessions[i].template.is_none()).collect();
    order.shuffle(rng);
    let mut within: usize = sessions.iter().map(DraftSession::within).sum();
    loop {
        let before = within;
        for &i in &order {
            if within == target {
                return;
            }
            let s = &mut sessions[i];
            if within > target && s.events.len() >= 2 {
                let distinct_before = s.events.iter().any(|e| e.0 != s.events[0].0);
                s.events.pop();
                s.gaps.pop();
                let distinct_after = s.events.iter().any(|e| e.0 != s.events[0].0);
                if distinct_before && !distinct_after && s.events.len() >= 2 {
                    // keep multi-app sessions multi
                    let c = s.events[0].0;
                    if let Some(&o) = repertoire.iter().find(|&&o| o != c) {
                        s.events.last_mut().expect("len >= 2").0 = o;
                    }
                }
                within -= 1;
            } else if within < target && s.events.len() < 6 {
                let last = s.events.last().expect("non-empty").0;
                let solo = s.events.iter().all(|e| e.0 == last);
                let c = if solo { last } else { sampler.next_category(rng, last, repertoire) };
                let d = sampler.duration(rng);
                s.events.push((c, d));
                s.gaps.push(sampler.gap(rng));
                within += 1;
            }
        }
        if within == before {
            return;
        }
    }
}

fn gen_user(
    cfg: &GenConfig,
    catalog: &CategoryCatalog,
    sampler: &Sampler,
    index: usize,
    separation: f64,
) -> UserDraft {
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(cfg.seed, index));
    let user_id = format!("u{index:04}");
    let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n);
    let profile = UserProfile {
        user_id: user_id.clone(),
        gender: Gender::ALL[pick(&mut rng, Gender::ALL.len())],
        age_group: AgeGroup::ALL[pick(&mut rng, AgeGroup::ALL.len())],
        education: Education::ALL[pick(&mut rng, Education::ALL.len())],
        occupation: Occupation::ALL[pick(&mut rng, Occupation::ALL.len())],
    };
    let age_idx = AgeGroup::ALL.iter().position(|&a| a == profile.age_group).expect("closed");
    let noise = Normal::new(0.0, cfg.user_intensity_sd.max(0.0)).expect("valid normal");
    let intensity = cfg.age_intensity[age_idx] * noise.sample(&mut rng).exp();

    let n_cat = catalog.len();
    let size = Normal::new(cfg.repertoire_mean, cfg.repertoire_sd.max(0.0))
        .expect("valid normal")
        .sample(&mut rng)
        .round()
        .clamp(2.0_f64.min(n_cat as f64), n_cat as f64) as usize;
    let mut all: Vec<Category> = catalog.iter().collect();
    all.shuffle(&mut rng);
    let mut repertoire: Vec<Category> = all[..size].to_vec();
    repertoire.sort();

    let tz = cfg.tz_offset_secs as i64 * 1000;
    let day0 = (cfg.start_date - NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")).num_days() * 86_400_000;
    let window_start = day0 - tz;
    let window_end = window_start + cfg.n_days as i64 * 86_400_000;
    let intensity_at = |ms: f64| -> f64 {
        let local = ms as i64 + tz;
        let sec = (local.rem_euclid(86_400_000) / 1000) as u32;
        cfg.circadian[Timespan::of_second(sec) as usize] * intensity
    };

    // structure pass: count sessions with provisional durations
    let mut drafts = Vec::new();
    let mut pareto_draws = Vec::new();
    let first_draw = sample_pareto(&mut rng, cfg.between_gap_median_secs, cfg.between_gap_alpha);
    let mut t = window_start as f64 + first_draw * 1000.0 / intensity_at(window_start as f64);
    while t < window_end as f64 {
        let d = sampler.draft_session(&mut rng, &repertoire);
        let span: f64 = d.events.iter().map(|e| e.1).sum::<f64>() + d.gaps.iter().sum::<f64>();
        drafts.push(d);
        let end = t + span * 1000.0;
        let g = sample_pareto(&mut rng, cfg.between_gap_median_secs, cfg.between_gap_alpha) * separation;
        pareto_draws.push(g);
        t = end + g * 1000.0 / intensity_at(end);
    }
    if drafts.is_empty() {
        drafts.push(sampler.draft_session(&mut rng, &repertoire));
        pareto_draws.push(0.0);
    }
    let target = drafts.len() - 1;
    balance(&mut drafts, target, sampler, &mut rng, &repertoire);

    // layout pass
    let mut events = Vec::new();
    let mut boundaries = Vec::new();
    let mut planted = Vec::new();
    let mut within_gaps_ms = Vec::new();
    let mut between_gaps_ms = Vec::new();
    let mut t_ms = (window_start as f64 + first_draw * 1000.0 / intensity_at(window_start as f64)).round() as i64;
    for (si, d) in drafts.iter().enumerate() {
        if si > 0 {
            boundaries.push(events.len());
        }
        if let Some(tpl) = d.template {
            planted.push((si, tpl));
        }
        for (ei, &(c, dur)) in d.events.iter().enumerate() {
            if ei > 0 {
                let g = ((d.gaps[ei - 1] * 1000.0).round() as i64).max(1);
                within_gaps_ms.push(g);
                t_ms += g;
            }
            let dur_ms = ((dur * 1000.0).round() as i64).max(1);
            events.push(AppEvent::new(c, t_ms, t_ms + dur_ms));
            t_ms += dur_ms;
        }
        if si + 1 < drafts.len() {
            let g = ((pareto_draws[si] * 1000.0 / intensity_at(t_ms as f64)).round() as i64).max(1);
            between_gaps_ms.push(g);
            t_ms += g;
        }
    }
    let separated = match (within_gaps_ms.iter().max(), between_gaps_ms.iter().min()) {
        (Some(w), Some(b)) => w < b,
        _ => true,
    };
    UserDraft {
        truth: UserTruth {
            boundaries,
            n_events: events.len(),
            intensity,
            repertoire: repertoire.iter().map(|&c| catalog.name(c).to_string()).collect(),
        },
        events,
        planted,
        profile,
        separated,
    }
}

pub struct Generated {
    pub log: EventLog,
    pub profiles: ProfileTable,
    pub truth: GroundTruth,
}

/// Generates a log, retrying with wider gap separation when fewer than 90%
/// of users have a median gap that separates the two gap populations.
pub fn generate_log(cfg: &GenConfig, catalog: &CategoryCatalog) -> Result<Generated, GenError> {
    cfg.validate(catalog)?;
    let mut separation = 1.0;
    let mut last = (0, 0);
    for attempt in 1..=cfg.max_retries + 1 {
        let sampler = Sampler::new(cfg, catalog, separation);
        let drafts: Vec<UserDraft> = (0..cfg.n_users)
            .into_par_iter()
            .map(|i| gen_user(cfg, catalog, &sampler, i, separation))
            .collect();
        let separated = drafts.iter().filter(|d| d.separated).count();
        last = (separated, drafts.len());
        if separated * 10 >= drafts.len() * 9 {
            let mut users = BTreeMap::new();
            let mut truth_users = BTreeMap::new();
            let mut planted = Vec::new();
            let mut profiles = Vec::new();
            for d in drafts {
                let id = d.profile.user_id.clone();
                planted.extend(d.planted.iter().map(|&(session, template)| PlantedOccurrence {
                    user_id: id.clone(),
                    session,
                    template,
                }));
                users.insert(id.clone(), d.events);
                truth_users.insert(id, d.truth);
                profiles.push(d.profile);
            }
            let templates = sampler
                .templates
                .iter()
                .map(|t| {
                    let mut form: CanonicalForm = Vec::new();
                    for &e in t {
                        if form.last() != Some(&e) {
                            form.push(e);
                        }
                    }
                    form
                })
                .collect();
            return Ok(Generated {
                log: EventLog::from_users(catalog.clone(), users),
                profiles: ProfileTable::from_profiles(profiles),
                truth: GroundTruth {
                    run_id: cfg.run_id(),
                    attempts: attempt,
                    separation,
                    users: truth_users,
                    planted,
                    templates,
                    circadian: cfg.circadian,
                },
            });
        }
        separation *= 2.0;
    }
    Err(GenError::Overlap {
        separated: last.0,
        users: last.1,
        attempts: cfg.max_retries + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecovery {
    pub template: usize,
    pub canonical: String,
    /// 1-based catalog rank, `None` when not found.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmRecovery {
    pub timespan_means: Vec<f64>,
    /// Spearman correlation between fitted timespan means and the
    /// configured circadian intensities.
    pub circadian_rank_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub run_id: String,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub true_boundaries: usize,
    pub detected_boundaries: usize,
    pub planted_occurrences: usize,
    /// Detected sessions spanning exactly one planted session.
    pub planted_recovered: usize,
    pub templates: Vec<TemplateRecovery>,
    pub lmm: Option<LmmRecovery>,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    crate::descriptives::pearson(&ranks(a), &ranks(b))
}

/// Compares pipeline outputs with the ground truth of the run `run_id`.
pub fn evaluate_recovery(
    truth: &GroundTruth,
    run_id: &str,
    sessions: &[UserSessions],
    catalog: Option<(&PatternCatalog, &CategoryCatalog)>,
    timespan_means: Option<&[f64]>,
) -> Result<RecoveryReport, GenError> {
    if truth.run_id != run_id {
        return Err(GenError::RunMismatch {
            expected: truth.run_id.clone(),
            found: run_id.to_string(),
        });
    }
    let (mut tp, mut n_true, mut n_detected) = (0usize, 0usize, 0usize);
    let mut recovered = 0usize;
    for u in sessions {
        let Some(t) = truth.users.get(&u.user_id) else {
            continue;
        };
        let mut detected = Vec::with_capacity(u.sessions.len());
        let mut spans = std::collections::HashSet::new();
        let mut idx = 0;
        for s in &u.sessions {
            if idx > 0 {
                detected.push(idx);
            }
            spans.insert((idx, s.n_events()));
            idx += s.n_events();
        }
        let truth_set: std::collections::HashSet<usize> = t.boundaries.iter().copied().collect();
        tp += detected.iter().filter(|b| truth_set.contains(b)).count();
        n_true += t.boundaries.len();
        n_detected += detected.len();
        // true session spans for planted occurrences of this user
        let mut starts = vec![0];
        starts.extend(t.boundaries.iter().copied());
        starts.push(t.n_events);
        for p in truth.planted.iter().filter(|p| p.user_id == u.user_id) {
            let span = (starts[p.session], starts[p.session + 1] - starts[p.session]);
            if spans.contains(&span) {
                recovered += 1;
            }
        }
    }
    let templates = match catalog {
        Some((pc, cat)) => truth
            .templates
            .iter()
            .enumerate()
            .map(|(i, form)| TemplateRecovery {
                template: i,
                canonical: crate::patterns::canonical_string(form, cat),
                rank: pc.rank_of(form),
            })
            .collect(),
        None => Vec::new(),
    };
    let lmm = timespan_means.map(|m| LmmRecovery {
        timespan_means: m.to_vec(),
        circadian_rank_correlation: spearman(m, &truth.circadian).unwrap_or(0.0),
    });
    Ok(RecoveryReport {
        run_id: run_id.to_string(),
        boundary_precision: if n_detected > 0 { tp as f64 / n_detected as f64 } else { 1.0 },
        boundary_recall: if n_true > 0 { tp as f64 / n_true as f64 } else { 1.0 },
        true_boundaries: n_true,
        detected_boundaries: n_detected,
        planted_occurrences: truth.planted.len(),
        planted_recovered: recovered,
        templates,
        lmm,
    })
}

pub fn tz_offset(cfg: &GenConfig) -> FixedOffset {
    FixedOffset::east_opt(cfg.tz_offset_secs).expect("valid offset")
}
