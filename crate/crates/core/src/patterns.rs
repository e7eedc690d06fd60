//! Cross-user pattern catalog built from pooled per-user medoid sessions.
//!
//! Medoids from different users are merged when their canonical forms agree:
//! the state sequence with each spell bucketed as light or heavy use around a
//! global duration split.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Category, CategoryCatalog, ProfileTable, UserProfile};
use crate::spellseq::SpellSequence;

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("unknown attribute `{0}` (expected gender, age_group, education or occupation)")]
    UnknownAttribute(String),
    #[error("duration split must be > 0, got {0}")]
    InvalidSplit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Light,
    Heavy,
}

impl Bucket {
    pub fn label(self) -> &'static str {
        match self {
            Bucket::Light => "light",
            Bucket::Heavy => "heavy",
        }
    }
}

pub type CanonicalForm = Vec<(Category, Bucket)>;

pub fn canonical_string(form: &[(Category, Bucket)], catalog: &CategoryCatalog) -> String {
    form.iter()
        .map(|(c, b)| format!("{}:{}", catalog.name(*c), b.label()))
        .collect::<Vec<_>>()
        .join(">")
}

/// Buckets each spell (`< split` is light) and merges equal neighbours.
pub fn canonicalize_pattern(seq: &SpellSequence, split_secs: f64) -> Result<CanonicalForm, PatternError> {
    if !(split_secs > 0.0) {
        return Err(PatternError::InvalidSplit(split_secs));
    }
    let mut out: CanonicalForm = Vec::with_capacity(seq.len());
    for s in &seq.spells {
        let b = if s.duration_secs < split_secs {
            Bucket::Light
        } else {
            Bucket::Heavy
        };
        if out.last() != Some(&(s.state, b)) {
            out.push((s.state, b));
        }
    }
    Ok(out)
}

/// Median spell duration over a set of sequences.
pub fn median_spell_duration<'a, I>(sequences: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a SpellSequence>,
{
    let durations: Vec<f64> = sequences
        .into_iter()
        .flat_map(|s| s.spells.iter().map(|sp| sp.duration_secs))
        .collect();
    crate::sessionizer::median(&durations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub user_id: String,
    pub sequence: SpellSequence,
    /// Number of sessions the medoid's cluster represents.
    pub weight: f64,
}

/// Per-user medoid sequences with the weight of their cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMedoids {
    pub user_id: String,
    pub medoids: Vec<(SpellSequence, f64)>,
}

pub fn pool_medoids(per_user: &[UserMedoids]) -> Vec<PoolEntry> {
    per_user
        .iter()
        .flat_map(|u| {
            u.medoids.iter().map(move |(seq, w)| PoolEntry {
                user_id: u.user_id.clone(),
                sequence: seq.clone(),
                weight: *w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedoidPattern {
    pub canonical: CanonicalForm,
    pub label: String,
    pub exemplar: SpellSequence,
    pub weight: f64,
    pub contributing_users: usize,
    pub share: f64,
    pub cum_share: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatternCatalog {
    pub patterns: Vec<MedoidPattern>,
    pub total_weight: f64,
    pub split_secs: f64,
    /// Smallest N whose cumulative share reaches one half.
    pub n_at_half: usize,
}

impl PatternCatalog {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// 1-based rank of a canonical form.
    pub fn rank_of(&self, form: &[(Category, Bucket)]) -> Option<usize> {
        self.patterns
            .iter()
            .position(|p| p.canonical == form)
            .map(|i| i + 1)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "canonical", "weight", "share", "cum_share", "users"])?;
        for (i, p) in self.patterns.iter().enumerate() {
            w.write_record([
                &(i + 1).to_string(),
                p.label.as_str(),
                &p.weight.to_string(),
                &p.share.to_string(),
                &p.cum_share.to_string(),
                &p.contributing_users.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cmp_sequence(a: &SpellSequence, b: &SpellSequence) -> Ordering {
    let ka = a.spells.iter().map(|s| (s.state, s.duration_secs));
    let kb = b.spells.iter().map(|s| (s.state, s.duration_secs));
    ka.partial_cmp(kb).unwrap_or(Ordering::Equal)
}

/// Merges pool entries by canonical form and ranks by total weight.
pub fn rank_patterns(
    pool: &[PoolEntry],
    split_secs: f64,
    catalog: &CategoryCatalog,
) -> Result<PatternCatalog, PatternError> {
    struct Acc<'a> {
        weight: f64,
        users: BTreeSet<&'a str>,
        exemplar: &'a PoolEntry,
    }
    let mut groups: HashMap<CanonicalForm, Acc> = HashMap::new();
    for entry in pool {
        let form = canonicalize_pattern(&entry.sequence, split_secs)?;
        let acc = groups.entry(form).or_insert_with(|| Acc {
            weight: 0.0,
            users: BTreeSet::new(),
            exemplar: entry,
        });
        acc.users.insert(entry.user_id.as_str());
        // highest weight wins; then user id, then sequence, for order independence
        let cur = acc.exemplar;
        let better = entry
            .weight
            .total_cmp(&cur.weight)
            .then_with(|| cur.user_id.cmp(&entry.user_id))
            .then_with(|| cmp_sequence(&cur.sequence, &entry.sequence))
            == Ordering::Greater;
        if better {
            acc.exemplar = entry;
        }
    }
    // weights summed in a canonical order so totals do not depend on input order
    let mut sorted_pool: Vec<&PoolEntry> = pool.iter().collect();
    sorted_pool.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then_with(|| a.weight.total_cmp(&b.weight))
            .then_with(|| cmp_sequence(&a.sequence, &b.sequence))
    });
    for entry in sorted_pool {
        let form = canonicalize_pattern(&entry.sequence, split_secs)?;
        groups.get_mut(&form).expect("grouped above").weight += entry.weight;
    }
    let mut patterns: Vec<MedoidPattern> = groups
        .into_iter()
        .map(|(canonical, acc)| MedoidPattern {
            label: canonical_string(&canonical, catalog),
            canonical,
            exemplar: acc.exemplar.sequence.clone(),
            weight: acc.weight,
            contributing_users: acc.users.len(),
            share: 0.0,
            cum_share: 0.0,
        })
        .collect();
    patterns.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.label.cmp(&b.label)));
    let total: f64 = patterns.iter().map(|p| p.weight).sum();
    let mut cum = 0.0;
    let mut n_at_half = 0;
    for (i, p) in patterns.iter_mut().enumerate() {
        p.share = if total > 0.0 { p.weight / total } else { 0.0 };
        cum += p.weight;
        p.cum_share = if total > 0.0 { cum / total } else { 0.0 };
        if n_at_half == 0 && p.cum_share >= 0.5 - 1e-12 {
            n_at_half = i + 1;
        }
    }
    if let Some(last) = patterns.last_mut() {
        last.cum_share = 1.0;
    }
    Ok(PatternCatalog {
        patterns,
        total_weight: total,
        split_secs,
        n_at_half,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    AgeGroup,
    Education,
    Occupation,
}

impl Attribute {
    pub fn parse(s: &str) -> Result<Self, PatternError> {
        match s {
            "gender" => Ok(Self::Gender),
            "age_group" => Ok(Self::AgeGroup),
            "education" => Ok(Self::Education),
            "occupation" => Ok(Self::Occupation),
            other => Err(PatternError::UnknownAttribute(other.to_string())),
        }
    }

    pub fn levels(self) -> Vec<&'static str> {
        use crate::ingest::{AgeGroup, Education, Gender, Occupation};
        match self {
            Attribute::Gender => Gender::ALL.iter().map(|l| l.label()).collect(),
            Attribute::AgeGroup => AgeGroup::ALL.iter().map(|l| l.label()).collect(),
            Attribute::Education => Education::ALL.iter().map(|l| l.label()).collect(),
            Attribute::Occupation => Occupation::ALL.iter().map(|l| l.label()).collect(),
        }
    }

    pub fn level_of(self, p: &UserProfile) -> &'static str {
        match self {
            Attribute::Gender => p.gender.label(),
            Attribute::AgeGroup => p.age_group.label(),
            Attribute::Education => p.education.label(),
            Attribute::Occupation => p.occupation.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupCatalogs {
    pub attribute: Attribute,
    pub by_level: BTreeMap<String, PatternCatalog>,
    pub excluded_users: Vec<String>,
}

/// Ranks patterns separately within each level of a demographic attribute.
pub fn subgroup_breakdown(
    pool: &[PoolEntry],
    profiles: &ProfileTable,
    attribute: Attribute,
    split_secs: f64,
    catalog: &CategoryCatalog,
) -> Result<SubgroupCatalogs, PatternError> {
    let mut parts: BTreeMap<String, Vec<PoolEntry>> = attribute
        .levels()
        .into_iter()
        .map(|l| (l.to_string(), Vec::new()))
        .collect();
    let mut excluded = BTreeSet::new();
    for e in pool {
        match profiles.get(&e.user_id) {
            Some(p) => parts
                .get_mut(attribute.level_of(p))
                .expect("all levels present")
                .push(e.clone()),
            None => {
                excluded.insert(e.user_id.clone());
            }
        }
    }
    let mut by_level = BTreeMap::new();
    for (level, entries) in parts {
        let cat = if entries.is_empty() {
            PatternCatalog {
                split_secs,
                ..Default::default()
            }
        } else {
            rank_patterns(&entries, split_secs, catalog)?
        };
        by_level.insert(level, cat);
    }
    Ok(SubgroupCatalogs {
        attribute,
        by_level,
        excluded_users: excluded.into_iter().collect(),
    })
}
