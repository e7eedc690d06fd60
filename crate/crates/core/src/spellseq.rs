//! Spell sequences and optimal matching of spells.
//!
//! A spell is a maximal run of one category inside a session, carrying the
//! summed in-app time of the run. Distances are edit distances over spells:
//! aligning two spells costs the state substitution plus a duration-mismatch
//! term, and inserting or deleting a spell costs the indel plus a term that
//! grows with the spell's length beyond one duration unit.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Category;
use crate::sessionizer::Session;

/// Smallest spell duration in seconds; zero-length spells are raised to it.
pub const MIN_SPELL_SECS: f64 = 1.0;

/// Matrices up to this size are exported as CSV, larger ones as binary.
pub const CSV_EXPORT_LIMIT: usize = 2_000;

#[derive(Debug, Error)]
pub enum SpellError {
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt matrix file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spell {
    pub state: Category,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpellSequence {
    pub spells: Vec<Spell>,
}

impl SpellSequence {
    pub fn new(spells: Vec<Spell>) -> Self {
        Self { spells }
    }

    /// Shorthand for tests and fixtures: `(state index, seconds)` pairs.
    pub fn from_pairs(pairs: &[(u16, f64)]) -> Self {
        Self {
            spells: pairs
                .iter()
                .map(|&(s, d)| Spell {
                    state: Category(s),
                    duration_secs: d,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.spells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spells.is_empty()
    }

    pub fn total_secs(&self) -> f64 {
        self.spells.iter().map(|s| s.duration_secs).sum()
    }

    /// Bitwise identity key used for deduplication.
    fn key(&self) -> Vec<(u16, u64)> {
        self.spells
            .iter()
            .map(|s| (s.state.0, s.duration_secs.to_bits()))
            .collect()
    }
}

/// Merges consecutive same-category events into spells.
pub fn to_spell_sequence(session: &Session) -> SpellSequence {
    let mut spells: Vec<Spell> = Vec::new();
    for ev in &session.events {
        let d = ev.duration_secs();
        match spells.last_mut() {
            Some(last) if last.state == ev.category => last.duration_secs += d,
            _ => spells.push(Spell {
                state: ev.category,
                duration_secs: d,
            }),
        }
    }
    for s in &mut spells {
        if s.duration_secs < MIN_SPELL_SECS {
            s.duration_secs = MIN_SPELL_SECS;
        }
    }
    SpellSequence { spells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    #[default]
    None,
    /// Divide by the cost of deleting `a` and inserting `b` entirely.
    Max,
}

impl std::str::FromStr for Normalize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    n_states: usize,
    substitution: Vec<f64>,
    pub indel: f64,
    /// Cost per duration unit of mismatch.
    pub expansion: f64,
    /// Seconds per duration unit.
    pub duration_unit: f64,
    pub normalize: Normalize,
}

impl CostModel {
    /// Constant off-diagonal substitution cost over `n_states` states.
    pub fn constant(
        n_states: usize,
        substitution: f64,
        indel: f64,
        expansion: f64,
        duration_unit: f64,
    ) -> Result<Self, SpellError> {
        let mut sub = vec![substitution; n_states * n_states];
        for i in 0..n_states {
            sub[i * n_states + i] = 0.0;
        }
        Self::with_matrix(n_states, sub, indel, expansion, duration_unit)
    }

    pub fn with_matrix(
        n_states: usize,
        substitution: Vec<f64>,
        indel: f64,
        expansion: f64,
        duration_unit: f64,
    ) -> Result<Self, SpellError> {
        if substitution.len() != n_states * n_states {
            return Err(SpellError::InvalidCost(format!(
                "substitution matrix has {} entries, expected {}",
                substitution.len(),
                n_states * n_states
            )));
        }
        for i in 0..n_states {
            if substitution[i * n_states + i] != 0.0 {
                return Err(SpellError::InvalidCost(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n_states {
                let v = substitution[i * n_states + j];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(SpellError::InvalidCost(format!("bad cost at ({i},{j})")));
                }
                if v != substitution[j * n_states + i] {
                    return Err(SpellError::InvalidCost(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        if !(indel >= 0.0 && indel.is_finite()) || !(expansion >= 0.0 && expansion.is_finite()) {
            return Err(SpellError::InvalidCost("indel and expansion must be >= 0".into()));
        }
        if !(duration_unit > 0.0 && duration_unit.is_finite()) {
            return Err(SpellError::InvalidCost("duration unit must be > 0".into()));
        }
        Ok(Self {
            n_states,
            substitution,
            indel,
            expansion,
            duration_unit,
            normalize: Normalize::None,
        })
    }

    pub fn with_normalize(mut self, normalize: Normalize) -> Self {
        self.normalize = normalize;
        self
    }

    /// Defaults: substitution 2, indel 1, expansion 0.5 per minute.
    pub fn default_for(n_states: usize) -> Self {
        Self::constant(n_states, 2.0, 1.0, 0.5, 60.0).expect("default costs are valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn substitution(&self, a: Category, b: Category) -> f64 {
        self.substitution[a.index() * self.n_states + b.index()]
    }

    pub fn units(&self, secs: f64) -> f64 {
        secs / self.duration_unit
    }

    /// Cost of inserting or deleting a spell of `units` duration units.
    /// The duration term is floored at zero for sub-unit spells.
    pub fn indel_cost(&self, units: f64) -> f64 {
        self.indel + self.expansion * (units - 1.0).max(0.0)
    }

    pub fn align_cost(&self, a: Category, da: f64, b: Category, db: f64) -> f64 {
        self.substitution(a, b) + self.expansion * (da - db).abs()
    }
}

struct Prepared {
    states: Vec<Category>,
    units: Vec<f64>,
    indel: Vec<f64>,
    total_indel: f64,
}

impl Prepared {
    fn new(seq: &SpellSequence, cost: &CostModel) -> Self {
        let states = seq.spells.iter().map(|s| s.state).collect();
        let units: Vec<f64> = seq.spells.iter().map(|s| cost.units(s.duration_secs)).collect();
        let indel: Vec<f64> = units.iter().map(|&u| cost.indel_cost(u)).collect();
        let total_indel = indel.iter().sum();
        Self {
            states,
            units,
            indel,
            total_indel,
        }
    }
}

fn dp(a: &Prepared, b: &Prepared, cost: &CostModel, row: &mut Vec<f64>) -> f64 {
    let m = b.states.len();
    row.clear();
    row.push(0.0);
    for j in 0..m {
        let v = row[j] + b.indel[j];
        row.push(v);
    }
    for i in 0..a.states.len() {
        let (sa, ua, del) = (a.states[i], a.units[i], a.indel[i]);
        let mut diag = row[0];
        row[0] += del;
        for j in 0..m {
            let align = diag + cost.align_cost(sa, ua, b.states[j], b.units[j]);
            let up = row[j + 1] + del;
            let left = row[j] + b.indel[j];
            diag = row[j + 1];
            row[j + 1] = align.min(up).min(left);
        }
    }
    let raw = row[m];
    match cost.normalize {
        Normalize::None => raw,
        Normalize::Max => {
            let denom = a.total_indel + b.total_indel;
            if denom > 0.0 {
                raw / denom
            } else {
                0.0
            }
        }
    }
}

/// Optimal-matching distance between two spell sequences.
pub fn omspell_distance(a: &SpellSequence, b: &SpellSequence, cost: &CostModel) -> f64 {
    let pa = Prepared::new(a, cost);
    let pb = Prepared::new(b, cost);
    let mut row = Vec::with_capacity(b.len() + 1);
    dp(&pa, &pb, cost, &mut row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    n: usize,
    data: Vec<f64>,
    pub weights: Vec<f64>,
    /// For each row, the original input indices it stands for.
    pub members: Vec<Vec<usize>>,
}

impl DissimilarityMatrix {
    /// Builds from a full row-major square matrix, unit weights.
    pub fn from_full(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "matrix must be n*n");
        Self {
            n,
            data,
            weights: vec![1.0; n],
            members: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// Builds from a distance function over `0..n`, filling both triangles.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self::from_full(n, data)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.n);
        self.weights = weights;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Writes CSV (n <= 2000) or binary upper triangle, plus a JSON sidecar
    /// at `<path>.json`. Returns the files written.
    pub fn export(&self, base: &Path) -> Result<Vec<PathBuf>, SpellError> {
        let binary = self.n > CSV_EXPORT_LIMIT;
        let data_path = base.with_extension(if binary { "bin" } else { "csv" });
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SpellError::Io { path, source }
        };
        let file = fs::File::create(&data_path).map_err(io_err(&data_path))?;
        let mut w = BufWriter::new(file);
        if binary {
            for i in 0..self.n {
                for j in i + 1..self.n {
                    w.write_all(&self.get(i, j).to_le_bytes())
                        .map_err(io_err(&data_path))?;
                }
            }
        } else {
            for i in 0..self.n {
                let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(",")).map_err(io_err(&data_path))?;
            }
        }
        w.flush().map_err(io_err(&data_path))?;
        let sidecar_path = base.with_extension("json");
        let sidecar = MatrixSidecar {
            n: self.n,
            format: if binary { "bin" } else { "csv" }.to_string(),
            data_file: data_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            weights: self.weights.clone(),
            members: self.members.clone(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&sidecar_path, json).map_err(io_err(&sidecar_path))?;
        Ok(vec![data_path, sidecar_path])
    }

    /// Reads a matrix written by [`export`](Self::export), given the sidecar path.
    pub fn import(sidecar_path: &Path) -> Result<Self, SpellError> {
        let corrupt = |path: &Path, reason: String| SpellError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let raw = fs::read(sidecar_path).map_err(|source| SpellError::Io {
            path: sidecar_path.to_path_buf(),
            source,
        })?;
        let side: MatrixSidecar =
            serde_json::from_slice(&raw).map_err(|e| corrupt(sidecar_path, e.to_string()))?;
        let n = side.n;
        if side.weights.len() != n || side.members.len() != n {
            return Err(corrupt(sidecar_path, "weights/members length mismatch".into()));
        }
        let data_path = sidecar_path.with_file_name(&side.data_file);
        let file = fs::File::open(&data_path).map_err(|source| SpellError::Io {
            path: data_path.clone(),
            source,
        })?;
        let mut data = vec![0.0; n * n];
        match side.format.as_str() {
            "bin" => {
                let mut bytes = Vec::new();
                BufReader::new(file)
                    .read_to_end(&mut bytes)
                    .map_err(|source| SpellError::Io {
                        path: data_path.clone(),
                        source,
                    })?;
                let expected = n * n.saturating_sub(1) / 2 * 8;
                if bytes.len() != expected {
                    return Err(corrupt(
                        &data_path,
                        format!("expected {expected} bytes, found {}", bytes.len()),
                    ));
                }
                let mut chunks = bytes.chunks_exact(8);
                for i in 0..n {
                    for j in i + 1..n {
                        let c = chunks.next().expect("length checked");
                        let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                        data[i * n + j] = v;
                        data[j * n + i] = v;
                    }
                }
            }
            "csv" => {
                let mut rows = 0;
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| SpellError::Io {
                        path: data_path.clone(),
                        source,
                    })?;
                    if i >= n {
                        return Err(corrupt(&data_path, "too many rows".into()));
                    }
                    let vals: Result<Vec<f64>, _> =
                        line.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    let vals = vals.map_err(|e| corrupt(&data_path, format!("row {i}: {e}")))?;
                    if vals.len() != n {
                        return Err(corrupt(
                            &data_path,
                            format!("row {i} has {} columns, expected {n}", vals.len()),
                        ));
                    }
                    data[i * n..(i + 1) * n].copy_from_slice(&vals);
                    rows += 1;
                }
                if rows != n {
                    return Err(corrupt(&data_path, format!("found {rows} rows, expected {n}")));
                }
            }
            other => return Err(corrupt(sidecar_path, format!("unknown format `{other}`"))),
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(corrupt(&data_path, format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = data[i * n + j];
                if !(v >= 0.0 && v.is_finite()) || v != data[j * n + i] {
                    return Err(corrupt(&data_path, format!("invalid entry at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            n,
            data,
            weights: side.weights,
            members: side.members,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    n: usize,
    format: String,
    data_file: String,
    weights: Vec<f64>,
    members: Vec<Vec<usize>>,
}

/// Pairwise distances. With `dedup`, identical sequences share one row whose
/// weight is their multiplicity.
pub fn distance_matrix(
    sequences: &[SpellSequence],
    cost: &CostModel,
    dedup: bool,
) -> DissimilarityMatrix {
    let (unique, members): (Vec<&SpellSequence>, Vec<Vec<usize>>) = if dedup {
        let mut index: HashMap<Vec<(u16, u64)>, usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, s) in sequences.iter().enumerate() {
            match index.entry(s.key()) {
                std::collections::hash_map::Entry::Occupied(e) => members[*e.get()].push(i),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(unique.len());
                    unique.push(s);
                    members.push(vec![i]);
                }
            }
        }
        (unique, members)
    } else {
        (sequences.iter().collect(), (0..sequences.len()).map(|i| vec![i]).collect())
    };
    let n = unique.len();
    let prepared: Vec<Prepared> = unique.iter().map(|s| Prepared::new(s, cost)).collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |row, i| {
            (i + 1..n)
                .map(|j| dp(&prepared[i], &prepared[j], cost, row))
                .collect()
        })
        .collect();
    let mut data = vec![0.0; n * n];
    for (i, r) in upper.into_iter().enumerate() {
        for (off, d) in r.into_iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    let weights = members.iter().map(|m| m.len() as f64).collect();
    DissimilarityMatrix {
        n,
        data,
        weights,
        members,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::AppEvent;

    fn cost3() -> CostModel {
        CostModel::constant(3, 2.0, 1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn spells_merge_same_category_runs() {
        let s = Session::new(
            "u",
            0,
            vec![
                AppEvent::new(Category(13), 0, 60_000),
                AppEvent::new(Category(13), 61_000, 91_000),
                AppEvent::new(Category(7), 92_000, 212_000),
            ],
        );
        assert_eq!(to_spell_sequence(&s), SpellSequence::from_pairs(&[(13, 90.0), (7, 120.0)]));
    }

    #[test]
    fn distinct_neighbours_unchanged() {
        let s = Session::new(
            "u",
            0,
            vec![
                AppEvent::new(Category(0), 0, 5_000),
                AppEvent::new(Category(1), 5_000, 10_000),
                AppEvent::new(Category(0), 10_000, 15_000),
            ],
        );
        assert_eq!(
            to_spell_sequence(&s),
            SpellSequence::from_pairs(&[(0, 5.0), (1, 5.0), (0, 5.0)])
        );
    }

    #[test]
    fn zero_duration_spells_get_quantum() {
        let s = Session::new("u", 0, vec![AppEvent::new(Category(0), 0, 0)]);
        assert_eq!(to_spell_sequence(&s).spells[0].duration_secs, MIN_SPELL_SECS);
    }

    #[test]
    fn single_forced_indel() {
        let d = omspell_distance(
            &SpellSequence::default(),
            &SpellSequence::from_pairs(&[(0, 3.0)]),
            &cost3(),
        );
        assert_eq!(d, 2.0);
    }

    #[test]
    fn worked_example() {
        let a = SpellSequence::from_pairs(&[(0, 2.0), (1, 1.0)]);
        let b = SpellSequence::from_pairs(&[(1, 2.0)]);
        assert_eq!(omspell_distance(&a, &b, &cost3()), 2.0);
        assert_eq!(omspell_distance(&b, &a, &cost3()), 2.0);
        assert_eq!(omspell_distance(&a, &a, &cost3()), 0.0);
    }

    #[test]
    fn normalized_distance_is_bounded() {
        let c = cost3().with_normalize(Normalize::Max);
        let a = SpellSequence::from_pairs(&[(0, 2.0), (1, 1.0)]);
        let b = SpellSequence::from_pairs(&[(2, 5.0)]);
        let d = omspell_distance(&a, &b, &c);
        assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::with_matrix(2, vec![0.0, 1.0, 2.0, 0.0], 1.0, 0.5, 60.0).is_err());
        assert!(CostModel::with_matrix(2, vec![1.0, 1.0, 1.0, 0.0], 1.0, 0.5, 60.0).is_err());
        assert!(CostModel::constant(2, 2.0, -1.0, 0.5, 60.0).is_err());
        assert!(CostModel::constant(2, 2.0, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn matrix_dedup_and_degenerate() {
        let c = cost3();
        let a = SpellSequence::from_pairs(&[(0, 2.0), (1, 1.0)]);
        let m = distance_matrix(&[a.clone()], &c, false);
        assert_eq!((m.n(), m.get(0, 0)), (1, 0.0));
        let m = distance_matrix(&[a.clone(), a.clone()], &c, true);
        assert_eq!(m.n(), 1);
        assert_eq!(m.weights, vec![2.0]);
        assert_eq!(m.members, vec![vec![0, 1]]);
    }

    #[test]
    fn matrix_matches_pairwise_calls() {
        let c = cost3();
        let seqs = [
            SpellSequence::from_pairs(&[(0, 2.0), (1, 1.0)]),
            SpellSequence::from_pairs(&[(1, 2.0)]),
            SpellSequence::from_pairs(&[(2, 1.0), (0, 3.0), (1, 1.0)]),
        ];
        let m = distance_matrix(&seqs, &c, false);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), omspell_distance(&seqs[i], &seqs[j], &c));
            }
        }
    }

    #[test]
    fn export_import_csv_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let small = DissimilarityMatrix::from_fn(4, |i, j| (i as f64 - j as f64).abs() * 0.1);
        small.export(&dir.path().join("small")).unwrap();
        let back = DissimilarityMatrix::import(&dir.path().join("small.json")).unwrap();
        assert_eq!(back, small);

        let n = CSV_EXPORT_LIMIT + 1;
        let big = DissimilarityMatrix::from_fn(n, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.5);
        let files = big.export(&dir.path().join("big")).unwrap();
        assert!(files[0].extension().unwrap() == "bin");
        let len = fs::metadata(&files[0]).unwrap().len() as usize;
        assert_eq!(len, n * (n - 1) / 2 * 8);
        let back = DissimilarityMatrix::import(&dir.path().join("big.json")).unwrap();
        assert_eq!(back.get(5, 17), big.get(5, 17));
        assert_eq!(back.get(17, 5), big.get(5, 17));
    }

    #[test]
    fn corrupt_matrix_reports_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = DissimilarityMatrix::from_fn(3, |_, _| 1.0);
        m.export(&dir.path().join("m")).unwrap();
        fs::write(dir.path().join("m.csv"), "0,1\n1,0\n").unwrap();
        let err = DissimilarityMatrix::import(&dir.path().join("m.json")).unwrap_err();
        assert!(matches!(err, SpellError::Corrupt { .. }));
        assert!(err.to_string().contains("m.csv"));
    }
}
