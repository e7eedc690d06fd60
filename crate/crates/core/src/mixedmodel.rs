//! Random-intercept linear mixed model fitted by REML.
//!
//! With `λ = σ²_u / σ²_e` the fixed effects and residual variance have
//! closed forms, so the REML criterion is profiled down to one dimension and
//! maximized over `log(λ + ε)` by a coarse grid scan followed by
//! golden-section refinement. Per-group sufficient statistics make each
//! criterion evaluation `O(groups · p²)`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::ingest::{AgeGroup, Education, Gender, Occupation, ProfileTable};
use crate::trajectory::{SwitchRateRecord, Timespan};

pub const GOLDEN_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 10_000;
const LOG_EPS: f64 = 1e-10;
const LAMBDA_MAX: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum LmmError {
    #[error("formula error: {0}")]
    Formula(String),
    #[error("user `{0}` has no profile")]
    MissingProfile(String),
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("need more observations than columns + 2 ({n_obs} observations, {cols} columns)")]
    TooFewObservations { n_obs: usize, cols: usize },
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("unknown level `{level}` for factor {factor}")]
    UnknownLevel { factor: Factor, level: String },
    #[error("combination not representable: {0}")]
    Unrepresentable(String),
    #[error("contrast has length {got}, expected {expected}")]
    ContrastLength { got: usize, expected: usize },
    #[error("contrast has zero variance")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Timespan,
    Gender,
    AgeGroup,
    Education,
    Occupation,
}

impl Factor {
    pub const ALL: [Factor; 5] = [
        Factor::Timespan,
        Factor::Gender,
        Factor::AgeGroup,
        Factor::Education,
        Factor::Occupation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Timespan => "timespan",
            Factor::Gender => "gender",
            Factor::AgeGroup => "age_group",
            Factor::Education => "education",
            Factor::Occupation => "occupation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn levels(self) -> Vec<&'static str> {
        match self {
            Factor::Timespan => Timespan::ALL.iter().map(|t| t.label()).collect(),
            Factor::Gender => Gender::ALL.iter().map(|l| l.label()).collect(),
            Factor::AgeGroup => AgeGroup::ALL.iter().map(|l| l.label()).collect(),
            Factor::Education => Education::ALL.iter().map(|l| l.label()).collect(),
            Factor::Occupation => Occupation::ALL.iter().map(|l| l.label()).collect(),
        }
    }

    pub fn default_reference(self) -> &'static str {
        match self {
            Factor::Timespan => "small",
            Factor::Gender => "female",
            Factor::AgeGroup => "18-20",
            Factor::Education => "low",
            Factor::Occupation => "managers",
        }
    }

    fn level_index(self, level: &str) -> Option<usize> {
        self.levels().iter().position(|l| *l == level)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub main: Vec<Factor>,
    pub interactions: Vec<(Factor, Factor)>,
    pub reference: BTreeMap<Factor, String>,
    /// Model the empirical logit of the rate instead of the raw rate.
    pub logit: bool,
}

impl ModelSpec {
    pub fn new(main: Vec<Factor>, interactions: Vec<(Factor, Factor)>) -> Self {
        Self {
            main,
            interactions,
            reference: Factor::ALL
                .into_iter()
                .map(|f| (f, f.default_reference().to_string()))
                .collect(),
            logit: false,
        }
    }

    /// Timespan crossed with gender, age group and education, plus occupation.
    pub fn default_model() -> Self {
        Self::parse("rate ~ timespan*gender + timespan*age_group + timespan*education + occupation + (1|user)")
            .expect("default formula parses")
    }

    /// Parses `rate ~ term + ... + (1|user)` where a term is `f`, `f*g` or `f:g`.
    pub fn parse(formula: &str) -> Result<Self, LmmError> {
        let err = |m: String| LmmError::Formula(m);
        let (lhs, rhs) = formula
            .split_once('~')
            .ok_or_else(|| err("missing `~`".into()))?;
        if lhs.trim() != "rate" {
            return Err(err(format!("outcome must be `rate`, got `{}`", lhs.trim())));
        }
        let mut main: Vec<Factor> = Vec::new();
        let mut inter: Vec<(Factor, Factor)> = Vec::new();
        let mut has_random = false;
        let factor = |s: &str| Factor::parse(s.trim()).ok_or_else(|| err(format!("unknown factor `{}`", s.trim())));
        for term in rhs.split('+').map(str::trim) {
            let compact: String = term.chars().filter(|c| !c.is_whitespace()).collect();
            if compact == "(1|user)" || compact == "(1|user_id)" {
                has_random = true;
                continue;
            }
            if compact.is_empty() {
                return Err(err("empty term".into()));
            }
            let (pair, with_main) = if let Some((a, b)) = compact.split_once('*') {
                ((factor(a)?, factor(b)?), true)
            } else if let Some((a, b)) = compact.split_once(':') {
                ((factor(a)?, factor(b)?), false)
            } else {
                let f = factor(&compact)?;
                if !main.contains(&f) {
                    main.push(f);
                }
                continue;
            };
            if pair.0 == pair.1 {
                return Err(err(format!("factor crossed with itself in `{term}`")));
            }
            if with_main {
                for f in [pair.0, pair.1] {
                    if !main.contains(&f) {
                        main.push(f);
                    }
                }
            }
            if !inter.contains(&pair) && !inter.contains(&(pair.1, pair.0)) {
                inter.push(pair);
            }
        }
        if !has_random {
            return Err(err("random intercept `(1|user)` is required".into()));
        }
        for (a, b) in &inter {
            if !main.contains(a) || !main.contains(b) {
                return Err(err(format!("interaction {a}:{b} requires both main effects")));
            }
        }
        Ok(Self::new(main, inter))
    }

    pub fn uses(&self, f: Factor) -> bool {
        self.main.contains(&f)
    }

    fn reference_index(&self, f: Factor) -> Result<usize, LmmError> {
        let level = self
            .reference
            .get(&f)
            .map(String::as_str)
            .unwrap_or(f.default_reference());
        f.level_index(level).ok_or_else(|| LmmError::UnknownLevel {
            factor: f,
            level: level.to_string(),
        })
    }
}

/// One design column: the product of level indicators in `terms`
/// (empty for the intercept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub terms: Vec<(Factor, usize)>,
}

impl Column {
    fn value(&self, levels: &[usize; 5]) -> f64 {
        if self.terms.iter().all(|&(f, l)| levels[f as usize] == l) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub groups: Vec<usize>,
    pub group_ids: Vec<String>,
    pub columns: Vec<Column>,
    pub dropped: Vec<String>,
    /// Level index of each factor for every row.
    pub row_levels: Vec<[usize; 5]>,
    pub spec: ModelSpec,
}

fn candidate_columns(spec: &ModelSpec) -> Result<Vec<Column>, LmmError> {
    let mut cols = vec![Column {
        name: "(intercept)".into(),
        terms: vec![],
    }];
    let non_ref = |f: Factor| -> Result<Vec<usize>, LmmError> {
        let r = spec.reference_index(f)?;
        Ok((0..f.levels().len()).filter(|&l| l != r).collect())
    };
    for &f in &spec.main {
        for l in non_ref(f)? {
            cols.push(Column {
                name: format!("{}={}", f, f.levels()[l]),
                terms: vec![(f, l)],
            });
        }
    }
    for &(a, b) in &spec.interactions {
        for la in non_ref(a)? {
            for lb in non_ref(b)? {
                cols.push(Column {
                    name: format!("{}={}:{}={}", a, a.levels()[la], b, b.levels()[lb]),
                    terms: vec![(a, la), (b, lb)],
                });
            }
        }
    }
    Ok(cols)
}

fn numeric_rank(x: &DMatrix<f64>) -> usize {
    let xtx = x.transpose() * x;
    let sv = xtx.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = max * 1e-10 * sv.len() as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Dummy-codes records against reference levels. Columns that are zero in
/// every row (unobserved levels or empty interaction cells) are dropped.
pub fn build_design(
    records: &[SwitchRateRecord],
    profiles: &ProfileTable,
    spec: &ModelSpec,
) -> Result<Design, LmmError> {
    let mut row_levels = Vec::with_capacity(records.len());
    // group indices follow sorted user ids
    let group_ids: Vec<String> = records
        .iter()
        .map(|r| r.user_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let index_of: BTreeMap<&str, usize> = group_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut groups = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    let needs_profile = spec.main.iter().any(|&f| f != Factor::Timespan);
    for r in records {
        let mut lv = [0usize; 5];
        lv[Factor::Timespan as usize] = Timespan::ALL
            .iter()
            .position(|&t| t == r.timespan)
            .expect("closed set");
        match profiles.get(&r.user_id) {
            Some(p) => {
                lv[Factor::Gender as usize] = Gender::ALL.iter().position(|&g| g == p.gender).expect("closed");
                lv[Factor::AgeGroup as usize] =
                    AgeGroup::ALL.iter().position(|&g| g == p.age_group).expect("closed");
                lv[Factor::Education as usize] =
                    Education::ALL.iter().position(|&g| g == p.education).expect("closed");
                lv[Factor::Occupation as usize] =
                    Occupation::ALL.iter().position(|&g| g == p.occupation).expect("closed");
            }
            None if needs_profile => return Err(LmmError::MissingProfile(r.user_id.clone())),
            None => {}
        }
        row_levels.push(lv);
        groups.push(index_of[r.user_id.as_str()]);
        y.push(if spec.logit {
            let n = r.n_off_positions as f64;
            let k = r.rate * n;
            ((k + 0.5) / (n - k + 0.5)).ln()
        } else {
            r.rate
        });
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for c in candidate_columns(spec)? {
        if row_levels.iter().any(|lv| c.value(lv) != 0.0) {
            columns.push(c);
        } else {
            dropped.push(c.name);
        }
    }
    let x = DMatrix::from_fn(records.len(), columns.len(), |i, j| columns[j].value(&row_levels[i]));
    let rank = numeric_rank(&x);
    if rank < columns.len() {
        return Err(LmmError::RankDeficient {
            rank,
            cols: columns.len(),
        });
    }
    Ok(Design {
        y,
        x,
        groups,
        group_ids,
        columns,
        dropped,
        row_levels,
        spec: spec.clone(),
    })
}

/// Per-group sufficient statistics for the profiled REML criterion.
pub struct RemlProblem {
    n: usize,
    p: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    group_n: Vec<f64>,
    group_xsum: Vec<DVector<f64>>,
    group_ysum: Vec<f64>,
}

struct Profile {
    loglik: f64,
    beta: DVector<f64>,
    sigma2: f64,
    h_inv: DMatrix<f64>,
}

impl RemlProblem {
    pub fn new(y: &[f64], x: &DMatrix<f64>, groups: &[usize]) -> Self {
        let (n, p) = x.shape();
        assert_eq!(y.len(), n);
        assert_eq!(groups.len(), n);
        let n_groups = groups.iter().max().map_or(0, |m| m + 1);
        let yv = DVector::from_column_slice(y);
        let mut group_n = vec![0.0; n_groups];
        let mut group_xsum = vec![DVector::zeros(p); n_groups];
        let mut group_ysum = vec![0.0; n_groups];
        for i in 0..n {
            let g = groups[i];
            group_n[g] += 1.0;
            group_ysum[g] += y[i];
            for j in 0..p {
                group_xsum[g][j] += x[(i, j)];
            }
        }
        Self {
            n,
            p,
            xtx: x.transpose() * x,
            xty: x.transpose() * &yv,
            yty: yv.dot(&yv),
            group_n,
            group_xsum,
            group_ysum,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.group_n.iter().filter(|&&c| c > 0.0).count()
    }

    fn profile(&self, lambda: f64) -> Option<Profile> {
        let mut h = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut q = self.yty;
        let mut logdet_v = 0.0;
        for g in 0..self.group_n.len() {
            let ng = self.group_n[g];
            if ng == 0.0 {
                continue;
            }
            let c = lambda / (1.0 + lambda * ng);
            let s = &self.group_xsum[g];
            let t = self.group_ysum[g];
            h.ger(-c, s, s, 1.0);
            b.axpy(-c * t, s, 1.0);
            q -= c * t * t;
            logdet_v += (lambda * ng).ln_1p();
        }
        let h = (&h + h.transpose()) * 0.5;
        let chol: Cholesky<f64, Dyn> = Cholesky::new(h)?;
        let beta = chol.solve(&b);
        let rss = (q - b.dot(&beta)).max(0.0);
        let dof = (self.n - self.p) as f64;
        let sigma2 = rss / dof;
        let logdet_h: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let loglik = -0.5 * (dof * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + logdet_v + logdet_h);
        Some(Profile {
            loglik,
            beta,
            sigma2,
            h_inv: chol.inverse(),
        })
    }

    /// Profiled REML log-likelihood at variance ratio `lambda`.
    pub fn criterion(&self, lambda: f64) -> f64 {
        self.profile(lambda).map_or(f64::NEG_INFINITY, |p| p.loglik)
    }

    /// Analytic derivative of [`Self::criterion`] with respect to `lambda`.
    pub fn criterion_derivative(&self, lambda: f64) -> Option<f64> {
        let prof = self.profile(lambda)?;
        let rss = prof.sigma2 * (self.n - self.p) as f64;
        if rss <= 0.0 {
            return None;
        }
        let (mut d_logdet_v, mut d_logdet_h, mut d_rss) = (0.0, 0.0, 0.0);
        for g in 0..self.group_n.len() {
            let ng = self.group_n[g];
            if ng == 0.0 {
                continue;
            }
            let dc = 1.0 / (1.0 + lambda * ng).powi(2);
            let s = &self.group_xsum[g];
            let resid = self.group_ysum[g] - s.dot(&prof.beta);
            d_logdet_v += ng / (1.0 + lambda * ng);
            d_logdet_h -= dc * (&prof.h_inv * s).dot(s);
            d_rss -= dc * resid * resid;
        }
        Some(-0.5 * ((self.n - self.p) as f64 * d_rss / rss + d_logdet_v + d_logdet_h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major covariance of `beta`.
    pub cov: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub lambda: f64,
    pub reml_loglik: f64,
    pub n_obs: usize,
    pub n_users: usize,
    pub converged: bool,
    pub iterations: usize,
    /// λ at the lower bound (no between-user variance).
    pub boundary: bool,
    /// Residuals vanish; variances are reported as zero.
    pub perfect_fit: bool,
}

impl FitResult {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p(), self.p(), &self.cov)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.columns.iter().position(|c| c == name).map(|i| self.beta[i])
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, usize, bool) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iters = 0;
    while (b - a).abs() > tol {
        if iters >= MAX_ITER {
            return ((a + b) / 2.0, iters, false);
        }
        iters += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    ((a + b) / 2.0, iters, true)
}

/// Bisection on the sign of the analytic derivative inside the grid bracket.
/// Golden-section alone stalls where criterion differences drop below
/// rounding; the derivative keeps its sign information there.
fn polish(prob: &RemlProblem, theta: f64, a: f64, b: f64) -> f64 {
    let grad = |t: f64| {
        let lambda = (t.exp() - LOG_EPS).max(0.0);
        prob.criterion_derivative(lambda).map(|d| d * t.exp())
    };
    let (Some(ga), Some(gb)) = (grad(a), grad(b)) else { return theta };
    if !(ga > 0.0 && gb < 0.0) {
        return theta;
    }
    let (mut lo, mut hi) = (a, b);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match grad(mid) {
            Some(g) if g > 0.0 => lo = mid,
            Some(g) if g < 0.0 => hi = mid,
            Some(_) => return mid,
            None => return theta,
        }
    }
    let t = 0.5 * (lo + hi);
    let lambda_of = |t: f64| (t.exp() - LOG_EPS).max(0.0);
    let tol = 1e-9 * (1.0 + prob.criterion(lambda_of(theta)).abs());
    if prob.criterion(lambda_of(t)) >= prob.criterion(lambda_of(theta)) - tol {
        t
    } else {
        theta
    }
}

/// REML fit of `y = Xβ + u[group] + ε`.
pub fn fit_reml(y: &[f64], x: &DMatrix<f64>, groups: &[usize], columns: &[String]) -> Result<FitResult, LmmError> {
    let (n, p) = x.shape();
    if n <= p + 2 {
        return Err(LmmError::TooFewObservations { n_obs: n, cols: p });
    }
    let prob = RemlProblem::new(y, x, groups);
    let n_users = prob.n_groups();
    if n_users < 2 {
        return Err(LmmError::TooFewGroups(n_users));
    }
    let at_zero = prob.profile(0.0).ok_or(LmmError::RankDeficient {
        rank: numeric_rank(x),
        cols: p,
    })?;
    let finish = |lambda: f64, prof: Profile, iterations, converged, boundary, perfect_fit| {
        let mut cov = prof.h_inv * prof.sigma2;
        cov = (&cov + cov.transpose()) * 0.5;
        let se = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        FitResult {
            columns: columns.to_vec(),
            beta: prof.beta.iter().copied().collect(),
            se,
            cov: cov.transpose().iter().copied().collect(),
            sigma2_u: lambda * prof.sigma2,
            sigma2_e: prof.sigma2,
            lambda,
            reml_loglik: prof.loglik,
            n_obs: n,
            n_users,
            converged,
            iterations,
            boundary,
            perfect_fit,
        }
    };
    let scale = prob.yty.max(1.0);
    if at_zero.sigma2 * (n - p) as f64 <= 1e-24 * scale {
        return Ok(finish(0.0, at_zero, 0, true, true, true));
    }
    if prob.group_n.iter().all(|&c| c <= 1.0) {
        // intercepts are not identifiable with one observation per user
        return Ok(finish(0.0, at_zero, 0, true, true, false));
    }
    let crit = |theta: f64| prob.criterion((theta.exp() - LOG_EPS).max(0.0));
    let lo = LOG_EPS.ln();
    let hi = (LAMBDA_MAX + LOG_EPS).ln();
    const GRID: usize = 80;
    let step = (hi - lo) / GRID as f64;
    let grid: Vec<f64> = (0..=GRID).map(|i| crit(lo + step * i as f64)).collect();
    let best = (0..=GRID)
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]).then(b.cmp(&a)))
        .expect("grid non-empty");
    let a = lo + step * best.saturating_sub(1) as f64;
    let b = lo + step * (best + 1).min(GRID) as f64;
    let (theta, iterations, converged) = golden_max(crit, a, b, GOLDEN_TOL);
    let theta = polish(&prob, theta, a, b);
    let lambda = (theta.exp() - LOG_EPS).max(0.0);
    let prof = prob.profile(lambda).expect("interior profile");
    let tol = 1e-9 * (1.0 + prof.loglik.abs());
    if at_zero.loglik >= prof.loglik - tol {
        return Ok(finish(0.0, at_zero, iterations + GRID + 1, converged, true, false));
    }
    Ok(finish(lambda, prof, iterations + GRID + 1, converged, false, false))
}

pub fn fit_design(design: &Design) -> Result<FitResult, LmmError> {
    let names: Vec<String> = design.columns.iter().map(|c| c.name.clone()).collect();
    fit_reml(&design.y, &design.x, &design.groups, &names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalMean {
    pub at: Vec<(Factor, String)>,
    pub estimate: f64,
    pub se: f64,
}

/// Contrast vector for a level combination, averaging every column over the
/// observed rows with the requested factors overridden.
pub fn contrast_for(design: &Design, at: &[(Factor, &str)]) -> Result<Vec<f64>, LmmError> {
    let mut overrides = Vec::with_capacity(at.len());
    for &(f, level) in at {
        let idx = f.level_index(level).ok_or_else(|| LmmError::UnknownLevel {
            factor: f,
            level: level.to_string(),
        })?;
        if !design.spec.uses(f) {
            return Err(LmmError::Unrepresentable(format!("factor {f} is not in the model")));
        }
        let is_ref = design.spec.reference_index(f)? == idx;
        let main_name = format!("{}={}", f, level);
        if !is_ref && !design.columns.iter().any(|c| c.name == main_name) {
            return Err(LmmError::Unrepresentable(format!("level {main_name} was not observed")));
        }
        overrides.push((f, idx));
    }
    let n = design.row_levels.len() as f64;
    let mut c = vec![0.0; design.columns.len()];
    for lv in &design.row_levels {
        let mut lv = *lv;
        for &(f, idx) in &overrides {
            lv[f as usize] = idx;
        }
        for (j, col) in design.columns.iter().enumerate() {
            c[j] += col.value(&lv);
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

fn quad_form(fit: &FitResult, c: &[f64]) -> f64 {
    let p = fit.p();
    let mut v = 0.0;
    for i in 0..p {
        for j in 0..p {
            v += c[i] * fit.cov[i * p + j] * c[j];
        }
    }
    v
}

pub fn marginal_means(
    fit: &FitResult,
    design: &Design,
    combos: &[Vec<(Factor, &str)>],
) -> Result<Vec<MarginalMean>, LmmError> {
    combos
        .iter()
        .map(|at| {
            let c = contrast_for(design, at)?;
            let estimate = c.iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
            Ok(MarginalMean {
                at: at.iter().map(|&(f, l)| (f, l.to_string())).collect(),
                estimate,
                se: quad_form(fit, &c).max(0.0).sqrt(),
            })
        })
        .collect()
}

/// Timespan means, and timespan × level means for every factor crossed with
/// timespan in the model. Unobserved levels are skipped.
pub fn circadian_grid(fit: &FitResult, design: &Design) -> Vec<MarginalMean> {
    let mut combos: Vec<Vec<(Factor, &str)>> = Vec::new();
    for ts in Factor::Timespan.levels() {
        combos.push(vec![(Factor::Timespan, ts)]);
    }
    for &(a, b) in &design.spec.interactions {
        let other = match (a, b) {
            (Factor::Timespan, o) | (o, Factor::Timespan) => o,
            _ => continue,
        };
        for level in other.levels() {
            for ts in Factor::Timespan.levels() {
                combos.push(vec![(Factor::Timespan, ts), (other, level)]);
            }
        }
    }
    combos
        .into_iter()
        .filter_map(|c| marginal_means(fit, design, &[c]).ok().and_then(|mut v| v.pop()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Wald z-test of `c'β = null`.
pub fn wald_contrast(fit: &FitResult, c: &[f64], null: f64) -> Result<WaldResult, LmmError> {
    if c.len() != fit.p() {
        return Err(LmmError::ContrastLength {
            got: c.len(),
            expected: fit.p(),
        });
    }
    let var = quad_form(fit, c);
    if !(var > 0.0) {
        return Err(LmmError::ZeroVariance);
    }
    let estimate: f64 = c.iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
    let se = var.sqrt();
    let z = (estimate - null) / se;
    Ok(WaldResult {
        estimate,
        se,
        z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::UserProfile;
    use chrono::NaiveDate;

    #[test]
    fn derivative_matches_finite_differences() {
        let groups: Vec<usize> = (0..30).flat_map(|g| std::iter::repeat_n(g, 2 + g % 4)).collect();
        let n = groups.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ((i * 7) % 5) as f64 });
        let y: Vec<f64> = (0..n)
            .map(|i| 0.3 * x[(i, 1)] + ((groups[i] * 13) % 7) as f64 * 0.2 + ((i * 31) % 11) as f64 * 0.05)
            .collect();
        let prob = RemlProblem::new(&y, &x, &groups);
        for lambda in [0.05, 0.5, 3.0] {
            let h = 1e-5 * lambda;
            let fd = (prob.criterion(lambda + h) - prob.criterion(lambda - h)) / (2.0 * h);
            let an = prob.criterion_derivative(lambda).unwrap();
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{lambda}: {fd} vs {an}");
        }
    }

    #[test]
    fn formula_parsing() {
        let s = ModelSpec::parse("rate ~ timespan*gender + age_group + (1|user)").unwrap();
        assert_eq!(s.main, vec![Factor::Timespan, Factor::Gender, Factor::AgeGroup]);
        assert_eq!(s.interactions, vec![(Factor::Timespan, Factor::Gender)]);
        assert!(ModelSpec::parse("rate ~ timespan").is_err());
        assert!(ModelSpec::parse("y ~ timespan + (1|user)").is_err());
        assert!(ModelSpec::parse("rate ~ height + (1|user)").is_err());
        assert!(ModelSpec::parse("rate ~ timespan:gender + (1|user)").is_err());
        let d = ModelSpec::default_model();
        assert_eq!(d.interactions.len(), 3);
        assert!(d.uses(Factor::Occupation));
    }

    fn records(users: usize, genders: bool) -> (Vec<SwitchRateRecord>, ProfileTable) {
        let date = NaiveDate::from_ymd_opt(2016, 7, 1).unwrap();
        let mut recs = Vec::new();
        let mut profiles = Vec::new();
        for u in 0..users {
            let id = format!("u{u:03}");
            for (k, ts) in Timespan::ALL.into_iter().enumerate() {
                recs.push(SwitchRateRecord {
                    user_id: id.clone(),
                    date,
                    timespan: ts,
                    rate: 0.1 + 0.01 * k as f64 + 0.003 * ((u * 7 + k * 3) % 5) as f64,
                    n_off_positions: 100,
                });
            }
            profiles.push(UserProfile {
                user_id: id,
                gender: if genders && u % 2 == 1 { Gender::Male } else { Gender::Female },
                age_group: AgeGroup::A18to20,
                education: Education::Low,
                occupation: Occupation::Managers,
            });
        }
        (recs, ProfileTable::from_profiles(profiles))
    }

    #[test]
    fn timespan_only_design() {
        let (recs, prof) = records(4, false);
        let spec = ModelSpec::parse("rate ~ timespan + (1|user)").unwrap();
        let d = build_design(&recs, &prof, &spec).unwrap();
        assert_eq!(d.x.ncols(), 5);
        assert_eq!(d.columns[0].name, "(intercept)");
    }

    #[test]
    fn interaction_adds_four_columns() {
        let (recs, prof) = records(4, true);
        let main = build_design(&recs, &prof, &ModelSpec::parse("rate ~ timespan + gender + (1|user)").unwrap()).unwrap();
        let inter = build_design(&recs, &prof, &ModelSpec::parse("rate ~ timespan*gender + (1|user)").unwrap()).unwrap();
        assert_eq!(inter.x.ncols(), main.x.ncols() + 4);
    }

    #[test]
    fn missing_profile_named() {
        let (recs, _) = records(2, false);
        let spec = ModelSpec::parse("rate ~ timespan + gender + (1|user)").unwrap();
        let err = build_design(&recs, &ProfileTable::default(), &spec).unwrap_err();
        assert_eq!(err, LmmError::MissingProfile("u000".into()));
    }

    #[test]
    fn unobserved_levels_dropped() {
        let (recs, prof) = records(4, false);
        let spec = ModelSpec::parse("rate ~ timespan*gender + (1|user)").unwrap();
        let d = build_design(&recs, &prof, &spec).unwrap();
        assert!(d.dropped.contains(&"gender=male".to_string()));
        assert_eq!(d.x.ncols(), 5);
    }

    #[test]
    fn reference_mean_equals_intercept() {
        let (recs, prof) = records(10, true);
        let spec = ModelSpec::parse("rate ~ timespan + gender + (1|user)").unwrap();
        let d = build_design(&recs, &prof, &spec).unwrap();
        let fit = fit_design(&d).unwrap();
        let mm = marginal_means(&fit, &d, &[vec![(Factor::Timespan, "small"), (Factor::Gender, "female")]]).unwrap();
        assert!((mm[0].estimate - fit.beta[0]).abs() < 1e-12);
        assert!(marginal_means(&fit, &d, &[vec![(Factor::Education, "low")]]).is_err());
        assert!(marginal_means(&fit, &d, &[vec![(Factor::Gender, "other")]]).is_err());
    }

    #[test]
    fn perfect_fit() {
        let (recs, prof) = records(6, false);
        let mut recs = recs;
        for r in &mut recs {
            r.rate = match r.timespan {
                Timespan::Small => 0.1,
                Timespan::Morning => 0.3,
                Timespan::Midday => 0.4,
                Timespan::Afternoon => 0.3,
                Timespan::Evening => 0.2,
            };
        }
        let spec = ModelSpec::parse("rate ~ timespan + (1|user)").unwrap();
        let d = build_design(&recs, &prof, &spec).unwrap();
        let fit = fit_design(&d).unwrap();
        assert!(fit.perfect_fit && fit.boundary);
        assert!((fit.beta[0] - 0.1).abs() < 1e-12);
        assert!((fit.beta[2] - 0.3).abs() < 1e-12);
        assert_eq!(fit.sigma2_u, 0.0);
        assert!(fit.sigma2_e < 1e-20);
    }

    #[test]
    fn wald_basics() {
        let fit = FitResult {
            columns: vec!["a".into(), "b".into()],
            beta: vec![0.0, 1.96],
            se: vec![1.0, 1.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            sigma2_u: 0.0,
            sigma2_e: 1.0,
            lambda: 0.0,
            reml_loglik: 0.0,
            n_obs: 10,
            n_users: 2,
            converged: true,
            iterations: 0,
            boundary: true,
            perfect_fit: false,
        };
        let w = wald_contrast(&fit, &[1.0, 0.0], 0.0).unwrap();
        assert_eq!((w.z, w.p_value), (0.0, 1.0));
        let w = wald_contrast(&fit, &[0.0, 1.0], 0.0).unwrap();
        assert!((w.p_value - 0.05).abs() < 1e-3);
        assert_eq!(wald_contrast(&fit, &[0.0, 0.0], 0.0), Err(LmmError::ZeroVariance));
        assert!(wald_contrast(&fit, &[1.0], 0.0).is_err());
    }

    #[test]
    fn too_few_groups() {
        let x = DMatrix::from_element(6, 1, 1.0);
        let err = fit_reml(&[1.0, 2.0, 3.0, 4.0, 5.0, 7.0], &x, &[0; 6], &["i".into()]).unwrap_err();
        assert_eq!(err, LmmError::TooFewGroups(1));
    }
}
