//! Tree-structured Parzen Estimator.
//!
//! Observations are split at the `gamma` quantile into a good set and a bad
//! set. Each set gets an independent per-parameter density (`l` for good,
//! `g` for bad) and the next point is the candidate drawn from `l` that
//! maximises `log l(x) - log g(x)`.

use std::f64::consts::{PI, SQRT_2};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Domain, ParamAssignment, ParamValue, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpeError {
    #[error("no observations to split")]
    Empty,
    #[error("gamma must lie strictly between 0 and 1, got {0}")]
    Gamma(f64),
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

/// Optimisation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

impl Direction {
    /// True when `candidate` beats `incumbent` by more than `min_delta`.
    pub fn improves(self, candidate: f64, incumbent: f64, min_delta: f64) -> bool {
        match self {
            Direction::Minimize => candidate < incumbent - min_delta,
            Direction::Maximize => candidate > incumbent + min_delta,
        }
    }

    /// Score oriented so that lower is better.
    pub fn orient(self, score: f64) -> f64 {
        match self {
            Direction::Minimize => score,
            Direction::Maximize => -score,
        }
    }

    /// Worst representable finite score.
    pub fn sentinel(self) -> f64 {
        match self {
            Direction::Minimize => f64::MAX,
            Direction::Maximize => -f64::MAX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Minimize => "minimize",
            Direction::Maximize => "maximize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_candidates: usize,
    /// Uniform draws before the density model takes over.
    pub n_startup_trials: usize,
    /// Smallest kernel bandwidth as a fraction of the range width.
    pub bandwidth_floor: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: 0.25, n_candidates: 24, n_startup_trials: 0, bandwidth_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub assignment: ParamAssignment,
    pub score: f64,
    pub iteration: u32,
}

/// Evaluated configurations under one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    rows: Vec<Observation>,
    direction: Direction,
}

impl ObservationSet {
    pub fn new(direction: Direction) -> Self {
        Self { rows: Vec::new(), direction }
    }

    pub fn push(&mut self, assignment: ParamAssignment, score: f64, iteration: u32) -> Result<(), TpeError> {
        if !score.is_finite() {
            return Err(TpeError::NonFinite(score));
        }
        self.rows.push(Observation { assignment, score, iteration });
        Ok(())
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Good/bad partition, as indices into the observation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub good: Vec<usize>,
    pub bad: Vec<usize>,
    /// Worst score inside the good set, in the caller's units.
    pub threshold: f64,
    pub gamma: f64,
}

/// `max(1, ceil(gamma * n))`. The small slack keeps products like
/// `0.1 * 30` from rounding up past the intended count.
pub fn n_good(gamma: f64, n: usize) -> usize {
    let raw = (gamma * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

pub fn split_observations(obs: &ObservationSet, gamma: f64) -> Result<SplitResult, TpeError> {
    if obs.is_empty() {
        return Err(TpeError::Empty);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(TpeError::Gamma(gamma));
    }
    let dir = obs.direction();
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&obs.rows[a], &obs.rows[b]);
        dir.orient(ra.score)
            .total_cmp(&dir.orient(rb.score))
            .then(ra.iteration.cmp(&rb.iteration))
            .then(a.cmp(&b))
    });
    let k = n_good(gamma, obs.len());
    let bad = order.split_off(k);
    let threshold = obs.rows[*order.last().expect("k >= 1")].score;
    Ok(SplitResult { good: order, bad, threshold, gamma })
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Numeric density on the parameter's internal axis: log-transformed for
/// log-scale parameters, widened by half a step on each side for integers.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericDensity {
    low: f64,
    high: f64,
    log_scale: bool,
    integer: bool,
    centers: Vec<f64>,
    bandwidth: f64,
    /// Truncation mass of each kernel inside `[low, high]`.
    masses: Vec<f64>,
}

impl NumericDensity {
    fn axis(domain: &Domain) -> (f64, f64, bool, bool) {
        match *domain {
            Domain::Float { low, high, log_scale } => {
                if log_scale {
                    (low.ln(), high.ln(), true, false)
                } else {
                    (low, high, false, false)
                }
            }
            Domain::Int { low, high, log_scale } => {
                let (lo, hi) = (low as f64 - 0.5, high as f64 + 0.5);
                if log_scale {
                    (lo.max(0.5).ln(), hi.ln(), true, true)
                } else {
                    (lo, hi, false, true)
                }
            }
            Domain::Categorical { .. } => unreachable!("numeric density over categorical domain"),
        }
    }

    fn fit(domain: &Domain, values: &[f64], floor: f64) -> Self {
        let (low, high, log_scale, integer) = Self::axis(domain);
        let centers: Vec<f64> = values
            .iter()
            .filter(|v| v.is_finite() && (!log_scale || **v > 0.0))
            .map(|&v| if log_scale { v.ln() } else { v }.clamp(low, high))
            .collect();
        let k = centers.len();
        let width = high - low;
        let sigma = if k > 1 {
            let mean = centers.iter().sum::<f64>() / k as f64;
            (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        let bandwidth = if k == 0 {
            width
        } else {
            let adaptive = width / (k as f64 + 1.0).min(100.0);
            (sigma * (k as f64).powf(-0.2)).max(adaptive).max(floor * width)
        };
        let masses = centers
            .iter()
            .map(|c| std_normal_cdf((high - c) / bandwidth) - std_normal_cdf((low - c) / bandwidth))
            .map(|m| m.max(f64::MIN_POSITIVE))
            .collect();
        Self { low, high, log_scale, integer, centers, bandwidth, masses }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.low, self.high)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Density at a point of the internal axis.
    pub fn pdf_internal(&self, x: f64) -> f64 {
        if !(x >= self.low && x <= self.high) {
            return 0.0;
        }
        let w = 1.0 / (self.centers.len() as f64 + 1.0);
        let uniform = w / (self.high - self.low);
        let h = self.bandwidth;
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.masses)
            .map(|(c, m)| {
                let z = (x - c) / h;
                (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * h * m)
            })
            .sum();
        uniform + w * kernels
    }

    fn to_internal(&self, v: &ParamValue) -> Option<f64> {
        let x = v.as_f64()?;
        if self.log_scale {
            (x > 0.0).then(|| x.ln())
        } else {
            Some(x)
        }
    }

    fn to_external(&self, x: f64) -> ParamValue {
        let x = x.clamp(self.low, self.high);
        let raw = if self.log_scale { x.exp() } else { x };
        if self.integer {
            // bounds of the real domain: undo the half-step padding
            let lo = if self.log_scale { self.low.exp() } else { self.low } + 0.5;
            let hi = if self.log_scale { self.high.exp() } else { self.high } - 0.5;
            ParamValue::Int(raw.round().clamp(lo.round(), hi.round()) as i64)
        } else {
            let (lo, hi) = if self.log_scale { (self.low.exp(), self.high.exp()) } else { (self.low, self.high) };
            ParamValue::Float(raw.clamp(lo, hi))
        }
    }

    pub fn log_pdf(&self, v: &ParamValue) -> f64 {
        match self.to_internal(v) {
            Some(x) => self.pdf_internal(x.clamp(self.low, self.high)).ln(),
            None => f64::NEG_INFINITY,
        }
    }

    fn sample_internal<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = self.centers.len();
        let component = rng.random_range(0..=k);
        if component == k {
            return rng.random_range(self.low..self.high);
        }
        let c = self.centers[component];
        let normal = rand_distr::Normal::new(0.0, self.bandwidth).expect("positive bandwidth");
        for _ in 0..64 {
            let x = c + rng.sample(normal);
            if x >= self.low && x <= self.high {
                return x;
            }
        }
        c
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        let x = self.sample_internal(rng);
        self.to_external(x)
    }
}

/// Add-one smoothed category frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDensity {
    choices: Vec<String>,
    probs: Vec<f64>,
}

impl CategoricalDensity {
    fn fit(choices: &[String], values: &[&str]) -> Self {
        let mut counts = vec![1.0; choices.len()];
        for v in values {
            if let Some(i) = choices.iter().position(|c| c == v) {
                counts[i] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        Self { choices: choices.to_vec(), probs: counts.into_iter().map(|c| c / total).collect() }
    }

    pub fn prob(&self, choice: &str) -> f64 {
        self.choices.iter().position(|c| c == choice).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_pdf(&self, v: &ParamValue) -> f64 {
        match v {
            ParamValue::Choice(c) => self.prob(c).ln(),
            other => self.prob(&other.to_string()).ln(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, p) in self.choices.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return ParamValue::Choice(c.clone());
            }
        }
        ParamValue::Choice(self.choices.last().expect("non-empty choices").clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamDensity {
    Numeric(NumericDensity),
    Categorical(CategoricalDensity),
}

impl ParamDensity {
    pub fn log_pdf(&self, v: &ParamValue) -> f64 {
        match self {
            ParamDensity::Numeric(d) => d.log_pdf(v),
            ParamDensity::Categorical(d) => d.log_pdf(v),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match self {
            ParamDensity::Numeric(d) => d.sample(rng),
            ParamDensity::Categorical(d) => d.sample(rng),
        }
    }
}

/// Independent per-parameter densities over a search space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    params: IndexMap<String, ParamDensity>,
}

impl DensityModel {
    pub fn get(&self, name: &str) -> Option<&ParamDensity> {
        self.params.get(name)
    }

    /// Sum of per-parameter log densities.
    pub fn log_pdf(&self, a: &ParamAssignment) -> f64 {
        self.params
            .iter()
            .map(|(name, d)| a.get(name).map(|v| d.log_pdf(v)).unwrap_or(f64::NEG_INFINITY))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamAssignment {
        let mut out = ParamAssignment::new();
        for (name, d) in &self.params {
            out.insert(name.clone(), d.sample(rng));
        }
        out
    }
}

pub fn fit_density(rows: &[&ParamAssignment], space: &SearchSpace) -> DensityModel {
    fit_density_with_floor(rows, space, TpeConfig::default().bandwidth_floor)
}

/// As [`fit_density`] with an explicit bandwidth floor (fraction of width).
pub fn fit_density_with_floor(rows: &[&ParamAssignment], space: &SearchSpace, floor: f64) -> DensityModel {
    let mut params = IndexMap::new();
    for spec in space.specs() {
        let density = match &spec.domain {
            Domain::Categorical { choices } => {
                let values: Vec<&str> = rows
                    .iter()
                    .filter_map(|r| match r.get(&spec.name) {
                        Some(ParamValue::Choice(c)) => Some(c.as_str()),
                        _ => None,
                    })
                    .collect();
                ParamDensity::Categorical(CategoricalDensity::fit(choices, &values))
            }
            numeric => {
                let values: Vec<f64> = rows.iter().filter_map(|r| r.get(&spec.name).and_then(ParamValue::as_f64)).collect();
                ParamDensity::Numeric(NumericDensity::fit(numeric, &values, floor))
            }
        };
        params.insert(spec.name.clone(), density);
    }
    DensityModel { params }
}

/// Every joint outcome of a purely categorical space, or `None` when the
/// space has numeric parameters or more than `limit` outcomes.
pub fn enumerate_discrete(space: &SearchSpace, limit: usize) -> Option<Vec<ParamAssignment>> {
    let mut total = 1usize;
    for spec in space.specs() {
        match &spec.domain {
            Domain::Categorical { choices } => total = total.checked_mul(choices.len())?,
            _ => return None,
        }
        if total > limit {
            return None;
        }
    }
    let mut out = vec![ParamAssignment::new()];
    for spec in space.specs() {
        let Domain::Categorical { choices } = &spec.domain else { unreachable!() };
        out = out
            .into_iter()
            .flat_map(|a| {
                choices.iter().map(move |c| a.clone().with(spec.name.clone(), ParamValue::Choice(c.clone())))
            })
            .collect();
    }
    Some(out)
}

/// Next point proposed by TPE.
///
/// Candidates are drawn from the good-set density and scored by
/// `log l - log g`; the first maximum wins. A fully categorical space with
/// no more joint outcomes than `n_candidates` is scored exhaustively instead
/// of sampled.
pub fn suggest_tpe<R: Rng + ?Sized>(obs: &ObservationSet, space: &SearchSpace, cfg: &TpeConfig, rng: &mut R) -> ParamAssignment {
    let n_candidates = cfg.n_candidates.max(1);
    if obs.is_empty() || obs.len() < cfg.n_startup_trials {
        return space.sample_uniform(rng);
    }
    let split = split_observations(obs, cfg.gamma).expect("non-empty observations and validated gamma");
    let rows = obs.rows();
    let good: Vec<&ParamAssignment> = split.good.iter().map(|&i| &rows[i].assignment).collect();
    let bad: Vec<&ParamAssignment> = split.bad.iter().map(|&i| &rows[i].assignment).collect();
    let l = fit_density_with_floor(&good, space, cfg.bandwidth_floor);
    let g = fit_density_with_floor(&bad, space, cfg.bandwidth_floor);

    let candidates = match enumerate_discrete(space, n_candidates) {
        Some(all) => all,
        None => (0..n_candidates).map(|_| l.sample(rng)).collect(),
    };
    let mut best: Option<(f64, ParamAssignment)> = None;
    for c in candidates {
        let score = l.log_pdf(&c) - g.log_pdf(&c);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, c));
        }
    }
    best.expect("at least one candidate").1
}
