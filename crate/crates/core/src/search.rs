//! Evolutionary shape search and a brute-force oracle for small spaces.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbt::GbtModel;
use crate::space::{DesignSpace, ShapeVector};
use crate::supernet::{count_params, BackboneConfig};
use crate::surrogate::{model_features, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Constraint {
    ParamRange { min_params: u64, max_params: u64 },
    LatencyMax { max_ms: f64, device: String },
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        match self {
            Constraint::ParamRange { min_params, max_params } => {
                if min_params > max_params || *max_params == 0 {
                    return Err(Error::Config(format!(
                        "param range [{min_params}, {max_params}] is empty"
                    )));
                }
            }
            Constraint::LatencyMax { max_ms, .. } => {
                if !(max_ms.is_finite() && *max_ms > 0.0) {
                    return Err(Error::Config(format!("latency bound {max_ms} ms must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self {
            Constraint::ParamRange { min_params, max_params } => {
                format!("params in [{min_params}, {max_params}]")
            }
            Constraint::LatencyMax { max_ms, device } => format!("latency <= {max_ms} ms on {device}"),
        }
    }
}

/// Outcome of checking one shape. `measured` is the parameter count for
/// range constraints and the predicted latency in ms for latency bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub feasible: bool,
    pub params: u64,
    pub measured: f64,
}

/// Checks `shape` against `constraint` (none means always feasible).
pub fn check_constraint(
    shape: &ShapeVector,
    constraint: Option<&Constraint>,
    config: &BackboneConfig,
    latency_predictor: Option<&GbtModel>,
) -> Result<ConstraintCheck> {
    let params = count_params(config, shape)?;
    let (feasible, measured) = match constraint {
        None => (true, params as f64),
        Some(Constraint::ParamRange { min_params, max_params }) => {
            ((*min_params..=*max_params).contains(&params), params as f64)
        }
        Some(Constraint::LatencyMax { max_ms, .. }) => {
            let p = latency_predictor
                .ok_or_else(|| Error::Config("latency constraint needs a latency predictor".into()))?;
            let ms = p.predict(&model_features(p, shape, params))?;
            (ms <= *max_ms, ms)
        }
    };
    Ok(ConstraintCheck {
        feasible,
        params,
        measured,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub mutation_prob: f64,
    /// Parents kept per generation relative to children produced.
    pub parent_ratio: f64,
    pub iterations: usize,
    pub seed: u64,
    pub constraint: Option<Constraint>,
    pub max_retries: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 100,
            mutation_prob: 0.4,
            parent_ratio: 1.0,
            iterations: 300,
            seed: 0,
            constraint: None,
            max_retries: 50,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config(format!("mutation probability {} outside [0, 1]", self.mutation_prob)));
        }
        if !(self.parent_ratio.is_finite() && self.parent_ratio > 0.0) {
            return Err(Error::Config("parent ratio must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        if let Some(c) = &self.constraint {
            c.validate()?;
        }
        Ok(())
    }

    /// `(parents, mutants, crossovers)` per generation.
    pub fn split(&self) -> (usize, usize, usize) {
        let p = self.population_size;
        let parents =
            ((p as f64 * self.parent_ratio / (1.0 + self.parent_ratio)).round() as usize).clamp(1, p - 1);
        let children = p - parents;
        let mutants = children.div_ceil(2);
        (parents, mutants, children - mutants)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub shape: ShapeVector,
    pub fitness: f64,
    pub params: u64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub format_version: u32,
    pub best: Candidate,
    pub history: Vec<GenerationRecord>,
    /// Distinct shapes whose fitness was computed.
    pub evaluations: usize,
    pub config: SearchConfig,
}

impl SearchReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("generation,best_fitness,mean_fitness\n");
        for g in &self.history {
            s.push_str(&format!("{},{},{}\n", g.generation, g.best_fitness, g.mean_fitness));
        }
        s
    }
}

/// Each gene independently, with probability `prob`, is redrawn uniformly
/// from the other allowed dims.
pub fn mutate<R: Rng + ?Sized>(
    shape: &ShapeVector,
    prob: f64,
    space: &DesignSpace,
    rng: &mut R,
) -> Result<ShapeVector> {
    space.check(shape)?;
    let dims = space.allowed_dims();
    if dims.len() == 1 {
        return Ok(shape.clone());
    }
    let out = shape
        .dims()
        .iter()
        .map(|&d| {
            if !rng.random_bool(prob) {
                return d;
            }
            let cur = space.dim_index(d).expect("checked above");
            let j = rng.random_range(0..dims.len() - 1);
            dims[if j >= cur { j + 1 } else { j }]
        })
        .collect();
    Ok(ShapeVector::new(out))
}

/// Uniform crossover.
pub fn crossover<R: Rng + ?Sized>(a: &ShapeVector, b: &ShapeVector, rng: &mut R) -> Result<ShapeVector> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("crossover of lengths {} and {}", a.len(), b.len())));
    }
    Ok(ShapeVector::new(
        a.dims()
            .iter()
            .zip(b.dims())
            .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
            .collect(),
    ))
}

pub type FitnessFn<'a> = dyn FnMut(&ShapeVector) -> Result<f64> + 'a;
pub type ConstraintFn<'a> = dyn FnMut(&ShapeVector) -> Result<ConstraintCheck> + 'a;

struct Evaluator<'a, 'b> {
    fitness: &'a mut FitnessFn<'b>,
    constraint: &'a mut ConstraintFn<'b>,
    checks: HashMap<ShapeVector, ConstraintCheck>,
    scores: HashMap<ShapeVector, f64>,
}

impl Evaluator<'_, '_> {
    fn check(&mut self, s: &ShapeVector) -> Result<ConstraintCheck> {
        if let Some(c) = self.checks.get(s) {
            return Ok(*c);
        }
        let c = (self.constraint)(s)?;
        self.checks.insert(s.clone(), c);
        Ok(c)
    }

    fn candidate(&mut self, s: &ShapeVector) -> Result<Candidate> {
        let check = self.check(s)?;
        let fitness = match self.scores.get(s) {
            Some(&f) => f,
            None => {
                let f = (self.fitness)(s)?;
                if !f.is_finite() {
                    return Err(Error::numeric("fitness", format!("non-finite fitness {f} for {s}")));
                }
                self.scores.insert(s.clone(), f);
                f
            }
        };
        Ok(Candidate {
            shape: s.clone(),
            fitness,
            params: check.params,
            feasible: check.feasible,
        })
    }
}

fn rank(pop: &mut [Candidate]) {
    pop.sort_by(|a, b| a.fitness.total_cmp(&b.fitness).then_with(|| a.shape.cmp(&b.shape)));
}

fn record(generation: usize, pop: &[Candidate]) -> GenerationRecord {
    GenerationRecord {
        generation,
        best_fitness: pop[0].fitness,
        mean_fitness: pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64,
    }
}

/// Truncation-selection EA minimising `fitness` over feasible shapes.
///
/// Each generation keeps the best parents and refills the population with
/// mutants and uniform-crossover children. An infeasible child is redrawn
/// up to `max_retries` times, then replaced by a clone of its parent.
/// Fitness is computed once per distinct shape.
pub fn evolve(
    space: &DesignSpace,
    config: &SearchConfig,
    fitness: &mut FitnessFn<'_>,
    constraint: &mut ConstraintFn<'_>,
) -> Result<SearchReport> {
    config.validate()?;
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ev = Evaluator {
        fitness,
        constraint,
        checks: HashMap::new(),
        scores: HashMap::new(),
    };
    let p = config.population_size;

    // Initial population: up to p * max_retries uniform draws. Slots left
    // empty are filled by cycling through the feasible shapes found.
    let mut found = Vec::with_capacity(p);
    for _ in 0..p * config.max_retries {
        if found.len() == p {
            break;
        }
        let s = space.sample(&mut rng);
        if ev.check(&s)?.feasible {
            found.push(s);
        }
    }
    if found.is_empty() {
        let what = config.constraint.as_ref().map_or("constraint function".to_string(), Constraint::describe);
        return Err(Error::Infeasible(format!(
            "no shape satisfying {what} found in {} draws",
            p * config.max_retries
        )));
    }
    let mut pop = (0..p)
        .map(|i| ev.candidate(&found[i % found.len()]))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut pop);
    let mut history = vec![record(0, &pop)];

    let (n_parents, n_mut, n_cross) = config.split();
    for generation in 1..=config.iterations {
        pop.truncate(n_parents);
        let parents: Vec<ShapeVector> = pop.iter().map(|c| c.shape.clone()).collect();
        let mut children = Vec::with_capacity(n_mut + n_cross);
        for i in 0..n_mut + n_cross {
            let mut child = None;
            let mut fallback = None;
            for _ in 0..config.max_retries {
                let a = parents.choose(&mut rng).expect("at least one parent");
                let s = if i < n_mut {
                    mutate(a, config.mutation_prob, space, &mut rng)?
                } else {
                    let b = parents.choose(&mut rng).expect("at least one parent");
                    crossover(a, b, &mut rng)?
                };
                fallback.get_or_insert_with(|| a.clone());
                if ev.check(&s)?.feasible {
                    child = Some(s);
                    break;
                }
            }
            children.push(child.or(fallback).expect("max_retries > 0"));
        }
        for s in &children {
            pop.push(ev.candidate(s)?);
        }
        rank(&mut pop);
        history.push(record(generation, &pop));
    }
    Ok(SearchReport {
        format_version: FORMAT_VERSION,
        best: pop[0].clone(),
        history,
        evaluations: ev.scores.len(),
        config: config.clone(),
    })
}

/// Default enumeration cap for [`brute_force_search`].
pub const BRUTE_FORCE_CAP: u128 = 1_000_000;

/// Exact argmin over every feasible shape; ties go to the lexicographically
/// smallest shape.
pub fn brute_force_search(
    space: &DesignSpace,
    fitness: &mut FitnessFn<'_>,
    constraint: &mut ConstraintFn<'_>,
    cap: u128,
) -> Result<Candidate> {
    space.validate()?;
    let size = space.size();
    if size > cap {
        return Err(Error::SpaceTooLarge { size, cap });
    }
    let mut best: Option<Candidate> = None;
    for s in space.iter_all() {
        let check = constraint(&s)?;
        if !check.feasible {
            continue;
        }
        let f = fitness(&s)?;
        if !f.is_finite() {
            return Err(Error::numeric("fitness", format!("non-finite fitness {f} for {s}")));
        }
        if best.as_ref().is_none_or(|b| f < b.fitness) {
            best = Some(Candidate {
                shape: s,
                fitness: f,
                params: check.params,
                feasible: true,
            });
        }
    }
    best.ok_or_else(|| Error::Infeasible("no shape in the design space is feasible".into()))
}
