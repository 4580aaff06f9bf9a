use rand::Rng as _;

use super::{mutate, score_checked, Chromosome, Objective, Score, SearchAlgorithm, SearchOutcome, SearchTrace};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn check_iterations(iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(Error::Contract("search needs at least one iteration".into()));
    }
    Ok(())
}

/// Late-acceptance state: a ring of `Lh` past fitness values, the current
/// point and the best point seen.
#[derive(Debug, Clone, PartialEq)]
pub struct LahcState {
    pub history: Vec<f64>,
    pub current: (Chromosome, f64),
    pub best: (Chromosome, f64),
    /// Number of candidates considered so far.
    pub iteration: usize,
}

impl LahcState {
    /// History seeded with the initial fitness.
    pub fn new(init: Chromosome, fitness: f64, history_length: usize) -> Result<Self> {
        if history_length == 0 {
            return Err(Error::Contract("history length must be at least 1".into()));
        }
        Ok(LahcState {
            history: vec![fitness; history_length],
            current: (init.clone(), fitness),
            best: (init, fitness),
            iteration: 0,
        })
    }

    /// Accepts `candidate` iff its fitness is no worse than the history slot
    /// `iteration mod Lh` or than the current point; the slot then stores the
    /// current fitness.
    pub fn consider(&mut self, candidate: Chromosome, fitness: f64) -> bool {
        let slot = self.iteration % self.history.len();
        let accepted = fitness <= self.history[slot] || fitness <= self.current.1;
        if fitness < self.best.1 {
            self.best = (candidate.clone(), fitness);
        }
        if accepted {
            self.current = (candidate, fitness);
        }
        self.history[slot] = self.current.1;
        self.iteration += 1;
        accepted
    }
}

/// Scores `init` and records it as iteration 0.
fn start(objective: &mut dyn Objective, init: &Chromosome, trace: &mut SearchTrace) -> Result<Score> {
    let s = score_checked(objective, init)?;
    trace.push(0, init, s, true, s.fitness);
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct Lahc {
    iterations: usize,
    history_length: usize,
}

impl Lahc {
    pub fn new(iterations: usize, history_length: usize) -> Result<Self> {
        check_iterations(iterations)?;
        if history_length == 0 {
            return Err(Error::Contract("history length must be at least 1".into()));
        }
        Ok(Lahc {
            iterations,
            history_length,
        })
    }
}

impl SearchAlgorithm for Lahc {
    fn name(&self) -> &'static str {
        "lahc"
    }

    fn run(&self, objective: &mut dyn Objective, init: Chromosome, rng: &mut Rng) -> Result<SearchOutcome> {
        let mut trace = SearchTrace::default();
        let s0 = start(objective, &init, &mut trace)?;
        let mut state = LahcState::new(init, s0.fitness, self.history_length)?;
        for t in 1..=self.iterations {
            let candidate = mutate(&state.current.0, rng);
            let s = score_checked(objective, &candidate)?;
            let accepted = state.consider(candidate.clone(), s.fitness);
            trace.push(t, &candidate, s, accepted, state.best.1);
        }
        Ok(SearchOutcome {
            best: state.best.0,
            best_fitness: state.best.1,
            trace,
        })
    }
}

/// Greedy local search: accept a mutant iff it is no worse than the current point.
#[derive(Debug, Clone)]
pub struct HillClimbing {
    iterations: usize,
}

impl HillClimbing {
    pub fn new(iterations: usize) -> Result<Self> {
        check_iterations(iterations)?;
        Ok(HillClimbing { iterations })
    }
}

impl SearchAlgorithm for HillClimbing {
    fn name(&self) -> &'static str {
        "hill-climbing"
    }

    fn run(&self, objective: &mut dyn Objective, init: Chromosome, rng: &mut Rng) -> Result<SearchOutcome> {
        let mut trace = SearchTrace::default();
        let s0 = start(objective, &init, &mut trace)?;
        let mut current = (init.clone(), s0.fitness);
        let mut best = (init, s0.fitness);
        for t in 1..=self.iterations {
            let candidate = mutate(&current.0, rng);
            let s = score_checked(objective, &candidate)?;
            if s.fitness < best.1 {
                best = (candidate.clone(), s.fitness);
            }
            let accepted = s.fitness <= current.1;
            if accepted {
                current = (candidate.clone(), s.fitness);
            }
            trace.push(t, &candidate, s, accepted, best.1);
        }
        Ok(SearchOutcome {
            best: best.0,
            best_fitness: best.1,
            trace,
        })
    }
}

/// Metropolis acceptance with geometric cooling. Unless a temperature is
/// given, the first `probes` iterations run at the mean absolute fitness
/// change observed so far, and that mean becomes the initial temperature.
#[derive(Debug, Clone)]
pub struct SimulatedAnnealing {
    iterations: usize,
    cooling: f64,
    probes: usize,
    initial_temperature: Option<f64>,
}

impl SimulatedAnnealing {
    pub fn new(iterations: usize, cooling: f64, probes: usize, initial_temperature: Option<f64>) -> Result<Self> {
        check_iterations(iterations)?;
        if !(cooling > 0.0 && cooling <= 1.0) {
            return Err(Error::Contract(format!("cooling factor {cooling} outside (0, 1]")));
        }
        if let Some(t) = initial_temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Contract(format!("initial temperature {t} must be finite and >= 0")));
            }
        }
        Ok(SimulatedAnnealing {
            iterations,
            cooling,
            probes,
            initial_temperature,
        })
    }

    /// Metropolis rule; `u` is a uniform draw in `[0, 1)`.
    pub fn accepts(candidate: f64, current: f64, temperature: f64, u: f64) -> bool {
        if candidate <= current {
            return true;
        }
        if temperature <= 0.0 || !candidate.is_finite() {
            return false;
        }
        u < (-(candidate - current) / temperature).exp()
    }
}

impl SearchAlgorithm for SimulatedAnnealing {
    fn name(&self) -> &'static str {
        "sa"
    }

    fn run(&self, objective: &mut dyn Objective, init: Chromosome, rng: &mut Rng) -> Result<SearchOutcome> {
        let mut trace = SearchTrace::default();
        let s0 = start(objective, &init, &mut trace)?;
        let mut current = (init.clone(), s0.fitness);
        let mut best = (init, s0.fitness);
        let mut t0 = self.initial_temperature;
        let cooling_from = if t0.is_some() { 1 } else { self.probes.max(1) + 1 };
        let mut spread = Vec::new();
        for t in 1..=self.iterations {
            let candidate = mutate(&current.0, rng);
            let s = score_checked(objective, &candidate)?;
            let temperature = match t0 {
                Some(t0) => t0 * self.cooling.powi(t.saturating_sub(cooling_from) as i32),
                None => {
                    let delta = s.fitness - current.1;
                    if delta.is_finite() {
                        spread.push(delta.abs());
                    }
                    let mean = if spread.is_empty() {
                        0.0
                    } else {
                        spread.iter().sum::<f64>() / spread.len() as f64
                    };
                    if t >= self.probes {
                        t0 = Some(mean);
                    }
                    mean
                }
            };
            let u: f64 = rng.gen();
            let accepted = Self::accepts(s.fitness, current.1, temperature, u);
            if s.fitness < best.1 {
                best = (candidate.clone(), s.fitness);
            }
            if accepted {
                current = (candidate.clone(), s.fitness);
            }
            trace.push(t, &candidate, s, accepted, best.1);
        }
        Ok(SearchOutcome {
            best: best.0,
            best_fitness: best.1,
            trace,
        })
    }
}

/// Independent uniform chromosomes of the initial point's length. The initial
/// point itself is not scored.
#[derive(Debug, Clone)]
pub struct RandomSearch {
    iterations: usize,
}

impl RandomSearch {
    pub fn new(iterations: usize) -> Result<Self> {
        check_iterations(iterations)?;
        Ok(RandomSearch { iterations })
    }
}

impl SearchAlgorithm for RandomSearch {
    fn name(&self) -> &'static str {
        "rs"
    }

    fn run(&self, objective: &mut dyn Objective, init: Chromosome, rng: &mut Rng) -> Result<SearchOutcome> {
        let mut trace = SearchTrace::default();
        let mut best: Option<(Chromosome, f64)> = None;
        for t in 1..=self.iterations {
            let candidate = Chromosome::uniform(init.len(), rng)?;
            let s = score_checked(objective, &candidate)?;
            let improved = best.as_ref().is_none_or(|b| s.fitness < b.1);
            if improved {
                best = Some((candidate.clone(), s.fitness));
            }
            let best_fitness = best.as_ref().map_or(f64::INFINITY, |b| b.1);
            trace.push(t, &candidate, s, improved, best_fitness);
        }
        let (best, best_fitness) = best.expect("at least one iteration");
        Ok(SearchOutcome {
            best,
            best_fitness,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::UnaryOperatorId;
    use crate::rng;

    fn c(op: UnaryOperatorId) -> Chromosome {
        Chromosome::filled(op, 3).unwrap()
    }

    #[test]
    fn accepts_worse_than_current_but_better_than_history() {
        let mut s = LahcState::new(c(UnaryOperatorId::Tanh), 3.0, 3).unwrap();
        s.history = vec![5.0, 4.0, 3.0];
        assert!(s.consider(c(UnaryOperatorId::Gelu), 4.5));
        assert_eq!(s.current.1, 4.5);
        assert_eq!(s.history[0], 4.5);
        assert_eq!(s.best.1, 3.0);
        // slot 1 holds 4.0: 4.7 is worse than both it and the current 4.5
        assert!(!s.consider(c(UnaryOperatorId::Elu), 4.7));
        assert_eq!(s.history[1], 4.5);
    }

    #[test]
    fn constant_objective_accepts_everything() {
        let alg = Lahc::new(30, 3).unwrap();
        let mut r = rng::stream(0, "t", 0);
        let out = alg.run(&mut |_: &Chromosome| 1.0, c(UnaryOperatorId::ReLU6), &mut r).unwrap();
        assert_eq!(out.trace.records.len(), 31);
        assert!(out.trace.records.iter().all(|r| r.accepted));
    }

    #[test]
    fn metropolis_rule() {
        assert!(SimulatedAnnealing::accepts(1.0, 1.0, 0.0, 0.999));
        assert!(!SimulatedAnnealing::accepts(1.0 + 1e-9, 1.0, 0.0, 0.0));
        assert!(SimulatedAnnealing::accepts(2.0, 1.0, 1.0, 0.3));
        assert!(!SimulatedAnnealing::accepts(2.0, 1.0, 1.0, 0.4));
        assert!(!SimulatedAnnealing::accepts(f64::INFINITY, 1.0, 1e9, 0.0));
    }

    #[test]
    fn random_search_counts_evaluations() {
        let alg = RandomSearch::new(25).unwrap();
        let mut calls = 0;
        let mut r = rng::stream(0, "t", 0);
        let out = alg
            .run(
                &mut |x: &Chromosome| {
                    calls += 1;
                    x.genes()[0].catalog_index().unwrap() as f64
                },
                c(UnaryOperatorId::ReLU6),
                &mut r,
            )
            .unwrap();
        assert_eq!(calls, 25);
        assert_eq!(out.trace.records.len(), 25);
    }
}
