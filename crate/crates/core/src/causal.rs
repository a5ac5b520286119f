//! Structural causal models over a finite set of vertices, with `do`
//! interventions and mediated interventions, used to build the pair of group
//! initial distributions for path-specific fairness.
//!
//! Vertex values are `f64`; discrete variables are coded as small integers.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::FairnessSpec;
use crate::seed::{SeedTree, SimRng};

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("graph has a cycle through vertex {0}")]
    Cyclic(String),
    #[error("unknown vertex {0}")]
    UnknownVertex(String),
    #[error("duplicate vertex name {0}")]
    DuplicateVertex(String),
    #[error("invalid intervention plan: {0}")]
    Plan(String),
    #[error("noise vector has {got} entries, graph has {expected} vertices")]
    NoiseDimension { expected: usize, got: usize },
    #[error("vertex {vertex} is undefined for parent values {parents:?} and noise {noise}")]
    Undefined { vertex: String, parents: Vec<f64>, noise: f64 },
    #[error("invalid noise for vertex {vertex}: {reason}")]
    Noise { vertex: String, reason: String },
    #[error("sample {sample}: {reason}")]
    Assembler { sample: usize, reason: String },
    #[error("{0}")]
    Enumeration(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Equation = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type Sampler = Arc<dyn Fn(&mut SimRng) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Noise {
    /// Finite support with probabilities; enables exact enumeration.
    Finite { values: Vec<f64>, probs: Vec<f64> },
    Sampler(Sampler),
}

impl Noise {
    pub fn constant(value: f64) -> Self {
        Noise::Finite {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match self {
            Noise::Finite { values, probs } => values[crate::policy::sample_index(probs, rng)],
            Noise::Sampler(f) => f(rng),
        }
    }
}

impl fmt::Debug for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::Finite { values, probs } => f
                .debug_struct("Finite")
                .field("values", values)
                .field("probs", probs)
                .finish(),
            Noise::Sampler(_) => f.write_str("Sampler"),
        }
    }
}

#[derive(Clone)]
pub struct Vertex {
    pub name: String,
    pub parents: Vec<usize>,
    /// `f_i(parent values in the order of `parents`, noise)`.
    pub equation: Equation,
    pub noise: Noise,
}

impl Vertex {
    pub fn new(
        name: impl Into<String>,
        parents: Vec<usize>,
        noise: Noise,
        equation: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            parents,
            equation: Arc::new(equation),
            noise,
        }
    }

    /// A vertex without parents whose value is its noise.
    pub fn exogenous(name: impl Into<String>, noise: Noise) -> Self {
        Self::new(name, Vec::new(), noise, |_, e| e)
    }
}

impl fmt::Debug for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vertex")
            .field("name", &self.name)
            .field("parents", &self.parents)
            .field("noise", &self.noise)
            .finish()
    }
}

/// `do(X_i = x)`, optionally with `X_{i'}` taking the value it would have
/// under `do(X_i = x')` for the same noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InterventionPlan {
    pub intervention: Option<(usize, f64)>,
    pub mediator: Option<(usize, f64)>,
}

impl InterventionPlan {
    pub fn observe() -> Self {
        Self::default()
    }

    pub fn intervene(vertex: usize, value: f64) -> Self {
        Self {
            intervention: Some((vertex, value)),
            mediator: None,
        }
    }

    pub fn mediated(vertex: usize, value: f64, mediator: usize, counterfactual: f64) -> Self {
        Self {
            intervention: Some((vertex, value)),
            mediator: Some((mediator, counterfactual)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CausalGraph {
    vertices: Vec<Vertex>,
    order: Vec<usize>,
}

impl CausalGraph {
    /// Checks parent indices and acyclicity.
    pub fn new(vertices: Vec<Vertex>) -> Result<Self, CausalError> {
        let n = vertices.len();
        let mut seen = HashMap::new();
        for v in &vertices {
            if seen.insert(v.name.clone(), ()).is_some() {
                return Err(CausalError::DuplicateVertex(v.name.clone()));
            }
            if let Some(&p) = v.parents.iter().find(|&&p| p >= n) {
                return Err(CausalError::UnknownVertex(p.to_string()));
            }
            if let Noise::Finite { values, probs } = &v.noise {
                let total: f64 = probs.iter().sum();
                if values.is_empty()
                    || values.len() != probs.len()
                    || probs.iter().any(|p| !(*p >= 0.0))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(CausalError::Noise {
                        vertex: v.name.clone(),
                        reason: "finite support must be a probability vector".into(),
                    });
                }
            }
        }
        // Kahn's algorithm.
        let mut indegree: Vec<usize> = vertices.iter().map(|v| v.parents.len()).collect();
        let mut children = vec![Vec::new(); n];
        for (i, v) in vertices.iter().enumerate() {
            for &p in &v.parents {
                children[p].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).expect("some vertex is on a cycle");
            return Err(CausalError::Cyclic(vertices[stuck].name.clone()));
        }
        Ok(Self { vertices, order })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, i: usize) -> &Vertex {
        &self.vertices[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize, CausalError> {
        self.vertices
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| CausalError::UnknownVertex(name.into()))
    }

    /// A topological order of the vertices.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn sample_noise(&self, rng: &mut SimRng) -> Vec<f64> {
        self.vertices.iter().map(|v| v.noise.sample(rng)).collect()
    }

    /// Every joint noise vector with its probability. Fails when a vertex has
    /// sampler-only noise or the support exceeds `limit` points.
    pub fn noise_support(&self, limit: usize) -> Result<Vec<(Vec<f64>, f64)>, CausalError> {
        let mut out = vec![(Vec::with_capacity(self.len()), 1.0)];
        for v in &self.vertices {
            let Noise::Finite { values, probs } = &v.noise else {
                return Err(CausalError::Enumeration(format!("vertex {} has sampler-only noise", v.name)));
            };
            if out.len() * values.len() > limit {
                return Err(CausalError::Enumeration(format!("noise support exceeds {limit} points")));
            }
            out = out
                .into_iter()
                .flat_map(|(prefix, p)| {
                    values.iter().zip(probs).filter(|(_, &q)| q > 0.0).map(move |(&e, &q)| {
                        let mut next = prefix.clone();
                        next.push(e);
                        (next, p * q)
                    })
                })
                .collect();
        }
        Ok(out)
    }

    /// Values of every vertex under the observational model.
    pub fn evaluate(&self, noise: &[f64]) -> Result<Vec<f64>, CausalError> {
        self.evaluate_pinned(noise, &[])
    }

    fn check_vertex(&self, i: usize) -> Result<(), CausalError> {
        if i >= self.len() {
            return Err(CausalError::UnknownVertex(i.to_string()));
        }
        Ok(())
    }

    fn evaluate_pinned(&self, noise: &[f64], pins: &[(usize, f64)]) -> Result<Vec<f64>, CausalError> {
        if noise.len() != self.len() {
            return Err(CausalError::NoiseDimension {
                expected: self.len(),
                got: noise.len(),
            });
        }
        let mut values = vec![0.0; self.len()];
        let mut parents = Vec::new();
        for &i in &self.order {
            if let Some(&(_, x)) = pins.iter().find(|(j, _)| *j == i) {
                values[i] = x;
                continue;
            }
            let v = &self.vertices[i];
            parents.clear();
            parents.extend(v.parents.iter().map(|&p| values[p]));
            let value = (v.equation)(&parents, noise[i]);
            if !value.is_finite() {
                return Err(CausalError::Undefined {
                    vertex: v.name.clone(),
                    parents: parents.clone(),
                    noise: noise[i],
                });
            }
            values[i] = value;
        }
        Ok(values)
    }

    pub fn validate_plan(&self, plan: &InterventionPlan) -> Result<(), CausalError> {
        if let Some((i, _)) = plan.intervention {
            self.check_vertex(i)?;
        }
        if let Some((m, _)) = plan.mediator {
            self.check_vertex(m)?;
            match plan.intervention {
                None => return Err(CausalError::Plan("a mediator requires an intervention".into())),
                Some((i, _)) if i == m => {
                    return Err(CausalError::Plan("the mediator must differ from the intervened vertex".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Values under `plan` for one noise vector. A mediated plan evaluates
    /// the graph twice with the same noise: once under `do(X_i = x')` to get
    /// the mediator's value, then under `do(X_i = x)` with the mediator pinned.
    pub fn evaluate_with_plan(&self, plan: &InterventionPlan, noise: &[f64]) -> Result<Vec<f64>, CausalError> {
        self.validate_plan(plan)?;
        match (plan.intervention, plan.mediator) {
            (None, _) => self.evaluate(noise),
            (Some(pin), None) => self.evaluate_pinned(noise, &[pin]),
            (Some((i, x)), Some((m, x_cf))) => {
                let counterfactual = self.evaluate_pinned(noise, &[(i, x_cf)])?;
                self.evaluate_pinned(noise, &[(i, x), (m, counterfactual[m])])
            }
        }
    }
}

/// How the graph maps onto group membership and qualification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpecificSetup {
    /// The sensitive attribute `Z`.
    pub sensitive: usize,
    /// The mediator `Y` whose path from `Z` is allowed.
    pub mediator: usize,
    pub maj_value: f64,
    pub min_value: f64,
}

impl PathSpecificSetup {
    /// Majority side: `do(Z = maj)` with `Y` as under `do(Z = min)`.
    pub fn maj_plan(&self) -> InterventionPlan {
        InterventionPlan::mediated(self.sensitive, self.maj_value, self.mediator, self.min_value)
    }

    /// Minority side: `do(Z = min)`.
    pub fn min_plan(&self) -> InterventionPlan {
        InterventionPlan::intervene(self.sensitive, self.min_value)
    }

    /// The same construction with the roles of the two groups swapped.
    pub fn swapped(&self) -> Self {
        Self {
            maj_value: self.min_value,
            min_value: self.maj_value,
            ..*self
        }
    }
}

/// Group initial distributions over tabular states.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDistributions {
    pub maj: Vec<f64>,
    pub min: Vec<f64>,
}

impl GroupDistributions {
    pub fn spec(&self, tolerance: f64) -> FairnessSpec {
        FairnessSpec::from_distributions(self.maj.clone(), self.min.clone(), tolerance)
    }

    /// Initial distribution `p_maj D_maj + (1 - p_maj) D_min`.
    pub fn mixture(&self, p_maj: f64) -> Vec<f64> {
        self.maj
            .iter()
            .zip(&self.min)
            .map(|(a, b)| p_maj * a + (1.0 - p_maj) * b)
            .collect()
    }
}

/// Output of [`path_specific_groups`]. `swapped` holds the second
/// constraint pair when the symmetric variant was requested.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpecificGroups {
    pub primary: GroupDistributions,
    pub swapped: Option<GroupDistributions>,
    pub samples: usize,
}

/// Maps the values of all vertices to a tabular state.
pub trait StateAssembler: Sync {
    fn assemble(&self, values: &[f64]) -> Result<usize, String>;
}

impl<F: Fn(&[f64]) -> Result<usize, String> + Sync> StateAssembler for F {
    fn assemble(&self, values: &[f64]) -> Result<usize, String> {
        self(values)
    }
}

const CHUNK: usize = 1024;

fn accumulate(
    graph: &CausalGraph,
    plans: &[InterventionPlan],
    noise: &[f64],
    weight: f64,
    assembler: &dyn StateAssembler,
    n_states: usize,
    sample: usize,
    hist: &mut [Vec<f64>],
) -> Result<(), CausalError> {
    for (k, plan) in plans.iter().enumerate() {
        let values = graph.evaluate_with_plan(plan, noise)?;
        let s = assembler
            .assemble(&values)
            .map_err(|reason| CausalError::Assembler { sample, reason })?;
        if s >= n_states {
            return Err(CausalError::Assembler {
                sample,
                reason: format!("state {s} out of range for {n_states} states"),
            });
        }
        hist[k][s] += weight;
    }
    Ok(())
}

fn plans_for(setup: &PathSpecificSetup, symmetric: bool) -> Vec<InterventionPlan> {
    let mut plans = vec![setup.maj_plan(), setup.min_plan()];
    if symmetric {
        let s = setup.swapped();
        plans.extend([s.maj_plan(), s.min_plan()]);
    }
    plans
}

fn finish(hist: Vec<Vec<f64>>, samples: usize) -> PathSpecificGroups {
    let normalize = |h: &Vec<f64>| {
        let total: f64 = h.iter().sum();
        h.iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    let pair = |k: usize| GroupDistributions {
        maj: normalize(&hist[k]),
        min: normalize(&hist[k + 1]),
    };
    PathSpecificGroups {
        primary: pair(0),
        swapped: (hist.len() == 4).then(|| pair(2)),
        samples,
    }
}

/// Monte Carlo estimate of the path-specific group initial distributions.
/// Each noise draw is shared by all plans.
pub fn path_specific_groups(
    graph: &CausalGraph,
    setup: &PathSpecificSetup,
    assembler: &dyn StateAssembler,
    n_states: usize,
    n_samples: usize,
    symmetric: bool,
    seeds: SeedTree,
) -> Result<PathSpecificGroups, CausalError> {
    if n_samples == 0 {
        return Err(CausalError::Plan("at least one sample is required".into()));
    }
    let plans = plans_for(setup, symmetric);
    for p in &plans {
        graph.validate_plan(p)?;
    }
    let chunks = n_samples.div_ceil(CHUNK);
    let partial: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeds.child(c as u64).rng();
            let mut hist = vec![vec![0.0; n_states]; plans.len()];
            for sample in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let noise = graph.sample_noise(&mut rng);
                accumulate(graph, &plans, &noise, 1.0, assembler, n_states, sample, &mut hist)?;
            }
            Ok(hist)
        })
        .collect::<Result<_, CausalError>>()?;
    let mut hist = vec![vec![0.0; n_states]; plans.len()];
    for part in partial {
        for (h, p) in hist.iter_mut().zip(part) {
            for (a, b) in h.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    Ok(finish(hist, n_samples))
}

/// Exact distributions by enumerating the finite joint noise support.
pub fn path_specific_groups_exact(
    graph: &CausalGraph,
    setup: &PathSpecificSetup,
    assembler: &dyn StateAssembler,
    n_states: usize,
    symmetric: bool,
) -> Result<PathSpecificGroups, CausalError> {
    let plans = plans_for(setup, symmetric);
    let support = graph.noise_support(1 << 20)?;
    let mut hist = vec![vec![0.0; n_states]; plans.len()];
    for (sample, (noise, p)) in support.iter().enumerate() {
        accumulate(graph, &plans, noise, *p, assembler, n_states, sample, &mut hist)?;
    }
    Ok(finish(hist, support.len()))
}

/// JSON description of a graph with finite noise and tabulated equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableGraph {
    pub vertices: Vec<TableVertex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableVertex {
    pub name: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub noise: TableNoise,
    /// Rows `(parent values, noise) -> value`. When absent the vertex's value
    /// is its noise.
    #[serde(default)]
    pub table: Option<Vec<TableRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableNoise {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(default)]
    pub parents: Vec<f64>,
    pub noise: f64,
    pub value: f64,
}

fn key(values: &[f64], noise: f64) -> Vec<u64> {
    values.iter().chain(std::iter::once(&noise)).map(|v| (v + 0.0).to_bits()).collect()
}

impl TableGraph {
    pub fn from_json_str(text: &str) -> Result<Self, CausalError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the graph. Lookups missing from a table make evaluation fail
    /// with [`CausalError::Undefined`].
    pub fn build(&self) -> Result<CausalGraph, CausalError> {
        let names: HashMap<&str, usize> = self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.as_str(), i))
            .collect();
        let mut vertices = Vec::with_capacity(self.vertices.len());
        for v in &self.vertices {
            let parents = v
                .parents
                .iter()
                .map(|p| names.get(p.as_str()).copied().ok_or_else(|| CausalError::UnknownVertex(p.clone())))
                .collect::<Result<Vec<usize>, _>>()?;
            let noise = Noise::Finite {
                values: v.noise.values.clone(),
                probs: v.noise.probs.clone(),
            };
            let vertex = match &v.table {
                None => Vertex::new(v.name.clone(), parents, noise, |_, e| e),
                Some(rows) => {
                    let mut table = HashMap::with_capacity(rows.len());
                    for row in rows {
                        if row.parents.len() != parents.len() {
                            return Err(CausalError::Noise {
                                vertex: v.name.clone(),
                                reason: format!(
                                    "table row has {} parent values, vertex has {} parents",
                                    row.parents.len(),
                                    parents.len()
                                ),
                            });
                        }
                        table.insert(key(&row.parents, row.noise), row.value);
                    }
                    Vertex::new(v.name.clone(), parents, noise, move |p, e| {
                        table.get(&key(p, e)).copied().unwrap_or(f64::NAN)
                    })
                }
            };
            vertices.push(vertex);
        }
        CausalGraph::new(vertices)
    }
}

/// Draws a uniform value from `[lo, hi)`; convenience for sampler noise.
pub fn uniform_noise(lo: f64, hi: f64) -> Noise {
    Noise::Sampler(Arc::new(move |rng: &mut SimRng| rng.random_range(lo..hi)))
}
