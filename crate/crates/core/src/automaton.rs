//! The cellular automaton that assembles symmetric-polynomial bounds on `||T_r||_inf`.
//!
//! One cell per energy combination `n`. An edge `n -> n'` exists when `V` can
//! move a single subsystem between levels with `M_st > 0` (or, for the self-loop,
//! when `omega > 0` or a within-level transition exists). Edges into the low
//! subspace are only used on the last step.
//!
//! A run of order `r` is one emission from the starting low cell, `r - 2` rounds
//! of (Phase I, Phase II) over the high cells and a final (Phase I, final
//! Phase II) landing in the low cells. Phase I merges everything waiting on the
//! incoming edges and applies `1/|z - E(n)|`. Phase II applies one `V`.
//!
//! Each stored tuple's `xi` is the λ-free weight of all walks that end in one
//! fixed representative configuration of its slot multiset. Moving a slot of
//! class `(s, e)` to `(t, e+1)` therefore multiplies by `M_st` times the number
//! of `(t, e+1)` slots in the successor: each of those slots could have been the
//! one that moved.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{classify, enumerate_combinations, validate_z, EnergyCombination, ModelConfig, Subspace};
use crate::sympoly::{eval_monomial, merge, pairwise_sum, Partition, TraceTerm, WalkTuple};

#[derive(Debug, Clone)]
pub struct Cell {
    pub label: EnergyCombination,
    pub subspace: Subspace,
    pub energy: f64,
    /// `|z - E(n)|`.
    pub distance: f64,
    state: Vec<WalkTuple>,
}

impl Cell {
    pub fn state(&self) -> &[WalkTuple] {
        &self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Low to high: the first application of `V`.
    Excitation,
    /// High to high, including self-loops.
    Internal,
    /// High to low: present only on the final step.
    Final,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    /// Level moves `(s, t)` realising this edge.
    pub transitions: Vec<(u32, u32)>,
    /// Whether a diagonal (`omega`) step also runs along this edge.
    pub diagonal: bool,
    state: Vec<WalkTuple>,
}

impl Edge {
    pub fn state(&self) -> &[WalkTuple] {
        &self.state
    }
}

/// Outcome of one order-`r` run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub order: usize,
    pub z: f64,
    /// Upper bound on `||T_r||_inf`.
    pub value: f64,
    /// `(b, xi)` with `value = sum xi * m_b(lambda)` (distinct-monomial form).
    pub terms: Vec<(Partition, f64)>,
    /// Closed-form terms, present when tracing.
    pub trace: Option<Vec<TraceTerm>>,
    /// Tuples emitted across all Phase II steps.
    pub tuples_emitted: usize,
    /// Low combination the maximising walk family started from.
    pub start: EnergyCombination,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailBound {
    Finite { ratio: f64, value: f64 },
    Divergent { ratio: f64 },
}

impl TailBound {
    pub fn value(&self) -> Option<f64> {
        match self {
            TailBound::Finite { value, .. } => Some(*value),
            TailBound::Divergent { .. } => None,
        }
    }
}

pub struct Automaton {
    config: ModelConfig,
    cells: Vec<Cell>,
    index: HashMap<EnergyCombination, usize>,
    edges: Vec<Edge>,
    edge_index: BTreeMap<(usize, usize), usize>,
    incoming: Vec<Vec<usize>>,
    min_distance: f64,
    trace: bool,
    pool: Option<rayon::ThreadPool>,
    emitted: usize,
}

type Emissions = Vec<(usize, Vec<WalkTuple>)>;

impl Automaton {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let min_distance = validate_z(cfg)?;
        let combos = enumerate_combinations(cfg.levels(), cfg.subsystems());
        let mut cells = Vec::with_capacity(combos.len());
        let mut index = HashMap::with_capacity(combos.len());
        for (i, n) in combos.into_iter().enumerate() {
            let energy = cfg.energy(&n)?;
            let subspace = classify(&n, cfg)?;
            index.insert(n.clone(), i);
            cells.push(Cell {
                label: n,
                subspace,
                energy,
                distance: (cfg.z() - energy).abs(),
                state: Vec::new(),
            });
        }

        let t = cfg.transitions();
        let levels = cfg.levels();
        let mut moves: BTreeMap<(usize, usize), Vec<(u32, u32)>> = BTreeMap::new();
        for (from, cell) in cells.iter().enumerate() {
            for s in 0..levels {
                for d in 0..levels {
                    if t.count(s, d) == 0 {
                        continue;
                    }
                    let Some(dest) = cell.label.moved(s, d) else {
                        continue;
                    };
                    let to = index[&dest];
                    if edge_kind(cell.subspace, cells[to].subspace).is_some() {
                        moves.entry((from, to)).or_default().push((s as u32, d as u32));
                    }
                }
            }
            if t.omega() > 0.0 && cell.subspace == Subspace::High {
                moves.entry((from, from)).or_default();
            }
        }

        let mut edges = Vec::with_capacity(moves.len());
        let mut edge_index = BTreeMap::new();
        let mut incoming = vec![Vec::new(); cells.len()];
        for ((from, to), transitions) in moves {
            let kind = edge_kind(cells[from].subspace, cells[to].subspace).expect("filtered above");
            let id = edges.len();
            edges.push(Edge {
                from,
                to,
                kind,
                transitions,
                diagonal: from == to && t.omega() > 0.0,
                state: Vec::new(),
            });
            edge_index.insert((from, to), id);
            incoming[to].push(id);
        }

        Ok(Self {
            config: cfg.clone(),
            cells,
            index,
            edges,
            edge_index,
            incoming,
            min_distance,
            trace: false,
            pool: None,
            emitted: 0,
        })
    }

    /// Keeps resolvent denominators on every tuple so results can be printed
    /// in closed form. Denominator histories become part of the merge key.
    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }

    /// Processes cells on `threads` workers. Results do not depend on the count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {threads} workers: {e}")))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn cell_index(&self, n: &EnergyCombination) -> Option<usize> {
        self.index.get(n).copied()
    }

    pub fn edge(&self, from: &EnergyCombination, to: &EnergyCombination) -> Option<&Edge> {
        let key = (self.cell_index(from)?, self.cell_index(to)?);
        self.edge_index.get(&key).map(|&i| &self.edges[i])
    }

    /// `min |z - E(n)|` over high cells.
    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    pub fn total_tuples(&self) -> usize {
        self.cells.iter().map(|c| c.state.len()).sum::<usize>()
            + self.edges.iter().map(|e| e.state.len()).sum::<usize>()
    }

    fn clear(&mut self) {
        for c in &mut self.cells {
            c.state.clear();
        }
        for e in &mut self.edges {
            e.state.clear();
        }
        self.emitted = 0;
    }

    /// Clears all states and seeds the ground cell with the trivial tuple.
    pub fn initialize(&mut self) -> Result<()> {
        let ground = EnergyCombination::ground(self.config.levels(), self.config.subsystems());
        self.initialize_at(&ground)
    }

    /// Clears all states and seeds low cell `start`.
    pub fn initialize_at(&mut self, start: &EnergyCombination) -> Result<()> {
        let idx = self
            .cell_index(start)
            .ok_or_else(|| Error::Config(format!("no cell labelled {start}")))?;
        if self.cells[idx].subspace != Subspace::Low {
            return Err(Error::Config(format!(
                "start cell {start} is not in the low subspace (cutoff {})",
                self.config.cutoff()
            )));
        }
        self.clear();
        self.cells[idx].state = vec![WalkTuple::initial(start, self.trace)];
        Ok(())
    }

    fn low_cells(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].subspace == Subspace::Low)
            .collect()
    }

    fn high_cells(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].subspace == Subspace::High)
            .collect()
    }

    fn take_inbox(&mut self, cell: usize) -> Vec<WalkTuple> {
        let mut out = std::mem::take(&mut self.cells[cell].state);
        for &e in &self.incoming[cell] {
            out.append(&mut self.edges[e].state);
        }
        out
    }

    fn par_map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
            None => items.into_iter().map(f).collect(),
        }
    }

    /// Phase I for one high cell: merge the cell state with its incoming edge
    /// states, then scale by `1/|z - E(n)|`.
    pub fn phase_one(&mut self, cell: usize) -> Result<()> {
        if self.cells[cell].subspace != Subspace::High {
            return Err(Error::Logic(format!(
                "phase I applies the resolvent only on high cells, not {}",
                self.cells[cell].label
            )));
        }
        let inbox = self.take_inbox(cell);
        self.cells[cell].state = absorb(&self.cells[cell], inbox)?;
        Ok(())
    }

    /// Phase II for one cell: every stored tuple takes one step of `V`. Returns
    /// the successors grouped by outgoing edge and clears the cell.
    pub fn phase_two(&mut self, cell: usize, is_final: bool) -> Result<Emissions> {
        let state = std::mem::take(&mut self.cells[cell].state);
        emit(self, cell, &state, is_final)
    }

    fn deliver(&mut self, emissions: Emissions) {
        for (edge, mut tuples) in emissions {
            self.emitted += tuples.len();
            self.edges[edge].state.append(&mut tuples);
        }
    }

    fn phase_one_all(&mut self) -> Result<()> {
        let work: Vec<(usize, Vec<WalkTuple>)> = self
            .high_cells()
            .into_iter()
            .map(|c| (c, self.take_inbox(c)))
            .collect();
        let done = {
            let cells = &self.cells;
            self.par_map(work, |(c, inbox)| absorb(&cells[c], inbox).map(|s| (c, s)))
        };
        for r in done {
            let (c, state) = r?;
            self.cells[c].state = state;
        }
        Ok(())
    }

    fn phase_two_all(&mut self, sources: Vec<usize>, is_final: bool) -> Result<()> {
        let work: Vec<(usize, Vec<WalkTuple>)> = sources
            .into_iter()
            .map(|c| (c, std::mem::take(&mut self.cells[c].state)))
            .collect();
        let out = {
            let this = &*self;
            this.par_map(work, |(c, state)| emit(this, c, &state, is_final))
        };
        for emissions in out {
            self.deliver(emissions?);
        }
        Ok(())
    }

    /// Drives the whole schedule from the current initial state and leaves the
    /// final tuples in the low cells.
    fn evolve(&mut self, order: usize) -> Result<()> {
        let starts: Vec<usize> = self
            .low_cells()
            .into_iter()
            .filter(|&c| !self.cells[c].state.is_empty())
            .collect();
        self.phase_two_all(starts, false)?;
        for _ in 2..order {
            self.phase_one_all()?;
            self.phase_two_all(self.high_cells(), false)?;
        }
        self.phase_one_all()?;
        self.phase_two_all(self.high_cells(), true)?;
        for c in self.low_cells() {
            let inbox = self.take_inbox(c);
            self.cells[c].state = merge(inbox)?;
        }
        Ok(())
    }

    /// Bound on `||T_r||_inf`. With more than one low combination every one of
    /// them is tried as a starting row and the largest bound is returned.
    pub fn run(&mut self, order: usize) -> Result<BoundResult> {
        if order < 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        let mut best: Option<BoundResult> = None;
        for start in self.low_cells() {
            let label = self.cells[start].label.clone();
            let result = self.run_from(&label, order)?;
            if best.as_ref().is_none_or(|b| result.value > b.value) {
                best = Some(result);
            }
        }
        best.ok_or_else(|| Error::Config("model has no low-subspace cell".into()))
    }

    /// Bound on the row sums of `T_r` over the rows whose configuration has
    /// occupation `start`.
    pub fn run_from(&mut self, start: &EnergyCombination, order: usize) -> Result<BoundResult> {
        if order < 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        self.initialize_at(start)?;
        self.evolve(order)?;
        self.collect(start.clone(), order)
    }

    fn collect(&self, start: EnergyCombination, order: usize) -> Result<BoundResult> {
        let lambdas = self.config.transitions().lambdas();
        let mut by_partition: BTreeMap<Partition, Vec<f64>> = BTreeMap::new();
        let mut traced: BTreeMap<(Partition, Vec<(EnergyCombination, u32)>), Vec<f64>> = BTreeMap::new();
        for c in self.low_cells() {
            for t in &self.cells[c].state {
                let factor = arrangement_factor(t);
                let b = t.partition();
                by_partition.entry(b.clone()).or_default().push(t.weight() * factor);
                if let Some(tr) = t.trace() {
                    traced
                        .entry((b.clone(), tr.factors().to_vec()))
                        .or_default()
                        .push(tr.numerator * factor / b.symmetry_factor());
                }
            }
        }
        let terms: Vec<(Partition, f64)> = by_partition
            .into_iter()
            .map(|(b, ws)| (b, pairwise_sum(&ws)))
            .collect();
        let contributions = terms
            .iter()
            .map(|(b, xi)| Ok(xi * eval_monomial(b, lambdas)?))
            .collect::<Result<Vec<f64>>>()?;
        let trace = if self.trace {
            let mut out = Vec::with_capacity(traced.len());
            for ((b, factors), coeffs) in traced {
                let denominators = factors
                    .into_iter()
                    .map(|(n, p)| Ok((n.clone(), self.config.energy(&n)?, p)))
                    .collect::<Result<Vec<_>>>()?;
                out.push(TraceTerm::new(b, pairwise_sum(&coeffs), denominators));
            }
            Some(out)
        } else {
            None
        };
        Ok(BoundResult {
            order,
            z: self.config.z(),
            value: pairwise_sum(&contributions),
            terms,
            trace,
            tuples_emitted: self.emitted,
            start,
        })
    }

    /// Per-step growth bound `B`: `omega` plus the largest row sum of `M`
    /// weighted by the total coupling `sum_i lambda_i`. This bounds the absolute
    /// row sums of `V_{++}` in the unperturbed eigenbasis.
    pub fn step_bound(&self) -> f64 {
        let t = self.config.transitions();
        let levels = self.config.levels();
        let max_row = (0..levels)
            .map(|s| (0..levels).map(|d| t.count(s, d) as f64).sum::<f64>())
            .fold(0.0, f64::max);
        t.omega() + t.lambdas().iter().sum::<f64>() * max_row
    }

    /// Geometric bound on `sum_{r > r_c} ||T_r||` given the bound at `r_c`, with
    /// ratio `q = B / min |z - E(n)|`.
    pub fn tail_bound(&self, bound_at_cutoff_order: f64) -> TailBound {
        tail_from_ratio(self.step_bound() / self.min_distance, bound_at_cutoff_order)
    }
}

pub fn tail_from_ratio(ratio: f64, bound: f64) -> TailBound {
    if ratio < 1.0 {
        TailBound::Finite {
            ratio,
            value: bound * ratio / (1.0 - ratio),
        }
    } else {
        TailBound::Divergent { ratio }
    }
}

fn edge_kind(from: Subspace, to: Subspace) -> Option<EdgeKind> {
    match (from, to) {
        (Subspace::Low, Subspace::High) => Some(EdgeKind::Excitation),
        (Subspace::High, Subspace::High) => Some(EdgeKind::Internal),
        (Subspace::High, Subspace::Low) => Some(EdgeKind::Final),
        (Subspace::Low, Subspace::Low) => None,
    }
}

fn absorb(cell: &Cell, inbox: Vec<WalkTuple>) -> Result<Vec<WalkTuple>> {
    Ok(merge(inbox)?
        .into_iter()
        .map(|t| t.with_resolvent(&cell.label, cell.distance))
        .collect())
}

fn emit(a: &Automaton, cell: usize, state: &[WalkTuple], is_final: bool) -> Result<Emissions> {
    let cfg = &a.config;
    let t = cfg.transitions();
    let levels = cfg.levels();
    let here = &a.cells[cell];
    let mut out: BTreeMap<usize, Vec<WalkTuple>> = BTreeMap::new();
    for tuple in state {
        debug_assert_eq!(tuple.occupation(levels), here.label.counts());
        for class in tuple.classes() {
            let s = class.level as usize;
            for d in 0..levels {
                let count = t.count(s, d);
                if count == 0 {
                    continue;
                }
                if t.neighbor_only() && s.abs_diff(d) > 1 {
                    return Err(Error::Logic(format!("transition {s} -> {d} under a neighbour-only model")));
                }
                let dest_label = here.label.moved(s, d).expect("class is occupied");
                let dest = a.index[&dest_label];
                let lands_low = a.cells[dest].subspace == Subspace::Low;
                if lands_low != is_final {
                    continue;
                }
                let edge = *a.edge_index.get(&(cell, dest)).ok_or_else(|| {
                    Error::Logic(format!("no edge {} -> {}", here.label, dest_label))
                })?;
                let next = tuple
                    .moved(class.level, class.exponent, d as u32)
                    .expect("class is occupied");
                let ways = next.count_of(d as u32, class.exponent + 1) as f64;
                out.entry(edge).or_default().push(next.scaled(count as f64 * ways));
            }
        }
        if t.omega() > 0.0 && !is_final && here.subspace == Subspace::High {
            let edge = a.edge_index[&(cell, cell)];
            out.entry(edge).or_default().push(tuple.clone().scaled(t.omega()));
        }
    }
    Ok(out.into_iter().collect())
}

/// Ratio between the orbit sum of a final slot multiset and `m_b`: the number
/// of level assignments that share one exponent vector. Equals 1 whenever all
/// slots end in the same level.
fn arrangement_factor(t: &WalkTuple) -> f64 {
    fn fact(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }
    let mut by_exponent: BTreeMap<u32, u32> = BTreeMap::new();
    let mut denom = 1.0;
    for c in t.classes() {
        *by_exponent.entry(c.exponent).or_default() += c.count;
        denom *= fact(c.count);
    }
    by_exponent.values().map(|&d| fact(d)).product::<f64>() / denom
}
