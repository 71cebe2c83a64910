//! Partitions, monomial symmetric polynomials and the canonical walk tuple
//! `(c~, b, xi, mu)` carried between automaton cells.
//!
//! A tuple stands for a class of walks that agree up to relabelling of the
//! subsystems. Only two things about a slot (subsystem) matter for the future of
//! such a class: the level it currently sits in and how many times `V` has acted
//! on it. The canonical form is therefore the multiset of `(level, exponent)`
//! pairs, stored as run-length encoded [`SlotClass`]es ordered by level and then
//! exponent, both descending. Untouched slots have exponent 0 and so sort last
//! within their level.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::format_f64;
use crate::error::{Error, Result};
use crate::model::EnergyCombination;

/// Non-decreasing list of positive exponents.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Partition(Vec<u32>);

impl Partition {
    /// Sorts `parts` into non-decreasing order; zero parts are rejected.
    pub fn new(mut parts: Vec<u32>) -> Result<Self> {
        if parts.contains(&0) {
            return Err(Error::CorruptState("partition parts must be positive".into()));
        }
        parts.sort_unstable();
        Ok(Self(parts))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn parts(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of the parts, i.e. the total number of `V` actions recorded.
    pub fn weight(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Multiplicities of each distinct part value, in increasing value order.
    pub fn multiplicities(&self) -> Vec<(u32, usize)> {
        let mut out: Vec<(u32, usize)> = Vec::new();
        for &p in &self.0 {
            match out.last_mut() {
                Some((v, c)) if *v == p => *c += 1,
                _ => out.push((p, 1)),
            }
        }
        out
    }

    /// `prod_v (mult_v)!`: the ratio between the permutation-sum form of
    /// `m_b` (ordered selections of variables) and the distinct-monomial form.
    pub fn symmetry_factor(&self) -> f64 {
        self.multiplicities()
            .iter()
            .map(|&(_, c)| (1..=c).map(|k| k as f64).product::<f64>())
            .product()
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, ")")
    }
}

/// Monomial symmetric polynomial `m_b(lambda)`: every distinct monomial whose
/// exponent multiset is `b` appears exactly once.
///
/// Evaluated by a sweep over the variables that tracks how many parts of each
/// distinct value are still unassigned, so equal parts are never distinguished.
pub fn eval_monomial(b: &Partition, lambdas: &[f64]) -> Result<f64> {
    if b.len() > lambdas.len() {
        return Err(Error::Arity {
            parts: b.len(),
            variables: lambdas.len(),
        });
    }
    let groups = b.multiplicities();
    let mut states: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    states.insert(groups.iter().map(|&(_, c)| c).collect(), 1.0);
    for &x in lambdas {
        let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (remaining, acc) in states {
            for (j, &(value, _)) in groups.iter().enumerate() {
                if remaining[j] == 0 {
                    continue;
                }
                let mut r = remaining.clone();
                r[j] -= 1;
                *next.entry(r).or_insert(0.0) += acc * x.powi(value as i32);
            }
            *next.entry(remaining).or_insert(0.0) += acc;
        }
        states = next;
    }
    let done = vec![0; groups.len()];
    Ok(states.get(&done).copied().unwrap_or(0.0))
}

/// The permutation-sum form: a sum over ordered selections of `k` distinct
/// variables, so a monomial with repeated exponents is counted once per
/// ordering of its equal parts.
pub fn eval_ordered(b: &Partition, lambdas: &[f64]) -> Result<f64> {
    Ok(eval_monomial(b, lambdas)? * b.symmetry_factor())
}

/// A run of identical slots: `count` subsystems at `level` that have each been
/// acted on `exponent` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotClass {
    pub level: u32,
    pub exponent: u32,
    pub count: u32,
}

/// Resolvent denominators collected along a walk, kept when tracing so a final
/// term can be printed in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenomTrace {
    /// `xi` with the resolvent factors left out: products of `M_st`, `omega`
    /// and slot multiplicities.
    pub numerator: f64,
    factors: Vec<(EnergyCombination, u32)>,
}

impl DenomTrace {
    pub fn new() -> Self {
        Self {
            numerator: 1.0,
            factors: Vec::new(),
        }
    }

    pub fn factors(&self) -> &[(EnergyCombination, u32)] {
        &self.factors
    }

    /// Records one more factor `1/|z - E(n)|`.
    pub fn push(&mut self, n: &EnergyCombination) {
        match self.factors.binary_search_by(|(c, _)| c.cmp(n)) {
            Ok(i) => self.factors[i].1 += 1,
            Err(i) => self.factors.insert(i, (n.clone(), 1)),
        }
    }
}

impl Default for DenomTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// Canonical 4-tuple `(c~, b, xi, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkTuple {
    classes: Vec<SlotClass>,
    weight: f64,
    trace: Option<DenomTrace>,
}

/// Merge key: canonical slots plus, in trace mode, the denominator history.
pub type TupleKey = (Vec<SlotClass>, Option<Vec<(EnergyCombination, u32)>>);

impl WalkTuple {
    /// Builds a canonical tuple from slot classes given in any order.
    pub fn from_classes(mut classes: Vec<SlotClass>, weight: f64, trace: Option<DenomTrace>) -> Self {
        classes.retain(|c| c.count > 0);
        classes.sort_unstable_by(|a, b| (b.level, b.exponent).cmp(&(a.level, a.exponent)));
        let mut merged: Vec<SlotClass> = Vec::with_capacity(classes.len());
        for c in classes {
            match merged.last_mut() {
                Some(last) if last.level == c.level && last.exponent == c.exponent => last.count += c.count,
                _ => merged.push(c),
            }
        }
        Self {
            classes: merged,
            weight,
            trace,
        }
    }

    /// The starting tuple for a walk beginning at combination `n`: every slot
    /// untouched, empty partition, `xi = 1`.
    pub fn initial(n: &EnergyCombination, trace: bool) -> Self {
        let classes = n
            .counts()
            .iter()
            .enumerate()
            .map(|(level, &count)| SlotClass {
                level: level as u32,
                exponent: 0,
                count,
            })
            .collect();
        Self::from_classes(classes, 1.0, trace.then(DenomTrace::new))
    }

    pub fn classes(&self) -> &[SlotClass] {
        &self.classes
    }

    /// `xi`.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn trace(&self) -> Option<&DenomTrace> {
        self.trace.as_ref()
    }

    pub fn slot_count(&self) -> usize {
        self.classes.iter().map(|c| c.count as usize).sum()
    }

    /// `c~`: slot levels in canonical order (descending).
    pub fn reduced_config(&self) -> Vec<u32> {
        self.expanded().map(|(level, _)| level).collect()
    }

    /// `b`: exponents of the touched slots, non-decreasing.
    pub fn partition(&self) -> Partition {
        let mut parts: Vec<u32> = self
            .expanded()
            .map(|(_, e)| e)
            .filter(|&e| e > 0)
            .collect();
        parts.sort_unstable();
        Partition(parts)
    }

    /// `mu`: for each slot of `c~`, the index of its part in `b` (`None` for
    /// untouched slots). Equal parts are handed out in slot order.
    pub fn mapping(&self) -> Vec<Option<usize>> {
        let b = self.partition();
        let mut used = vec![false; b.len()];
        self.expanded()
            .map(|(_, e)| {
                if e == 0 {
                    return None;
                }
                let start = b.0.partition_point(|&p| p < e);
                let idx = (start..b.len())
                    .find(|&i| !used[i])
                    .expect("partition built from the same slots");
                used[idx] = true;
                Some(idx)
            })
            .collect()
    }

    /// Number of subsystems in each of `levels` levels.
    pub fn occupation(&self, levels: usize) -> Vec<u32> {
        let mut counts = vec![0; levels];
        for c in &self.classes {
            if (c.level as usize) < levels {
                counts[c.level as usize] += c.count;
            }
        }
        counts
    }

    pub fn key(&self) -> TupleKey {
        (
            self.classes.clone(),
            self.trace.as_ref().map(|t| t.factors.clone()),
        )
    }

    /// Count of slots with the given level and exponent.
    pub fn count_of(&self, level: u32, exponent: u32) -> u32 {
        self.classes
            .iter()
            .find(|c| c.level == level && c.exponent == exponent)
            .map_or(0, |c| c.count)
    }

    /// Multiplies `xi` (and the traced numerator) by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.weight *= factor;
        if let Some(t) = self.trace.as_mut() {
            t.numerator *= factor;
        }
        self
    }

    /// Applies one resolvent factor `1/|z - E(n)|`.
    pub fn with_resolvent(mut self, n: &EnergyCombination, distance: f64) -> Self {
        self.weight /= distance;
        if let Some(t) = self.trace.as_mut() {
            t.push(n);
        }
        self
    }

    /// The tuple after `V` moves one slot of class `(from_level, exponent)` to
    /// `to_level`. The moved slot's exponent goes up by one.
    pub fn moved(&self, from_level: u32, exponent: u32, to_level: u32) -> Option<Self> {
        let idx = self
            .classes
            .iter()
            .position(|c| c.level == from_level && c.exponent == exponent)?;
        let mut classes = self.classes.clone();
        classes[idx].count -= 1;
        classes.push(SlotClass {
            level: to_level,
            exponent: exponent + 1,
            count: 1,
        });
        Some(Self::from_classes(classes, self.weight, self.trace.clone()))
    }

    fn expanded(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.classes
            .iter()
            .flat_map(|c| std::iter::repeat_n((c.level, c.exponent), c.count as usize))
    }
}

/// Explicit, possibly non-canonical `(c~, b, xi, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTuple {
    pub reduced_config: Vec<u32>,
    pub partition: Partition,
    pub mapping: Vec<Option<usize>>,
    pub weight: f64,
}

impl From<&WalkTuple> for RawTuple {
    fn from(t: &WalkTuple) -> Self {
        Self {
            reduced_config: t.reduced_config(),
            partition: t.partition(),
            mapping: t.mapping(),
            weight: t.weight(),
        }
    }
}

/// Returns the canonical representative of `raw`. Fails if `mu` is not a
/// bijection from the touched slots onto the parts of `b`.
pub fn canonicalize(raw: &RawTuple) -> Result<WalkTuple> {
    if raw.mapping.len() != raw.reduced_config.len() {
        return Err(Error::CorruptState(format!(
            "mapping covers {} slots but c~ has {}",
            raw.mapping.len(),
            raw.reduced_config.len()
        )));
    }
    if !(raw.weight.is_finite() && raw.weight >= 0.0) {
        return Err(Error::CorruptState(format!("weight {} is not a nonnegative real", raw.weight)));
    }
    let parts = raw.partition.parts();
    if parts.windows(2).any(|w| w[0] > w[1]) || parts.contains(&0) {
        return Err(Error::CorruptState(format!("partition {} is not canonical", raw.partition)));
    }
    let mut hit = vec![false; parts.len()];
    let mut classes = Vec::with_capacity(raw.reduced_config.len());
    for (&level, slot) in raw.reduced_config.iter().zip(&raw.mapping) {
        let exponent = match *slot {
            None => 0,
            Some(j) if j >= parts.len() => {
                return Err(Error::CorruptState(format!("mapping points at missing part {j}")));
            }
            Some(j) if hit[j] => {
                return Err(Error::CorruptState(format!("part {j} is mapped from two slots")));
            }
            Some(j) => {
                hit[j] = true;
                parts[j]
            }
        };
        classes.push(SlotClass {
            level,
            exponent,
            count: 1,
        });
    }
    if let Some(j) = hit.iter().position(|h| !h) {
        return Err(Error::CorruptState(format!("part {j} has no slot")));
    }
    Ok(WalkTuple::from_classes(classes, raw.weight, None))
}

/// Combines tuples with equal keys by summing `xi`. All tuples must describe the
/// same energy combination. Output is sorted by key.
pub fn merge(tuples: Vec<WalkTuple>) -> Result<Vec<WalkTuple>> {
    let Some(first) = tuples.first() else {
        return Ok(Vec::new());
    };
    let levels = tuples
        .iter()
        .flat_map(|t| t.classes.iter().map(|c| c.level as usize + 1))
        .max()
        .unwrap_or(0);
    let host = first.occupation(levels);
    let mut groups: BTreeMap<TupleKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in tuples {
        if t.occupation(levels) != host {
            return Err(Error::CorruptState(format!(
                "merging tuples from different cells: {:?} vs {:?}",
                t.occupation(levels),
                host
            )));
        }
        let key = t.key();
        let entry = groups.entry(key).or_default();
        entry.0.push(t.weight);
        if let Some(tr) = &t.trace {
            entry.1.push(tr.numerator);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((classes, factors), (weights, numerators))| WalkTuple {
            classes,
            weight: pairwise_sum(&weights),
            trace: factors.map(|factors| DenomTrace {
                numerator: pairwise_sum(&numerators),
                factors,
            }),
        })
        .collect())
}

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// One closed-form term of a traced bound:
/// `coeff * m_{(b)} / |(z-E_a)^p (z-E_b)^q|`.
///
/// The coefficient is normalized against the permutation-sum form of `m_b`
/// (see [`eval_ordered`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTerm {
    pub partition: Partition,
    pub coefficient: f64,
    /// `(combination, energy, exponent)`, sorted by energy then combination.
    pub denominators: Vec<(EnergyCombination, f64, u32)>,
}

impl TraceTerm {
    pub fn new(partition: Partition, coefficient: f64, mut denominators: Vec<(EnergyCombination, f64, u32)>) -> Self {
        denominators.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Self {
            partition,
            coefficient,
            denominators,
        }
    }

    /// Numerical value at `z` for couplings `lambdas`.
    pub fn evaluate(&self, z: f64, lambdas: &[f64]) -> Result<f64> {
        let denom: f64 = self
            .denominators
            .iter()
            .map(|(_, e, p)| (z - e).abs().powi(*p as i32))
            .product();
        Ok(self.coefficient * eval_ordered(&self.partition, lambdas)? / denom)
    }
}

impl fmt::Display for TraceTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} * m_{{{}}}", format_f64(self.coefficient), self.partition)?;
        if self.denominators.is_empty() {
            return Ok(());
        }
        write!(f, " / |")?;
        for (i, (n, _, p)) in self.denominators.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "(z-{})", n.energy_label())?;
            if *p > 1 {
                write!(f, "^{p}")?;
            }
        }
        write!(f, "|")
    }
}
