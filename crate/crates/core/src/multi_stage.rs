//! Multiple stopping: cluster first-order functions, the backward partition
//! update and the value of the resulting (or any ordered) threshold strategy.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::one_stage::{lambda_fn, solve_increasing, value_at, SolverOptions, StageSpec};
use crate::scale_fn::ScaleContext;

/// Stages in exercise order, each given by its own running payoff difference `f_m` and reward `g_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStageSpec {
    pub stages: Vec<StageSpec>,
}

impl MultiStageSpec {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidSpec("at least one stage is required".into()));
        }
        for s in &stages {
            s.validate()?;
        }
        Ok(Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Combined stage `(f_I, g_I)` of a contiguous index range.
    pub fn cluster_stage(&self, cluster: &Range<usize>) -> StageSpec {
        StageSpec::merge(&self.stages[cluster.clone()])
    }
}

/// Ordered clusters (0-based half-open index ranges) with their thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePartition {
    pub clusters: Vec<Range<usize>>,
    pub thresholds: Vec<f64>,
}

impl StagePartition {
    /// Threshold of every stage, in stage order.
    pub fn per_stage_thresholds(&self) -> Vec<f64> {
        self.clusters.iter().zip(&self.thresholds).flat_map(|(c, &a)| std::iter::repeat_n(a, c.len())).collect()
    }

    /// Checks contiguity, coverage of `start..end` and strictly decreasing thresholds.
    pub fn validate(&self, start: usize, end: usize) -> Result<()> {
        let mut next = start;
        for c in &self.clusters {
            if c.start != next || c.is_empty() {
                return Err(Error::InvalidSpec(format!("clusters {:?} do not tile {start}..{end}", self.clusters)));
            }
            next = c.end;
        }
        if next != end || self.clusters.len() != self.thresholds.len() {
            return Err(Error::InvalidSpec(format!("clusters {:?} do not tile {start}..{end}", self.clusters)));
        }
        if self.thresholds.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InfeasibleThresholds(self.thresholds.clone()));
        }
        Ok(())
    }
}

/// Source of cluster thresholds `A*_I`.
pub trait ThresholdResolver {
    fn threshold(&mut self, cluster: &Range<usize>) -> Result<f64>;
}

/// Resolves cluster thresholds by solving the merged one-stage problem, with caching.
pub struct SolverResolver<'a> {
    spec: &'a MultiStageSpec,
    ctx: &'a ScaleContext,
    opts: SolverOptions,
    cache: HashMap<(usize, usize), f64>,
}

impl<'a> SolverResolver<'a> {
    pub fn new(spec: &'a MultiStageSpec, ctx: &'a ScaleContext, opts: SolverOptions) -> Self {
        Self { spec, ctx, opts, cache: HashMap::new() }
    }

    /// Every cluster threshold computed so far, sorted by cluster.
    pub fn visited(&self) -> Vec<(Range<usize>, f64)> {
        let mut out: Vec<_> = self.cache.iter().map(|(&(s, e), &a)| (s..e, a)).collect();
        out.sort_by_key(|(c, _)| (c.start, c.end));
        out
    }
}

impl ThresholdResolver for SolverResolver<'_> {
    fn threshold(&mut self, cluster: &Range<usize>) -> Result<f64> {
        let key = (cluster.start, cluster.end);
        if let Some(&a) = self.cache.get(&key) {
            return Ok(a);
        }
        let a = solve_cluster_threshold(self.spec, self.ctx, cluster, &self.opts)?;
        self.cache.insert(key, a);
        Ok(a)
    }
}

/// Resolver backed by a fixed table, for replaying published candidate thresholds.
pub struct TableResolver {
    table: HashMap<(usize, usize), f64>,
}

impl TableResolver {
    pub fn new<I: IntoIterator<Item = (Range<usize>, f64)>>(entries: I) -> Self {
        Self { table: entries.into_iter().map(|(c, a)| ((c.start, c.end), a)).collect() }
    }
}

impl ThresholdResolver for TableResolver {
    fn threshold(&mut self, cluster: &Range<usize>) -> Result<f64> {
        self.table
            .get(&(cluster.start, cluster.end))
            .copied()
            .ok_or_else(|| Error::InvalidSpec(format!("no threshold for cluster {cluster:?}")))
    }
}

/// `Lambda_I(A) = sum_{m in I} Lambda_m(A)`.
pub fn lambda_cluster(spec: &MultiStageSpec, ctx: &ScaleContext, cluster: &Range<usize>, a: f64) -> Result<f64> {
    check_cluster(spec, cluster)?;
    spec.stages[cluster.clone()].iter().map(|s| lambda_fn(s, ctx, a)).sum()
}

pub fn solve_cluster_threshold(spec: &MultiStageSpec, ctx: &ScaleContext, cluster: &Range<usize>, opts: &SolverOptions) -> Result<f64> {
    check_cluster(spec, cluster)?;
    Ok(solve_increasing(|a| lambda_cluster(spec, ctx, cluster, a), opts)?.a_star)
}

fn check_cluster(spec: &MultiStageSpec, cluster: &Range<usize>) -> Result<()> {
    if cluster.is_empty() || cluster.end > spec.len() {
        return Err(Error::InvalidSpec(format!("cluster {cluster:?} is not a nonempty subrange of 0..{}", spec.len())));
    }
    Ok(())
}

/// One backward step: extends a partition of `m..M` to `m-1..M` (0-based `m >= 1`).
#[allow(clippy::single_range_in_vec_init)]
pub fn update_partition<R: ThresholdResolver>(resolver: &mut R, partition: &StagePartition, m: usize) -> Result<StagePartition> {
    let end = partition.clusters.last().map_or(m, |c| c.end);
    let n = partition.clusters.len();
    let mut i: usize = 0;
    loop {
        // hat-I = {m-1} joined with the first i clusters
        let hat_end = if i == 0 { m } else { partition.clusters[i - 1].end };
        let hat = (m - 1)..hat_end;
        let a_hat = resolver.threshold(&hat)?;
        if i == n {
            return Ok(StagePartition { clusters: vec![(m - 1)..end], thresholds: vec![a_hat] });
        }
        if a_hat > partition.thresholds[i] {
            let mut clusters = vec![hat];
            clusters.extend(partition.clusters[i..].iter().cloned());
            let mut thresholds = vec![a_hat];
            thresholds.extend_from_slice(&partition.thresholds[i..]);
            return Ok(StagePartition { clusters, thresholds });
        }
        i += 1;
    }
}

/// Runs the backward update from the last stage to the first.
pub fn solve_partition_with<R: ThresholdResolver>(resolver: &mut R, n_stages: usize) -> Result<StagePartition> {
    if n_stages == 0 {
        return Err(Error::InvalidSpec("at least one stage is required".into()));
    }
    let last = (n_stages - 1)..n_stages;
    let a = resolver.threshold(&last)?;
    let mut partition = StagePartition { clusters: vec![last], thresholds: vec![a] };
    for m in (1..n_stages).rev() {
        partition = update_partition(resolver, &partition, m)?;
        log::debug!("partition from stage {}: {:?} {:?}", m, partition.clusters, partition.thresholds);
    }
    Ok(partition)
}

pub fn solve_partition(spec: &MultiStageSpec, ctx: &ScaleContext, opts: &SolverOptions) -> Result<StagePartition> {
    let mut resolver = SolverResolver::new(spec, ctx, *opts);
    solve_partition_with(&mut resolver, spec.len())
}

/// Value of the clustered strategy: the sum of each cluster's one-stage value.
pub fn multi_value(spec: &MultiStageSpec, ctx: &ScaleContext, partition: &StagePartition, x: f64) -> Result<f64> {
    partition.validate(0, spec.len())?;
    let mut total = 0.0;
    for (c, &a) in partition.clusters.iter().zip(&partition.thresholds) {
        total += value_at(&spec.cluster_stage(c), ctx, a, x)?;
    }
    Ok(total)
}

/// Value of stopping stage `m` at the first passage below `thresholds[m]`.
pub fn perturbed_value(spec: &MultiStageSpec, ctx: &ScaleContext, thresholds: &[f64], x: f64) -> Result<f64> {
    check_ordered(spec, thresholds)?;
    spec.stages.iter().zip(thresholds).map(|(s, &a)| value_at(s, ctx, a, x)).sum()
}

pub(crate) fn check_ordered(spec: &MultiStageSpec, thresholds: &[f64]) -> Result<()> {
    if thresholds.len() != spec.len() {
        return Err(Error::DimensionMismatch(format!("{} thresholds for {} stages", thresholds.len(), spec.len())));
    }
    if thresholds.iter().any(|a| a.is_nan()) || thresholds.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InfeasibleThresholds(thresholds.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::one_stage::{solve_threshold, value_optimal};
    use crate::payoffs::{RewardSpec, RunningPayoff};

    fn ctx() -> ScaleContext {
        fixtures::weibull_context(0.05)
    }

    fn table_resolver(c: &[f64; 6]) -> TableResolver {
        TableResolver::new([(0..1, c[0]), (1..2, c[1]), (2..3, c[2]), (0..2, c[3]), (1..3, c[4]), (0..3, c[5])])
    }

    #[test]
    fn table_cases_replay() {
        for case in fixtures::table_cases() {
            let mut res = table_resolver(&case.candidates);
            let p = solve_partition_with(&mut res, 3).unwrap();
            assert_eq!(p.per_stage_thresholds(), case.thresholds.to_vec());
            p.validate(0, 3).unwrap();
        }
    }

    #[test]
    fn case3_update_step() {
        let case = &fixtures::table_cases()[2];
        let mut res = table_resolver(&case.candidates);
        let p = StagePartition { clusters: vec![1..2, 2..3], thresholds: vec![-2.35, -5.67] };
        let out = update_partition(&mut res, &p, 1).unwrap();
        assert_eq!(out.clusters, vec![0..2, 2..3]);
        assert_eq!(out.per_stage_thresholds(), vec![-2.85, -2.85, -5.67]);
    }

    #[test]
    fn ordered_singletons_prepend() {
        let mut res = TableResolver::new([(0..1, 1.0), (1..2, 0.0)]);
        let p = solve_partition_with(&mut res, 2).unwrap();
        assert_eq!(p.clusters, vec![0..1, 1..2]);
    }

    #[test]
    fn ties_merge() {
        let mut res = TableResolver::new([(0..1, 0.0), (1..2, 0.0), (0..2, 0.0)]);
        let p = solve_partition_with(&mut res, 2).unwrap();
        assert_eq!(p.clusters, vec![0..2]);
    }

    #[test]
    fn single_stage_matches_one_stage() {
        let c = ctx();
        let stage = fixtures::one_stage('a', 3, 0.05);
        let spec = MultiStageSpec::new(vec![stage.clone()]).unwrap();
        let p = solve_partition(&spec, &c, &SolverOptions::default()).unwrap();
        let sol = solve_threshold(&stage, &c, &SolverOptions::default()).unwrap();
        assert_eq!(p.thresholds, vec![sol.a_star]);
        for &x in &[-4.0, -1.0, 1.0] {
            let u = multi_value(&spec, &c, &p, x).unwrap();
            assert!((u - value_optimal(&stage, &c, &sol, x).unwrap()).abs() < 1e-9 * u.abs().max(1.0));
        }
    }

    #[test]
    fn identical_stages() {
        let c = ctx();
        let stage = fixtures::one_stage('a', 2, 0.05);
        let spec = MultiStageSpec::new(vec![stage.clone(), stage.clone()]).unwrap();
        let opts = SolverOptions::default();
        let a1 = solve_cluster_threshold(&spec, &c, &(0..1), &opts).unwrap();
        let a12 = solve_cluster_threshold(&spec, &c, &(0..2), &opts).unwrap();
        assert!((a1 - a12).abs() < 1e-9);
        let p = solve_partition(&spec, &c, &opts).unwrap();
        assert_eq!(p.clusters, vec![0..2]);
        let x = p.thresholds[0] - 0.5;
        let u = multi_value(&spec, &c, &p, x).unwrap();
        assert!((u - 2.0 * stage.g.eval(x)).abs() < 1e-12);
    }

    #[test]
    fn cluster_lambda_is_additive() {
        let c = ctx();
        let spec = MultiStageSpec::new(fixtures::table_cases()[0].stages()).unwrap();
        for &a in &[-3.0, -1.0, 0.5] {
            let sum: f64 = (0..3).map(|m| lambda_cluster(&spec, &c, &(m..m + 1), a).unwrap()).sum();
            let all = lambda_cluster(&spec, &c, &(0..3), a).unwrap();
            assert!((sum - all).abs() < 1e-10 * all.abs().max(1.0));
            let merged = lambda_fn(&spec.cluster_stage(&(0..3)), &c, a).unwrap();
            assert!((merged - all).abs() < 1e-10 * all.abs().max(1.0));
        }
    }

    #[test]
    fn perturbed_value_contract() {
        let c = ctx();
        let spec = MultiStageSpec::new(fixtures::table_cases()[3].stages()).unwrap();
        let p = solve_partition(&spec, &c, &SolverOptions::default()).unwrap();
        let th = p.per_stage_thresholds();
        for &x in &[-4.0, -2.0, 0.0, 2.0] {
            let u = multi_value(&spec, &c, &p, x).unwrap();
            assert!((perturbed_value(&spec, &c, &th, x).unwrap() - u).abs() < 1e-10 * u.abs().max(1.0));
        }
        assert!(matches!(perturbed_value(&spec, &c, &[0.0, 1.0, 0.0], 0.0), Err(Error::InfeasibleThresholds(_))));
    }

    #[test]
    fn zero_stage_appended() {
        let c = ctx();
        let opts = SolverOptions::default();
        let stages = fixtures::table_cases()[3].stages();
        let base = solve_partition(&MultiStageSpec::new(stages.clone()).unwrap(), &c, &opts).unwrap();
        let mut more = stages.clone();
        more.push(StageSpec::new(RunningPayoff::zero(), RewardSpec::constant(0.0)));
        let ext = solve_partition(&MultiStageSpec::new(more).unwrap(), &c, &opts).unwrap();
        let a = base.per_stage_thresholds();
        let b = ext.per_stage_thresholds();
        for (x, y) in a.iter().zip(&b) {
            if x.is_finite() {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
