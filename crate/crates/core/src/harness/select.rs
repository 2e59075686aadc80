//! Test selection strategies.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::probe::{ProbeReport, TestCaseRecord};
use super::HarnessError;

pub const DEFAULT_T: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "THM")]
    Thm,
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "FRS")]
    Frs,
    #[serde(rename = "IPS")]
    Ips,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Thm,
        StrategyKind::Rs,
        StrategyKind::Ss,
        StrategyKind::Frs,
        StrategyKind::Ips,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Thm => "THM",
            StrategyKind::Rs => "RS",
            StrategyKind::Ss => "SS",
            StrategyKind::Frs => "FRS",
            StrategyKind::Ips => "IPS",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::InvalidStrategy(format!("unknown strategy {s:?}")))
    }
}

/// Test budget: a positive count, or every failing test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Budget {
    Count(u32),
    All,
}

impl Budget {
    pub fn limit(self, available: usize) -> usize {
        match self {
            Budget::Count(t) => (t as usize).min(available),
            Budget::All => available,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(t) => write!(f, "{t}"),
            Budget::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for Budget {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Budget::All);
        }
        match s.parse::<u32>() {
            Ok(t) if t >= 1 => Ok(Budget::Count(t)),
            _ => Err(HarnessError::InvalidStrategy(format!(
                "budget must be >= 1 or ALL, got {s:?}"
            ))),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::Count(t) => s.serialize_u32(*t),
            Budget::All => s.serialize_str("ALL"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string().parse::<Budget>(),
            Raw::S(s) => s.parse::<Budget>(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub budget_t: Budget,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        SelectionStrategy {
            kind: StrategyKind::Thm,
            budget_t: Budget::Count(DEFAULT_T),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallerCluster {
    pub direct_caller: String,
    pub members: Vec<TestCaseRecord>,
    pub min_depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub node_id: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub strategy: SelectionStrategy,
    pub chosen: Vec<TestCaseRecord>,
    #[serde(default)]
    pub clusters: Vec<CallerCluster>,
    pub rationale: Vec<Rationale>,
    /// The report had no stub failures at all.
    #[serde(default)]
    pub no_failing_tests: bool,
}

impl SelectionPlan {
    pub fn node_ids(&self) -> Vec<String> {
        self.chosen.iter().map(|r| r.node_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Checks the invariants every plan must satisfy against its report.
    pub fn check(&self, report: &ProbeReport) -> Result<(), String> {
        let mut seen = HashSet::new();
        for r in &self.chosen {
            if !seen.insert(&r.node_id) {
                return Err(format!("duplicate {}", r.node_id));
            }
            match report.record(&r.node_id) {
                Some(orig) if orig.outcome == super::Outcome::StubFailure => {}
                _ => return Err(format!("{} is not a stub failure in the report", r.node_id)),
            }
        }
        if let Budget::Count(t) = self.strategy.budget_t {
            if self.chosen.len() > t as usize {
                return Err(format!("{} chosen with budget {t}", self.chosen.len()));
            }
        }
        Ok(())
    }
}

fn depth_key(r: &TestCaseRecord) -> (u32, &str) {
    (r.chain_depth, r.node_id.as_str())
}

fn caller_of(r: &TestCaseRecord) -> String {
    r.direct_caller.clone().unwrap_or_else(|| r.node_id.clone())
}

/// Stub failures grouped by direct caller, shallowest cluster first.
pub fn cluster_by_caller(report: &ProbeReport) -> Vec<CallerCluster> {
    let mut groups: BTreeMap<String, Vec<TestCaseRecord>> = BTreeMap::new();
    for r in report.stub_failures() {
        groups.entry(caller_of(r)).or_default().push(r.clone());
    }
    let mut clusters: Vec<CallerCluster> = groups
        .into_iter()
        .map(|(direct_caller, mut members)| {
            members.sort_by(|a, b| depth_key(a).cmp(&depth_key(b)));
            let min_depth = members[0].chain_depth;
            CallerCluster {
                direct_caller,
                members,
                min_depth,
            }
        })
        .collect();
    clusters.sort_by(|a, b| (a.min_depth, &a.direct_caller).cmp(&(b.min_depth, &b.direct_caller)));
    clusters
}

fn empty_plan(strategy: SelectionStrategy, no_failing_tests: bool) -> SelectionPlan {
    SelectionPlan {
        strategy,
        chosen: Vec::new(),
        clusters: Vec::new(),
        rationale: Vec::new(),
        no_failing_tests,
    }
}

fn sorted_pool(report: &ProbeReport) -> Vec<&TestCaseRecord> {
    let mut pool: Vec<&TestCaseRecord> = report.stub_failures().collect();
    pool.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    pool
}

fn all_plan(strategy: SelectionStrategy, report: &ProbeReport, clusters: Vec<CallerCluster>) -> SelectionPlan {
    let chosen: Vec<TestCaseRecord> = sorted_pool(report).into_iter().cloned().collect();
    let rationale = chosen
        .iter()
        .map(|r| Rationale {
            node_id: r.node_id.clone(),
            note: "budget ALL".to_string(),
        })
        .collect();
    SelectionPlan {
        strategy,
        chosen,
        clusters,
        rationale,
        no_failing_tests: false,
    }
}

/// One representative per caller cluster, shallowest clusters first, then
/// the shortest remaining chains until the budget is spent.
pub fn select_thm(report: &ProbeReport, budget: Budget) -> SelectionPlan {
    let strategy = SelectionStrategy {
        kind: StrategyKind::Thm,
        budget_t: budget,
        rng_seed: 0,
    };
    let clusters = cluster_by_caller(report);
    if clusters.is_empty() {
        return empty_plan(strategy, true);
    }
    if budget == Budget::All {
        return all_plan(strategy, report, clusters);
    }
    let total: usize = clusters.iter().map(|c| c.members.len()).sum();
    let limit = budget.limit(total);
    let mut chosen = Vec::new();
    let mut rationale = Vec::new();
    for (i, cluster) in clusters.iter().enumerate().take(limit) {
        let head = &cluster.members[0];
        rationale.push(Rationale {
            node_id: head.node_id.clone(),
            note: format!(
                "cluster {i} head: caller {}, depth {}",
                cluster.direct_caller, head.chain_depth
            ),
        });
        chosen.push(head.clone());
    }
    if chosen.len() < limit {
        let taken: HashSet<String> = chosen.iter().map(|r| r.node_id.clone()).collect();
        let mut rest: Vec<(usize, &TestCaseRecord)> = clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.members.iter().map(move |m| (i, m)))
            .filter(|(_, m)| !taken.contains(&m.node_id))
            .collect();
        rest.sort_by(|a, b| depth_key(a.1).cmp(&depth_key(b.1)));
        for (i, r) in rest.into_iter().take(limit - chosen.len()) {
            rationale.push(Rationale {
                node_id: r.node_id.clone(),
                note: format!("shortest-chain fill from cluster {i}, depth {}", r.chain_depth),
            });
            chosen.push(r.clone());
        }
    }
    SelectionPlan {
        strategy,
        chosen,
        clusters,
        rationale,
        no_failing_tests: false,
    }
}

fn sample_plan(
    strategy: SelectionStrategy,
    report: &ProbeReport,
    pool: Vec<&TestCaseRecord>,
    label: &str,
) -> SelectionPlan {
    if report.stub_failures().next().is_none() {
        return empty_plan(strategy, true);
    }
    if strategy.budget_t == Budget::All {
        return all_plan(strategy, report, Vec::new());
    }
    let amount = strategy.budget_t.limit(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.rng_seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), amount);
    let mut chosen = Vec::new();
    let mut rationale = Vec::new();
    for (draw, idx) in picks.into_iter().enumerate() {
        let r = pool[idx];
        rationale.push(Rationale {
            node_id: r.node_id.clone(),
            note: format!("{label} draw {draw} (seed {})", strategy.rng_seed),
        });
        chosen.push(r.clone());
    }
    SelectionPlan {
        strategy,
        chosen,
        clusters: Vec::new(),
        rationale,
        no_failing_tests: false,
    }
}

/// Seeded uniform sample of stub failures.
pub fn select_rs(report: &ProbeReport, budget: Budget, seed: u64) -> SelectionPlan {
    let strategy = SelectionStrategy {
        kind: StrategyKind::Rs,
        budget_t: budget,
        rng_seed: seed,
    };
    sample_plan(strategy, report, sorted_pool(report), "random")
}

pub fn is_failure_revealing(record: &TestCaseRecord) -> bool {
    record.assertion_bearing
}

/// Seeded uniform sample of the failure-revealing stub failures. A short
/// pool is returned whole rather than padded.
pub fn select_frs(report: &ProbeReport, budget: Budget, seed: u64) -> SelectionPlan {
    let strategy = SelectionStrategy {
        kind: StrategyKind::Frs,
        budget_t: budget,
        rng_seed: seed,
    };
    let pool = sorted_pool(report)
        .into_iter()
        .filter(|r| is_failure_revealing(r))
        .collect();
    sample_plan(strategy, report, pool, "failure-revealing")
}

fn ranked_plan<K: Ord>(
    strategy: SelectionStrategy,
    report: &ProbeReport,
    key: impl Fn(&TestCaseRecord) -> K,
    label: impl Fn(&TestCaseRecord) -> String,
) -> SelectionPlan {
    let mut pool = sorted_pool(report);
    if pool.is_empty() {
        return empty_plan(strategy, true);
    }
    if strategy.budget_t == Budget::All {
        return all_plan(strategy, report, Vec::new());
    }
    pool.sort_by_key(|r| key(r));
    let limit = strategy.budget_t.limit(pool.len());
    let chosen: Vec<TestCaseRecord> = pool.into_iter().take(limit).cloned().collect();
    let rationale = chosen
        .iter()
        .enumerate()
        .map(|(rank, r)| Rationale {
            node_id: r.node_id.clone(),
            note: format!("rank {rank} by {}", label(r)),
        })
        .collect();
    SelectionPlan {
        strategy,
        chosen,
        clusters: Vec::new(),
        rationale,
        no_failing_tests: false,
    }
}

/// Lowest cyclomatic complexity first.
pub fn select_ss(report: &ProbeReport, budget: Budget) -> SelectionPlan {
    let strategy = SelectionStrategy {
        kind: StrategyKind::Ss,
        budget_t: budget,
        rng_seed: 0,
    };
    ranked_plan(
        strategy,
        report,
        |r| (r.cyclomatic_complexity, r.node_id.clone()),
        |r| format!("complexity {}", r.cyclomatic_complexity),
    )
}

/// Shortest call chain first.
pub fn select_ips(report: &ProbeReport, budget: Budget) -> SelectionPlan {
    let strategy = SelectionStrategy {
        kind: StrategyKind::Ips,
        budget_t: budget,
        rng_seed: 0,
    };
    ranked_plan(
        strategy,
        report,
        |r| (r.chain_depth, r.node_id.clone()),
        |r| format!("depth {}", r.chain_depth),
    )
}

pub fn select(report: &ProbeReport, strategy: &SelectionStrategy) -> SelectionPlan {
    match strategy.kind {
        StrategyKind::Thm => select_thm(report, strategy.budget_t),
        StrategyKind::Rs => select_rs(report, strategy.budget_t, strategy.rng_seed),
        StrategyKind::Ss => select_ss(report, strategy.budget_t),
        StrategyKind::Frs => select_frs(report, strategy.budget_t, strategy.rng_seed),
        StrategyKind::Ips => select_ips(report, strategy.budget_t),
    }
}
