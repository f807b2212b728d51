//! Three-family change detection between consecutive stages.
//!
//! - upper tail: peaks flattened, mean(prev) > mean(curr) for all s ≤ τ (maxP)
//! - lower tail: valleys filled, mean(prev) < mean(curr) for all s ≥ 1 − τ (maxP)
//! - variance: spread reduced, var(prev) > var(curr) on at least half the grid (medP)
//!
//! Each family is tested at α/3. A family p-value in (α/3, 2α/3] is
//! reported as marginal.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::permutation::{westfall_young, FamilyStatistic, FamilyTestResult, PermutationConfig};
use crate::roughness::{QuantileGrid, StageSample};
use crate::stats::{Direction, MeanStatistic, PointwiseTest};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionConfig {
    /// Overall type-I level of the three-family rule.
    pub alpha: f64,
    pub perm: PermutationConfig,
    pub grid: QuantileGrid,
    pub mean_statistic: MeanStatistic,
    /// Count a marginal outcome as a reason to keep polishing.
    pub marginal_continues: bool,
    /// The current tool is already the finest available.
    pub finest_tool: bool,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            alpha: DEFAULT_ALPHA,
            perm: PermutationConfig::default(),
            grid: QuantileGrid::default(),
            mean_statistic: MeanStatistic::Welch,
            marginal_continues: true,
            finest_tool: false,
        }
    }
}

impl DecisionConfig {
    pub fn tau(&self) -> f64 {
        self.grid.tau()
    }

    pub fn significant_threshold(&self) -> f64 {
        self.alpha / 3.0
    }

    pub fn marginal_threshold(&self) -> f64 {
        2.0 * self.alpha / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    fn check_samples(&self, prev: &StageSample, curr: &StageSample) -> Result<()> {
        self.validate()?;
        if prev.grid() != &self.grid || curr.grid() != &self.grid {
            return Err(Error::invalid("stage samples were not built on the configured grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyVerdict {
    NotSignificant,
    Marginal,
    Significant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    NoImprovement,
    ImprovementMarginal,
    ImprovementDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Continue,
    CleanOrChangeTool,
    StopIfFinest,
}

/// Band a family p-value: `p ≤ α/3` significant, `p ≤ 2α/3` marginal.
pub fn band(p: f64, alpha: f64) -> FamilyVerdict {
    if p <= alpha / 3.0 {
        FamilyVerdict::Significant
    } else if p <= 2.0 * alpha / 3.0 {
        FamilyVerdict::Marginal
    } else {
        FamilyVerdict::NotSignificant
    }
}

/// Overall verdict from the three corrected family p-values.
pub fn combine(p_values: [f64; 3], alpha: f64) -> Overall {
    match p_values.iter().map(|&p| band(p, alpha)).max() {
        Some(FamilyVerdict::Significant) => Overall::ImprovementDetected,
        Some(FamilyVerdict::Marginal) => Overall::ImprovementMarginal,
        _ => Overall::NoImprovement,
    }
}

pub fn recommend(overall: Overall, marginal_continues: bool, finest_tool: bool) -> Recommendation {
    let proceed = match overall {
        Overall::ImprovementDetected => true,
        Overall::ImprovementMarginal => marginal_continues,
        Overall::NoImprovement => false,
    };
    match (proceed, finest_tool) {
        (true, _) => Recommendation::Continue,
        (false, true) => Recommendation::StopIfFinest,
        (false, false) => Recommendation::CleanOrChangeTool,
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn ser_sig6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig6(*x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutcome {
    pub statistic_kind: FamilyStatistic,
    #[serde(serialize_with = "ser_sig6")]
    pub observed_stat: f64,
    #[serde(serialize_with = "ser_sig6")]
    pub corrected_p: f64,
    pub verdict: FamilyVerdict,
    pub n_used: u64,
    pub degenerate_points: usize,
}

impl FamilyOutcome {
    pub fn new(result: &FamilyTestResult, alpha: f64) -> Self {
        let corrected_p = round_sig6(result.corrected_p);
        FamilyOutcome {
            statistic_kind: result.stat_kind,
            observed_stat: round_sig6(result.observed_stat),
            corrected_p,
            verdict: band(corrected_p, alpha),
            n_used: result.n_used,
            degenerate_points: result.degenerate_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub prev: String,
    pub curr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Families {
    pub upper_tail: FamilyOutcome,
    pub lower_tail: FamilyOutcome,
    pub variance: FamilyOutcome,
}

impl Families {
    pub fn p_values(&self) -> [f64; 3] {
        [
            self.upper_tail.corrected_p,
            self.lower_tail.corrected_p,
            self.variance.corrected_p,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub n_permutations: usize,
    pub exhaustive: bool,
    pub grid_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub s_max: f64,
    pub mean_statistic: MeanStatistic,
    pub marginal_continues: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub stages: Stages,
    pub families: Families,
    pub overall: Overall,
    pub recommendation: Recommendation,
    pub provenance: Provenance,
    pub tool: ToolInfo,
}

fn family_seed(base: u64, family: u64) -> u64 {
    base ^ family
}

fn run_family(
    prev: &StageSample,
    curr: &StageSample,
    cfg: &DecisionConfig,
    test: PointwiseTest,
    domain: Vec<usize>,
    kind: FamilyStatistic,
    family: u64,
) -> Result<FamilyTestResult> {
    cfg.check_samples(prev, curr)?;
    if domain.is_empty() {
        return Err(Error::invalid("family test domain is empty for this grid and tau"));
    }
    let perm = cfg.perm.with_seed(family_seed(cfg.perm.seed, family));
    westfall_young(prev, curr, test, &domain, kind, &perm)
}

/// Peaks flattened: mean(prev) > mean(curr) on s ≤ τ, maxP.
pub fn test_upper_tail(prev: &StageSample, curr: &StageSample, cfg: &DecisionConfig) -> Result<FamilyTestResult> {
    let test = PointwiseTest::Mean {
        direction: Direction::Greater,
        statistic: cfg.mean_statistic,
    };
    run_family(prev, curr, cfg, test, cfg.grid.upper_domain(), FamilyStatistic::MaxP, 0)
}

/// Valleys filled: mean(prev) < mean(curr) on s ≥ 1 − τ, maxP.
pub fn test_lower_tail(prev: &StageSample, curr: &StageSample, cfg: &DecisionConfig) -> Result<FamilyTestResult> {
    let test = PointwiseTest::Mean {
        direction: Direction::Less,
        statistic: cfg.mean_statistic,
    };
    run_family(prev, curr, cfg, test, cfg.grid.lower_domain(), FamilyStatistic::MaxP, 1)
}

/// Spread reduced: var(prev) > var(curr) over the whole grid, medP.
pub fn test_variance(prev: &StageSample, curr: &StageSample, cfg: &DecisionConfig) -> Result<FamilyTestResult> {
    run_family(prev, curr, cfg, PointwiseTest::Variance, cfg.grid.full_domain(), FamilyStatistic::MedP, 2)
}

/// Runs all three families and combines them into a decision.
pub fn decide(
    prev: &StageSample,
    curr: &StageSample,
    prev_label: &str,
    curr_label: &str,
    cfg: &DecisionConfig,
) -> Result<DecisionRecord> {
    let (upper, (lower, variance)) = rayon::join(
        || test_upper_tail(prev, curr, cfg),
        || {
            rayon::join(
                || test_lower_tail(prev, curr, cfg),
                || test_variance(prev, curr, cfg),
            )
        },
    );
    let families = Families {
        upper_tail: FamilyOutcome::new(&upper?, cfg.alpha),
        lower_tail: FamilyOutcome::new(&lower?, cfg.alpha),
        variance: FamilyOutcome::new(&variance?, cfg.alpha),
    };
    let overall = combine(families.p_values(), cfg.alpha);
    Ok(DecisionRecord {
        stages: Stages {
            prev: prev_label.to_string(),
            curr: curr_label.to_string(),
        },
        recommendation: recommend(overall, cfg.marginal_continues, cfg.finest_tool),
        overall,
        families,
        provenance: Provenance {
            seed: cfg.perm.seed,
            n_permutations: cfg.perm.n_permutations,
            exhaustive: cfg.perm.exhaustive,
            grid_size: cfg.grid.len(),
            tau: cfg.tau(),
            alpha: cfg.alpha,
            s_max: cfg.grid.s_max(),
            mean_statistic: cfg.mean_statistic,
            marginal_continues: cfg.marginal_continues,
        },
        tool: ToolInfo::default(),
    })
}
