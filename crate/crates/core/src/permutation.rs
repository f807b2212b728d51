//! Westfall-Young whole-curve permutation for families of pointwise tests.
//!
//! Entire curves are relabeled between the two groups, so the correlation
//! between grid points of one curve survives resampling. The pointwise
//! p-values of each relabeling are reduced to a single family statistic
//! (minP, maxP or medP), and the observed statistic is located in the
//! resulting permutation distribution.
//!
//! Relabeling `l` is drawn from a ChaCha stream keyed by `(seed, l)`, so a
//! run is reproducible regardless of how the work is split across threads.

use itertools::Itertools;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roughness::StageSample;
use crate::stats::pointwise::{check_pair, Evaluator, Scratch};
use crate::stats::{PointwisePValues, PointwiseTest};

pub const DEFAULT_PERMUTATIONS: usize = 50_000;
pub const DEFAULT_SEED: u64 = 20_240_601;
/// Upper bound on relabelings enumerated in exhaustive mode.
pub const MAX_EXHAUSTIVE: u64 = 20_000_000;

/// Reduction of a p-value vector to one family-level statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyStatistic {
    /// "at least one point" alternative
    #[serde(rename = "minP")]
    MinP,
    /// "all points" alternative
    #[serde(rename = "maxP")]
    MaxP,
    /// "at least half of the points" alternative
    #[serde(rename = "medP")]
    MedP,
}

impl FamilyStatistic {
    pub const ALL: [FamilyStatistic; 3] = [Self::MinP, Self::MaxP, Self::MedP];

    pub fn name(self) -> &'static str {
        match self {
            Self::MinP => "minP",
            Self::MaxP => "maxP",
            Self::MedP => "medP",
        }
    }

    /// Reduces `p` in place (its order is not preserved). `p` must be non-empty.
    pub(crate) fn reduce(self, p: &mut [f64]) -> f64 {
        match self {
            Self::MinP => p.iter().copied().fold(f64::INFINITY, f64::min),
            Self::MaxP => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Self::MedP => {
                let n = p.len();
                let mid = n / 2;
                let (lower, upper_mid, _) = p.select_nth_unstable_by(mid, f64::total_cmp);
                let upper_mid = *upper_mid;
                if n % 2 == 1 {
                    upper_mid
                } else {
                    let lower_mid = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    0.5 * (lower_mid + upper_mid)
                }
            }
        }
    }
}

impl std::fmt::Display for FamilyStatistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_permutations: usize,
    pub seed: u64,
    /// Enumerate every relabeling instead of sampling; `n_permutations` is ignored.
    pub exhaustive: bool,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            n_permutations: DEFAULT_PERMUTATIONS,
            seed: DEFAULT_SEED,
            exhaustive: false,
        }
    }
}

impl PermutationConfig {
    pub fn sampled(n_permutations: usize, seed: u64) -> Self {
        PermutationConfig {
            n_permutations,
            seed,
            exhaustive: false,
        }
    }

    pub fn exhaustive() -> Self {
        PermutationConfig {
            exhaustive: true,
            ..Default::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        PermutationConfig { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyTestResult {
    pub stat_kind: FamilyStatistic,
    /// Family statistic of the observed labeling.
    pub observed_stat: f64,
    pub corrected_p: f64,
    /// Relabelings in the reference distribution (N, or C(J1+J2, J1) when exhaustive).
    pub n_used: u64,
    /// Points of the observed labeling where both groups had zero variance.
    pub degenerate_points: usize,
}

/// Min / max / median of the p-values over their domain.
pub fn family_stat(p: &PointwisePValues, kind: FamilyStatistic) -> Result<f64> {
    if p.p.is_empty() {
        return Err(Error::invalid("family statistic over an empty domain"));
    }
    let mut v = p.p.clone();
    Ok(kind.reduce(&mut v))
}

/// Assignment of pool indices to the two groups, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relabeling {
    pub group1: Vec<usize>,
    pub group2: Vec<usize>,
}

impl Relabeling {
    /// The observed labeling: the first `j1` curves form group 1.
    pub fn identity(j1: usize, j2: usize) -> Self {
        Relabeling {
            group1: (0..j1).collect(),
            group2: (j1..j1 + j2).collect(),
        }
    }

    fn from_group1(mut group1: Vec<usize>, total: usize) -> Self {
        group1.sort_unstable();
        let mut group2 = Vec::with_capacity(total - group1.len());
        let mut it = group1.iter().peekable();
        for i in 0..total {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                group2.push(i);
            }
        }
        Relabeling { group1, group2 }
    }
}

/// Uniformly chooses which `j1` of the `j1 + j2` curves go to group 1.
pub fn draw_relabeling<R: Rng + ?Sized>(rng: &mut R, j1: usize, j2: usize) -> Relabeling {
    let total = j1 + j2;
    let group1 = index::sample(rng, total, j1).into_vec();
    Relabeling::from_group1(group1, total)
}

/// Generator for relabeling `l` under `seed`: a pure function of the pair.
pub fn relabeling_rng(seed: u64, l: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(l);
    rng
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Corrected family p-value by whole-curve permutation.
///
/// Sampled mode uses the observed labeling plus `N − 1` random relabelings
/// and returns `#{l : stat_l ≤ stat_obs} / N`, so the result is at least
/// `1/N`. Exhaustive mode enumerates all `C(J1+J2, J1)` labelings.
pub fn westfall_young(
    g1: &StageSample,
    g2: &StageSample,
    test: PointwiseTest,
    domain: &[usize],
    kind: FamilyStatistic,
    cfg: &PermutationConfig,
) -> Result<FamilyTestResult> {
    if g1.is_empty() || g2.is_empty() {
        return Err(Error::invalid("permutation needs curves in both groups"));
    }
    check_pair(g1, g2, domain)?;
    let pool: Vec<&[f64]> = g1
        .curves()
        .iter()
        .chain(g2.curves())
        .map(Vec::as_slice)
        .collect();
    let engine = Engine {
        evaluator: Evaluator::new(&pool, domain, test),
        kind,
    };
    let (j1, j2) = (g1.len(), g2.len());

    let observed = Relabeling::identity(j1, j2);
    let mut state = EvalState::default();
    let (observed_stat, degenerate_points) = engine.stat(&observed, &mut state);

    let (count, n_used) = if cfg.exhaustive {
        let total = binomial((j1 + j2) as u64, j1 as u64)
            .filter(|&c| c <= MAX_EXHAUSTIVE)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "exhaustive enumeration of C({}, {j1}) relabelings is too large",
                    j1 + j2
                ))
            })?;
        let count = (0..j1 + j2)
            .combinations(j1)
            .par_bridge()
            .map_init(EvalState::default, |state, group1| {
                let r = Relabeling::from_group1(group1, j1 + j2);
                engine.stat(&r, state).0 <= observed_stat
            })
            .filter(|&hit| hit)
            .count() as u64;
        (count, total)
    } else {
        if cfg.n_permutations == 0 {
            return Err(Error::invalid("number of permutations must be at least 1"));
        }
        let n = cfg.n_permutations as u64;
        let hits = (1..n)
            .into_par_iter()
            .map_init(EvalState::default, |state, l| {
                let r = draw_relabeling(&mut relabeling_rng(cfg.seed, l), j1, j2);
                engine.stat(&r, state).0 <= observed_stat
            })
            .filter(|&hit| hit)
            .count() as u64;
        (hits + 1, n)
    };

    Ok(FamilyTestResult {
        stat_kind: kind,
        observed_stat,
        corrected_p: count as f64 / n_used as f64,
        n_used,
        degenerate_points,
    })
}

#[derive(Default)]
struct EvalState {
    scratch: Scratch,
    p: Vec<f64>,
}

struct Engine {
    evaluator: Evaluator,
    kind: FamilyStatistic,
}

impl Engine {
    fn stat(&self, r: &Relabeling, state: &mut EvalState) -> (f64, usize) {
        debug_assert_eq!(r.group1.len() + r.group2.len(), self.evaluator.pool_size());
        let degenerate = self
            .evaluator
            .eval(&r.group1, &r.group2, &mut state.scratch, &mut state.p, None);
        (self.kind.reduce(&mut state.p), degenerate)
    }
}
