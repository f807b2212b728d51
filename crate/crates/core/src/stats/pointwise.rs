//! Univariate two-sample tests applied independently at every grid point.

use serde::{Deserialize, Serialize};

use super::dist::{f_sf_unchecked, t_sf_unchecked};
use crate::error::{Error, Result};
use crate::roughness::StageSample;

/// Direction of a one-sided mean alternative, group 1 relative to group 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// H1: mu1(s) > mu2(s)
    Greater,
    /// H1: mu1(s) < mu2(s)
    Less,
}

/// Variance treatment in the two-sample t statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanStatistic {
    /// Unequal variances, Welch-Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, J1 + J2 - 2 degrees of freedom.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    MeanGreater,
    MeanLess,
    VarianceGreater,
}

/// Which univariate test runs at each grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointwiseTest {
    Mean {
        direction: Direction,
        statistic: MeanStatistic,
    },
    /// One-sided F test of H1: sigma1^2(s) > sigma2^2(s).
    Variance,
}

impl PointwiseTest {
    pub fn mean(direction: Direction) -> Self {
        PointwiseTest::Mean {
            direction,
            statistic: MeanStatistic::Welch,
        }
    }

    pub fn kind(&self) -> TestKind {
        match self {
            PointwiseTest::Mean {
                direction: Direction::Greater,
                ..
            } => TestKind::MeanGreater,
            PointwiseTest::Mean {
                direction: Direction::Less,
                ..
            } => TestKind::MeanLess,
            PointwiseTest::Variance => TestKind::VarianceGreater,
        }
    }
}

/// p-values over a subset of grid points.
///
/// `p[i]` belongs to grid index `domain[i]`. `degenerate` lists the grid
/// indices where both groups had zero sample variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwisePValues {
    pub p: Vec<f64>,
    pub test_kind: TestKind,
    pub domain: Vec<usize>,
    pub degenerate: Vec<usize>,
}

/// Welch one-sided t test at each point of `domain`.
pub fn pointwise_mean_test(
    g1: &StageSample,
    g2: &StageSample,
    direction: Direction,
    domain: &[usize],
) -> Result<PointwisePValues> {
    pointwise_test(g1, g2, PointwiseTest::mean(direction), domain)
}

/// One-sided F test of H1: sigma1^2 > sigma2^2 at each point of `domain`.
pub fn pointwise_variance_test(
    g1: &StageSample,
    g2: &StageSample,
    domain: &[usize],
) -> Result<PointwisePValues> {
    pointwise_test(g1, g2, PointwiseTest::Variance, domain)
}

pub fn pointwise_test(
    g1: &StageSample,
    g2: &StageSample,
    test: PointwiseTest,
    domain: &[usize],
) -> Result<PointwisePValues> {
    check_pair(g1, g2, domain)?;
    let pool: Vec<&[f64]> = g1
        .curves()
        .iter()
        .chain(g2.curves())
        .map(Vec::as_slice)
        .collect();
    let evaluator = Evaluator::new(&pool, domain, test);
    let idx1: Vec<usize> = (0..g1.len()).collect();
    let idx2: Vec<usize> = (g1.len()..pool.len()).collect();
    let mut scratch = Scratch::default();
    let mut p = Vec::new();
    let mut degenerate = Vec::new();
    evaluator.eval(&idx1, &idx2, &mut scratch, &mut p, Some(&mut degenerate));
    Ok(PointwisePValues {
        p,
        test_kind: test.kind(),
        domain: domain.to_vec(),
        degenerate,
    })
}

pub(crate) fn check_pair(g1: &StageSample, g2: &StageSample, domain: &[usize]) -> Result<()> {
    if g1.grid() != g2.grid() {
        return Err(Error::invalid("stage samples are evaluated on different grids"));
    }
    if g1.len() < 2 || g2.len() < 2 {
        return Err(Error::invalid(format!(
            "each group needs at least 2 curves, got {} and {}",
            g1.len(),
            g2.len()
        )));
    }
    if domain.is_empty() {
        return Err(Error::invalid("test domain is empty"));
    }
    let m = g1.grid().len();
    if let Some(&bad) = domain.iter().find(|&&k| k >= m) {
        return Err(Error::invalid(format!("domain index {bad} outside grid of size {m}")));
    }
    Ok(())
}

#[derive(Debug, Default)]
pub(crate) struct Scratch {
    mean1: Vec<f64>,
    mean2: Vec<f64>,
    var1: Vec<f64>,
    var2: Vec<f64>,
}

/// Pointwise test over a pool of curves restricted to a domain, evaluated
/// for arbitrary group assignments.
pub(crate) struct Evaluator {
    /// pool curves gathered onto the domain, one row per curve
    rows: Vec<Vec<f64>>,
    test: PointwiseTest,
}

impl Evaluator {
    pub(crate) fn new(pool: &[&[f64]], domain: &[usize], test: PointwiseTest) -> Self {
        let rows = pool
            .iter()
            .map(|c| domain.iter().map(|&k| c[k]).collect())
            .collect();
        Evaluator { rows, test }
    }

    pub(crate) fn pool_size(&self) -> usize {
        self.rows.len()
    }

    fn moments(&self, idx: &[usize], mean: &mut Vec<f64>, var: &mut Vec<f64>) {
        let width = self.rows.first().map_or(0, Vec::len);
        mean.clear();
        mean.resize(width, 0.0);
        var.clear();
        var.resize(width, 0.0);
        for &i in idx {
            for (acc, x) in mean.iter_mut().zip(&self.rows[i]) {
                *acc += x;
            }
        }
        let n = idx.len() as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        for &i in idx {
            for ((acc, x), m) in var.iter_mut().zip(&self.rows[i]).zip(mean.iter()) {
                let d = x - m;
                *acc += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n - 1.0;
        }
    }

    /// Writes one p-value per domain point into `p`; returns the number of
    /// degenerate points and, when asked, their positions in the domain.
    pub(crate) fn eval(
        &self,
        g1: &[usize],
        g2: &[usize],
        scratch: &mut Scratch,
        p: &mut Vec<f64>,
        mut degenerate: Option<&mut Vec<usize>>,
    ) -> usize {
        self.moments(g1, &mut scratch.mean1, &mut scratch.var1);
        self.moments(g2, &mut scratch.mean2, &mut scratch.var2);
        let n1 = g1.len() as f64;
        let n2 = g2.len() as f64;
        p.clear();
        let mut count = 0;
        for k in 0..scratch.mean1.len() {
            let (m1, m2) = (scratch.mean1[k], scratch.mean2[k]);
            let (v1, v2) = (scratch.var1[k], scratch.var2[k]);
            let (pk, degen) = match self.test {
                PointwiseTest::Mean {
                    direction,
                    statistic,
                } => mean_point(m1, m2, v1, v2, n1, n2, direction, statistic),
                PointwiseTest::Variance => variance_point(v1, v2, n1, n2),
            };
            if degen {
                count += 1;
                if let Some(d) = degenerate.as_deref_mut() {
                    d.push(k);
                }
            }
            p.push(pk);
        }
        count
    }
}

#[allow(clippy::too_many_arguments)]
fn mean_point(
    m1: f64,
    m2: f64,
    v1: f64,
    v2: f64,
    n1: f64,
    n2: f64,
    direction: Direction,
    statistic: MeanStatistic,
) -> (f64, bool) {
    let diff = match direction {
        Direction::Greater => m1 - m2,
        Direction::Less => m2 - m1,
    };
    let (se2, df) = match statistic {
        MeanStatistic::Welch => {
            let a = v1 / n1;
            let b = v2 / n2;
            let se2 = a + b;
            let df = se2 * se2 / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
            (se2, df)
        }
        MeanStatistic::Pooled => {
            let df = n1 + n2 - 2.0;
            let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
            (sp2 * (1.0 / n1 + 1.0 / n2), df)
        }
    };
    if se2 <= 0.0 {
        let scale = m1.abs().max(m2.abs());
        let p = if diff.abs() <= 4.0 * f64::EPSILON * scale {
            0.5
        } else if diff > 0.0 {
            0.0
        } else {
            1.0
        };
        return (p, true);
    }
    (t_sf_unchecked(diff / se2.sqrt(), df), false)
}

fn variance_point(v1: f64, v2: f64, n1: f64, n2: f64) -> (f64, bool) {
    if v2 <= 0.0 {
        return if v1 <= 0.0 { (0.5, true) } else { (0.0, true) };
    }
    (f_sf_unchecked(v1 / v2, n1 - 1.0, n2 - 1.0), false)
}

/// Pointwise sample mean and sample variance (divisor J - 1) of a set of curves.
pub fn mean_and_variance(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let pool: Vec<&[f64]> = curves.iter().map(Vec::as_slice).collect();
    let width = pool.first().map_or(0, |c| c.len());
    let domain: Vec<usize> = (0..width).collect();
    let ev = Evaluator::new(&pool, &domain, PointwiseTest::Variance);
    let idx: Vec<usize> = (0..pool.len()).collect();
    let (mut mean, mut var) = (Vec::new(), Vec::new());
    ev.moments(&idx, &mut mean, &mut var);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughness::QuantileGrid;
    use crate::stats::dist::{f_sf, student_t_sf};

    fn grid(m: usize) -> QuantileGrid {
        QuantileGrid::uniform(m, 1.0, 0.25).unwrap()
    }

    fn sample(curves: Vec<Vec<f64>>, m: usize) -> StageSample {
        StageSample::new(curves, grid(m), "g").unwrap()
    }

    fn wiggly(j: usize, m: usize, offset: f64, scale: f64) -> Vec<Vec<f64>> {
        (0..j)
            .map(|i| {
                (0..m)
                    .map(|k| offset + scale * ((i * 7 + k * 3) as f64 * 0.91).sin())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_groups_give_half() {
        let m = 12;
        let a = sample(wiggly(5, m, 0.0, 1.0), m);
        let all: Vec<usize> = (0..m).collect();
        let pm = pointwise_mean_test(&a, &a, Direction::Greater, &all).unwrap();
        assert!(pm.p.iter().all(|&p| p == 0.5));
        let pv = pointwise_variance_test(&a, &a, &all).unwrap();
        assert!(pv.p.iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn large_shift_is_detected() {
        let m = 10;
        let a = sample(wiggly(6, m, 10.0, 1.0), m);
        let b = sample(wiggly(6, m, 0.0, 1.0), m);
        let all: Vec<usize> = (0..m).collect();
        let p = pointwise_mean_test(&a, &b, Direction::Greater, &all).unwrap();
        assert!(p.p.iter().all(|&x| x <= 1e-4), "{:?}", p.p);
    }

    #[test]
    fn direction_flip_complements() {
        let m = 15;
        let a = sample(wiggly(4, m, 0.3, 1.0), m);
        let b = sample(wiggly(7, m, 0.0, 2.0), m);
        let all: Vec<usize> = (0..m).collect();
        for statistic in [MeanStatistic::Welch, MeanStatistic::Pooled] {
            let g = pointwise_test(&a, &b, PointwiseTest::Mean { direction: Direction::Greater, statistic }, &all).unwrap();
            let l = pointwise_test(&a, &b, PointwiseTest::Mean { direction: Direction::Less, statistic }, &all).unwrap();
            for (x, y) in g.p.iter().zip(&l.p) {
                assert!((x + y - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn welch_matches_hand_formula() {
        let a = sample(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![4.0, 1.0]], 2);
        let b = sample(vec![vec![0.0, 0.0], vec![1.0, 3.0], vec![0.5, 1.0], vec![0.2, 2.0]], 2);
        let p = pointwise_mean_test(&a, &b, Direction::Greater, &[0]).unwrap();
        let (m1, v1) = (7.0 / 3.0, ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0);
        let xs = [0.0, 1.0, 0.5, 0.2];
        let m2 = xs.iter().sum::<f64>() / 4.0;
        let v2 = xs.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / 3.0;
        let se2 = v1 / 3.0 + v2 / 4.0;
        let df = se2 * se2 / ((v1 / 3.0).powi(2) / 2.0 + (v2 / 4.0).powi(2) / 3.0);
        let want = student_t_sf((m1 - m2) / se2.sqrt(), df).unwrap();
        assert!((p.p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn variance_scaled_tenfold() {
        let m = 8;
        let base = wiggly(10, m, 5.0, 1.0);
        let (mean, _) = mean_and_variance(&base);
        let scaled: Vec<Vec<f64>> = base
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(x, mu)| 10.0 * (x - mu) + mu).collect())
            .collect();
        let a = sample(scaled, m);
        let b = sample(base, m);
        let all: Vec<usize> = (0..m).collect();
        let p = pointwise_variance_test(&a, &b, &all).unwrap();
        let want = f_sf(100.0, 9.0, 9.0).unwrap();
        for x in &p.p {
            assert!((x - want).abs() < 1e-9);
            assert!(*x < 1e-6);
        }
    }

    #[test]
    fn variance_swap_complements() {
        let m = 9;
        let a = sample(wiggly(6, m, 0.0, 1.0), m);
        let b = sample(wiggly(6, m, 2.0, 1.7), m);
        let all: Vec<usize> = (0..m).collect();
        let p = pointwise_variance_test(&a, &b, &all).unwrap();
        let q = pointwise_variance_test(&b, &a, &all).unwrap();
        for (x, y) in p.p.iter().zip(&q.p) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_points_follow_policy() {
        let flat_hi = sample(vec![vec![2.0, 1.0, 0.0]; 3], 3);
        let flat_lo = sample(vec![vec![1.0, 1.0, 0.0]; 3], 3);
        let all = [0, 1, 2];
        let p = pointwise_mean_test(&flat_hi, &flat_lo, Direction::Greater, &all).unwrap();
        assert_eq!(p.p, vec![0.0, 0.5, 0.5]);
        assert_eq!(p.degenerate, vec![0, 1, 2]);
        let p = pointwise_mean_test(&flat_hi, &flat_lo, Direction::Less, &all).unwrap();
        assert_eq!(p.p, vec![1.0, 0.5, 0.5]);

        let spread = sample(vec![vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![3.0, 1.0, 0.0]], 3);
        let p = pointwise_variance_test(&spread, &flat_lo, &all).unwrap();
        assert_eq!(p.p, vec![0.0, 0.5, 0.5]);
        let p = pointwise_variance_test(&flat_lo, &spread, &all).unwrap();
        assert_eq!(p.p[0], 1.0);
    }

    #[test]
    fn estimators_use_unbiased_divisor() {
        let (m, v) = mean_and_variance(&[vec![1.0], vec![2.0], vec![6.0]]);
        assert_eq!(m, vec![3.0]);
        assert_eq!(v, vec![7.0]);
    }

    #[test]
    fn rejects_mismatched_input() {
        let a = sample(wiggly(3, 5, 0.0, 1.0), 5);
        let b = sample(wiggly(3, 6, 0.0, 1.0), 6);
        assert!(pointwise_mean_test(&a, &b, Direction::Greater, &[0]).is_err());
        assert!(pointwise_mean_test(&a, &a, Direction::Greater, &[]).is_err());
        assert!(pointwise_mean_test(&a, &a, Direction::Greater, &[9]).is_err());
    }
}
