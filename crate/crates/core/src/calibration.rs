//! Removal of the nominal spherical (or planar) surface from raw pixel heights.
//!
//! Each location is fitted independently: a scan covers a small cap of the
//! part, so the soft-fixtured reference differs from scan to scan.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{HeightMatrix, StageRecord};

/// Eigenvalue ratio below which the normal equations are treated as singular.
const SINGULAR_RATIO: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereFit {
    /// (Xc, Yc, zc) in µm.
    pub center: [f64; 3],
    pub radius: f64,
    /// RMS of |dist(point, center) − radius| over the fitted points.
    pub rms_residual: f64,
}

/// z = intercept + slope_x·X + slope_y·Y
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub intercept: f64,
    pub slope_x: f64,
    pub slope_y: f64,
}

/// Which nominal surface is subtracted before roughness analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Sphere,
    /// Least-squares plane, for flat parts.
    Plane,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CalibrationOptions {
    pub baseline: Baseline,
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

/// Algebraic least-squares sphere through `points` (X, Y, z in µm).
///
/// Solves the normal equations of |p|² = 2p·c + (r² − |c|²) on centered and
/// scaled coordinates.
pub fn fit_sphere(points: &[[f64; 3]]) -> Result<SphereFit> {
    if points.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sphere fit points must be finite"));
    }
    let origin = centroid(points);
    let scale = (points
        .iter()
        .map(|p| (Vector3::from(*p) - origin).norm_squared())
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    if scale == 0.0 {
        return Err(Error::DegenerateFit("all points coincide".into()));
    }

    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for p in points {
        let q = (Vector3::from(*p) - origin) / scale;
        let row = Vector4::new(2.0 * q.x, 2.0 * q.y, 2.0 * q.z, 1.0);
        ata += row * row.transpose();
        atb += row * q.norm_squared();
    }

    let eig = SymmetricEigen::new(ata);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > SINGULAR_RATIO * max) {
        return Err(Error::DegenerateFit(
            "points are coplanar or collinear; the normal equations are singular".into(),
        ));
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::DegenerateFit("normal equations are not positive definite".into()))?
        .solve(&atb);

    let center_q = Vector3::new(sol[0], sol[1], sol[2]);
    let r2 = sol[3] + center_q.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::DegenerateFit(format!("non-positive squared radius {r2}")));
    }
    let center = origin + center_q * scale;
    let radius = r2.sqrt() * scale;

    let rms_residual = (points
        .iter()
        .map(|p| {
            let d = (Vector3::from(*p) - center).norm() - radius;
            d * d
        })
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();

    Ok(SphereFit {
        center: [center.x, center.y, center.z],
        radius,
        rms_residual,
    })
}

pub fn fit_sphere_matrix(m: &HeightMatrix) -> Result<SphereFit> {
    let points: Vec<[f64; 3]> = m.points().map(|(_, _, x, y, z)| [x, y, z]).collect();
    fit_sphere(&points)
}

/// Raw heights minus the fitted sphere, z' = z − (zc ± sqrt(r² − (X−Xc)² − (Y−Yc)²)).
///
/// Both branches of the root are tried and the one leaving the smaller RMS
/// residual is kept.
pub fn subtract_baseline(m: &HeightMatrix, fit: &SphereFit) -> Result<HeightMatrix> {
    let [xc, yc, zc] = fit.center;
    let r2 = fit.radius * fit.radius;
    let mut roots = Vec::with_capacity(m.len());
    let mut upper_ss = 0.0;
    let mut lower_ss = 0.0;
    for (row, col, x, y, z) in m.points() {
        let radicand = r2 - (x - xc).powi(2) - (y - yc).powi(2);
        if radicand < 0.0 {
            return Err(Error::OutsideSphere { row, col, radicand });
        }
        let root = radicand.sqrt();
        upper_ss += (z - (zc + root)).powi(2);
        lower_ss += (z - (zc - root)).powi(2);
        roots.push(root);
    }
    let sign = if lower_ss < upper_ss { -1.0 } else { 1.0 };
    let mut roots = roots.into_iter();
    Ok(m.map_points(|_, _, _, _, z| {
        let root = roots.next().expect("one root per finite pixel");
        z - (zc + sign * root)
    }))
}

/// Least-squares plane through the finite pixels of `m`.
pub fn fit_plane(m: &HeightMatrix) -> Result<PlaneFit> {
    let n = m.len() as f64;
    let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
    for (_, _, x, y, z) in m.points() {
        sx += x;
        sy += y;
        sz += z;
    }
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (_, _, x, y, z) in m.points() {
        let row = Vector3::new(1.0, x - mx, y - my);
        ata += row * row.transpose();
        atb += row * (z - mz);
    }
    // A single row or column leaves one slope undetermined; pin it to zero.
    for k in 1..3 {
        if ata[(k, k)] == 0.0 {
            ata[(k, k)] = 1.0;
        }
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::DegenerateFit("plane normal equations are singular".into()))?;
    Ok(PlaneFit {
        intercept: mz + sol[0] - sol[1] * mx - sol[2] * my,
        slope_x: sol[1],
        slope_y: sol[2],
    })
}

pub fn subtract_plane(m: &HeightMatrix, plane: &PlaneFit) -> HeightMatrix {
    m.map_points(|_, _, x, y, z| z - (plane.intercept + plane.slope_x * x + plane.slope_y * y))
}

/// Fits and removes the baseline of every location independently.
pub fn calibrate_stage(rec: &StageRecord, opts: &CalibrationOptions) -> Result<StageRecord> {
    if rec.locations.is_empty() {
        return Err(Error::InsufficientLocations { needed: 1, found: 0 });
    }
    let locations = rec
        .locations
        .par_iter()
        .map(|m| match opts.baseline {
            Baseline::Sphere => {
                let fit = fit_sphere_matrix(m).map_err(|e| match e {
                    Error::DegenerateFit(why) => Error::DegenerateFit(format!(
                        "location {}: {why} (use the plane baseline for flat parts)",
                        m.location_id
                    )),
                    other => other,
                })?;
                subtract_baseline(m, &fit)
            }
            Baseline::Plane => Ok(subtract_plane(m, &fit_plane(m)?)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageRecord {
        locations,
        ..rec.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const R: f64 = 1688.0;

    fn fibonacci_sphere(n: usize, center: [f64; 3], r: f64) -> Vec<[f64; 3]> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rad = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                [
                    center[0] + r * rad * th.cos(),
                    center[1] + r * y,
                    center[2] + r * rad * th.sin(),
                ]
            })
            .collect()
    }

    /// Gauss-Newton on geometric distances, started from `init`.
    fn geometric_refine(points: &[[f64; 3]], init: &SphereFit) -> ([f64; 3], f64) {
        let mut c = Vector3::from(init.center);
        let mut r = init.radius;
        for _ in 0..50 {
            let mut jtj = Matrix4::<f64>::zeros();
            let mut jtr = Vector4::<f64>::zeros();
            for p in points {
                let d = Vector3::from(*p) - c;
                let dist = d.norm();
                let res = dist - r;
                let g = -d / dist;
                let j = Vector4::new(g.x, g.y, g.z, -1.0);
                jtj += j * j.transpose();
                jtr += j * res;
            }
            let step = jtj.lu().solve(&(-jtr)).unwrap();
            c += Vector3::new(step[0], step[1], step[2]);
            r += step[3];
            if step.norm() < 1e-12 * r {
                break;
            }
        }
        ([c.x, c.y, c.z], r)
    }

    fn cap_matrix(
        rows: usize,
        cols: usize,
        center: [f64; 3],
        r: f64,
        texture: impl Fn(f64, f64) -> f64,
    ) -> HeightMatrix {
        let (dx, dy) = (0.359, 0.369);
        let mut z = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                let (x, y) = (col as f64 * dx, row as f64 * dy);
                let base = center[2] + (r * r - (x - center[0]).powi(2) - (y - center[1]).powi(2)).sqrt();
                z.push(base + texture(x, y));
            }
        }
        HeightMatrix::new(rows, cols, dx, dy, z, "loc", "s").unwrap()
    }

    #[test]
    fn recovers_exact_sphere() {
        let pts = fibonacci_sphere(1000, [1.0, 2.0, 3.0], R);
        let fit = fit_sphere(&pts).unwrap();
        for (got, want) in fit.center.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() / R <= 1e-9, "{got} vs {want}");
        }
        assert!((fit.radius - R).abs() / R <= 1e-9);
        assert!(fit.rms_residual <= 1e-9 * R);
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|i| [(i % 10) as f64, (i / 10) as f64, 5.0])
            .collect();
        assert!(matches!(fit_sphere(&pts), Err(Error::DegenerateFit(_))));
        let line: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
        assert!(matches!(fit_sphere(&line), Err(Error::DegenerateFit(_))));
        assert!(fit_sphere(&pts[..3]).is_err());
    }

    #[test]
    fn noisy_sphere_agrees_with_geometric_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let center = [1.0, 2.0, 3.0];
        let pts: Vec<[f64; 3]> = fibonacci_sphere(100_000, center, R)
            .into_iter()
            .map(|p| {
                let d = Vector3::from(p) - Vector3::from(center);
                let q = Vector3::from(center) + d * (1.0 + noise.sample(&mut rng) / R);
                [q.x, q.y, q.z]
            })
            .collect();
        let fit = fit_sphere(&pts).unwrap();
        assert!((fit.radius - R).abs() / R <= 1e-4);
        let (c_ref, r_ref) = geometric_refine(&pts, &fit);
        assert!((fit.radius - r_ref).abs() / R <= 1e-6);
        for k in 0..3 {
            assert!((fit.center[k] - c_ref[k]).abs() / R <= 1e-6);
        }
        assert!((fit.rms_residual - 0.01).abs() < 1e-3);
    }

    #[test]
    fn fit_ignores_point_order() {
        let mut pts = fibonacci_sphere(500, [10.0, -4.0, 7.0], 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in pts.iter_mut() {
            p[2] += rng.gen_range(-0.01..0.01);
        }
        let a = fit_sphere(&pts).unwrap();
        pts.reverse();
        pts.swap(3, 200);
        let b = fit_sphere(&pts).unwrap();
        assert!((a.radius - b.radius).abs() < 1e-9);
        for k in 0..3 {
            assert!((a.center[k] - b.center[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn subtract_exact_baseline_is_zero() {
        let fit = SphereFit { center: [20.0, 15.0, -1650.0], radius: R, rms_residual: 0.0 };
        let m = cap_matrix(30, 40, fit.center, R, |_, _| 0.0);
        let out = subtract_baseline(&m, &fit).unwrap();
        assert!(out.heights().all(|v| v.abs() < 1e-9));
        assert_eq!((out.rows(), out.cols()), (30, 40));
        assert_eq!(out.location_id, m.location_id);

        let shifted = cap_matrix(30, 40, fit.center, R, |_, _| 0.25);
        let out = subtract_baseline(&shifted, &fit).unwrap();
        assert!(out.heights().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn recovers_sinusoidal_texture() {
        let fit = SphereFit { center: [7.0, 5.0, -1680.0], radius: R, rms_residual: 0.0 };
        let a = 0.02;
        let tex = move |x: f64, y: f64| a * (0.7 * x).sin() * (0.4 * y).cos();
        let m = cap_matrix(25, 35, fit.center, R, tex);
        let out = subtract_baseline(&m, &fit).unwrap();
        for (_, _, x, y, v) in out.points() {
            assert!((v - tex(x, y)).abs() <= 1e-9);
        }
    }

    #[test]
    fn shift_equivariance() {
        let fit = SphereFit { center: [7.0, 5.0, -1680.0], radius: R, rms_residual: 0.0 };
        let m = cap_matrix(10, 10, fit.center, R, |x, y| 0.01 * (x * y).sin());
        let c = 3.5;
        let moved = m.map_points(|_, _, _, _, z| z + c);
        let fit_moved = SphereFit { center: [7.0, 5.0, -1680.0 + c], ..fit };
        let a = subtract_baseline(&m, &fit).unwrap();
        let b = subtract_baseline(&moved, &fit_moved).unwrap();
        for (x, y) in a.heights().zip(b.heights()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_branch_is_selected_automatically() {
        let center = [5.0, 5.0, 1700.0];
        let mut z = Vec::new();
        for row in 0..8 {
            for col in 0..8 {
                let (x, y) = (col as f64 * 0.359, row as f64 * 0.369);
                z.push(center[2] - (R * R - (x - 5.0f64).powi(2) - (y - 5.0f64).powi(2)).sqrt());
            }
        }
        let m = HeightMatrix::new(8, 8, 0.359, 0.369, z, "l", "s").unwrap();
        let fit = SphereFit { center, radius: R, rms_residual: 0.0 };
        let out = subtract_baseline(&m, &fit).unwrap();
        assert!(out.heights().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn pixel_outside_cap_is_reported() {
        let m = HeightMatrix::new(2, 3, 1.0, 1.0, vec![0.0; 6], "l", "s").unwrap();
        let fit = SphereFit { center: [0.0, 0.0, 0.0], radius: 1.5, rms_residual: 0.0 };
        match subtract_baseline(&m, &fit) {
            Err(Error::OutsideSphere { row, col, .. }) => assert_eq!((row, col), (0, 2)),
            other => panic!("expected OutsideSphere, got {other:?}"),
        }
    }

    #[test]
    fn calibrates_stage_of_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let locs: Vec<HeightMatrix> = (0..9)
            .map(|i| {
                let center = [rng.gen_range(5.0..15.0), rng.gen_range(5.0..15.0), rng.gen_range(-1690.0..-1680.0)];
                let mut m = cap_matrix(40, 50, center, R, |_, _| 0.0);
                m = m.map_points(|_, _, _, _, z| z + noise.sample(&mut rng));
                m.location_id = format!("loc{i}");
                m
            })
            .collect();
        let rec = StageRecord::new("s", "P1", locs, None).unwrap();
        let cal = calibrate_stage(&rec, &CalibrationOptions::default()).unwrap();
        assert_eq!(cal.locations.len(), 9);
        for m in &cal.locations {
            let mean = m.heights().sum::<f64>() / m.len() as f64;
            assert!(mean.abs() < 0.01, "mean {mean}");
            let rms = (m.heights().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
            assert!(rms < 0.02, "rms {rms}");
        }
    }

    #[test]
    fn flat_stage_needs_plane_baseline() {
        let mk = |id: &str, tilt: f64| {
            let z: Vec<f64> = (0..100)
                .map(|i| 2.0 + tilt * (i % 10) as f64 + 0.001 * ((i * 7) as f64).sin())
                .collect();
            HeightMatrix::new(10, 10, 1.0, 1.0, z, id, "s").unwrap()
        };
        let rec = StageRecord::new("s", "F", vec![mk("a", 0.1), mk("b", 0.0)], None).unwrap();
        let plane = CalibrationOptions { baseline: Baseline::Plane };
        let cal = calibrate_stage(&rec, &plane).unwrap();
        for m in &cal.locations {
            assert!(m.heights().all(|v| v.abs() < 0.002));
        }
        let exact_plane = StageRecord::new(
            "s",
            "F",
            vec![
                HeightMatrix::new(2, 2, 1.0, 1.0, vec![1.0, 1.0, 1.0, 1.0], "a", "s").unwrap(),
                HeightMatrix::new(2, 2, 1.0, 1.0, vec![0.0, 1.0, 0.0, 1.0], "b", "s").unwrap(),
            ],
            None,
        )
        .unwrap();
        assert!(matches!(
            calibrate_stage(&exact_plane, &CalibrationOptions::default()),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn empty_stage_errors() {
        let rec = StageRecord { stage_id: "s".into(), stage_label: "S".into(), locations: vec![], timestamp: None };
        assert!(calibrate_stage(&rec, &CalibrationOptions::default()).is_err());
    }
}
