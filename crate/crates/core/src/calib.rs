//! Pinhole projection, PnP extrinsic calibration (DLT initialisation plus
//! Gauss-Newton refinement) and nearest-timestamp stream synchronisation.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::heatmap::{JointSet, Keypoint};

/// Zero-skew pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(invalid(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Rigid transform from the sensor frame into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `R` row-major followed by `t`.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t[0], t[1], t[2],
        ]
    }

    /// Inverse of [`Extrinsics::to_array`]; checks that `R` is a rotation.
    pub fn from_array(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let e = Self { rotation, translation: Vector3::new(v[9], v[10], v[11]) };
        e.validate(1e-9)?;
        Ok(e)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if orth > tol || (det - 1.0).abs() > tol {
            return Err(invalid(format!("rotation is not orthonormal (err {orth:e}, det {det})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p3d: Vector3<f64>,
    pub p2d: Keypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSample {
    pub timestamp: f64,
    pub payload_id: String,
}

impl TimedSample {
    pub fn new(timestamp: f64, payload_id: impl Into<String>) -> Self {
        Self { timestamp, payload_id: payload_id.into() }
    }
}

pub fn project_point(p3d: &Vector3<f64>, intr: &Intrinsics, extr: &Extrinsics) -> Result<Keypoint> {
    project_camera(&extr.transform(p3d), intr).ok_or_else(|| Error::BehindCamera {
        index: 0,
        z: extr.transform(p3d).z,
    })
}

fn project_camera(pc: &Vector3<f64>, intr: &Intrinsics) -> Option<Keypoint> {
    (pc.z > 0.0).then(|| Keypoint::new(intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy))
}

/// Projects every joint, preserving order; a joint behind the camera is
/// reported by index.
pub fn project_joint_set(joints3d: &[Vector3<f64>], intr: &Intrinsics, extr: &Extrinsics) -> Result<JointSet> {
    intr.validate()?;
    joints3d
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let pc = extr.transform(p);
            project_camera(&pc, intr).ok_or(Error::BehindCamera { index, z: pc.z })
        })
        .collect::<Result<Vec<_>>>()
        .map(JointSet::new)
}

/// Root-mean-square reprojection error in pixels.
pub fn reprojection_rms(corr: &[Correspondence], intr: &Intrinsics, extr: &Extrinsics) -> f64 {
    let sum: f64 = corr
        .iter()
        .map(|c| match project_camera(&extr.transform(&c.p3d), intr) {
            Some(p) => (p.x - c.p2d.x).powi(2) + (p.y - c.p2d.y).powi(2),
            None => f64::INFINITY,
        })
        .sum();
    (sum / corr.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the squared error by less than this.
    pub min_decrease: f64,
    pub max_halvings: usize,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self { max_iterations: 100, min_decrease: 1e-12, max_halvings: 40 }
    }
}

/// Trace of a refinement run, exposed for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpReport {
    pub extrinsics: Extrinsics,
    pub initial_cost: f64,
    /// Sum of squared reprojection errors after every accepted iteration.
    pub costs: Vec<f64>,
    pub rms: f64,
}

pub fn solve_pnp(corr: &[Correspondence], intr: &Intrinsics) -> Result<Extrinsics> {
    solve_pnp_with(corr, intr, &PnpOptions::default()).map(|r| r.extrinsics)
}

pub fn solve_pnp_with(corr: &[Correspondence], intr: &Intrinsics, opts: &PnpOptions) -> Result<PnpReport> {
    intr.validate()?;
    if corr.len() < 6 {
        return Err(invalid(format!("PnP needs at least 6 correspondences, got {}", corr.len())));
    }
    if corr.iter().any(|c| !c.p3d.iter().all(|v| v.is_finite()) || !c.p2d.is_finite()) {
        return Err(invalid("non-finite correspondence"));
    }
    let init = dlt_pose(corr, intr)?;
    refine_gauss_newton(corr, intr, init, opts)
}

/// Linear pose from the normalised 3D-DLT, projected onto SO(3).
pub fn dlt_pose(corr: &[Correspondence], intr: &Intrinsics) -> Result<Extrinsics> {
    let n = corr.len();
    let centroid = corr.iter().fold(Vector3::zeros(), |acc, c| acc + c.p3d) / n as f64;
    let mean_dist = corr.iter().map(|c| (c.p3d - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) {
        return Err(Error::Degenerate("all 3D points coincide".into()));
    }
    let scale = 3f64.sqrt() / mean_dist;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corr.iter().enumerate() {
        let p = (c.p3d - centroid) * scale;
        let xn = (c.p2d.x - intr.cx) / intr.fx;
        let yn = (c.p2d.y - intr.cy) / intr.fy;
        let hom = [p.x, p.y, p.z, 1.0];
        for k in 0..4 {
            a[(2 * i, k)] = hom[k];
            a[(2 * i, 8 + k)] = -xn * hom[k];
            a[(2 * i + 1, 4 + k)] = hom[k];
            a[(2 * i + 1, 8 + k)] = -yn * hom[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let m = order.len();
    if m < 12 || sv(m - 2) <= 1e-9 * sv(0) {
        return Err(Error::Degenerate(
            "rank-deficient DLT system (collinear or coplanar points)".into(),
        ));
    }
    let h = v_t.row(order[m - 1]);
    let mut b = Matrix3::new(h[0], h[1], h[2], h[4], h[5], h[6], h[8], h[9], h[10]);
    let mut last = Vector3::new(h[3], h[7], h[11]);
    if b.determinant() < 0.0 {
        b = -b;
        last = -last;
    }
    let bsvd = b.svd(true, true);
    let (u, vt) = (bsvd.u.unwrap(), bsvd.v_t.unwrap());
    let mut rotation = u * vt;
    if rotation.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        rotation = u2 * vt;
    }
    let lambda = bsvd.singular_values.mean() * scale;
    if !(lambda > 0.0) {
        return Err(Error::Degenerate("DLT scale vanished".into()));
    }
    let translation = last / lambda - rotation * centroid;
    Ok(Extrinsics { rotation, translation })
}

fn cost(corr: &[Correspondence], intr: &Intrinsics, e: &Extrinsics) -> f64 {
    let rms = reprojection_rms(corr, intr, e);
    rms * rms * corr.len() as f64
}

/// Gauss-Newton on left-multiplied axis-angle increments with step halving,
/// so the accepted cost never increases.
pub fn refine_gauss_newton(
    corr: &[Correspondence],
    intr: &Intrinsics,
    init: Extrinsics,
    opts: &PnpOptions,
) -> Result<PnpReport> {
    let mut current = init;
    let mut current_cost = cost(corr, intr, &current);
    let initial_cost = current_cost;
    let mut costs = Vec::new();
    let fail = |iterations: usize, c: f64| Error::NonConvergence { iterations, rms: (c / corr.len() as f64).sqrt() };
    if !current_cost.is_finite() {
        return Err(fail(0, current_cost));
    }

    for iter in 0..opts.max_iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corr {
            let rp = current.rotation * c.p3d;
            let pc = rp + current.translation;
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let ru = intr.fx * x / z + intr.cx - c.p2d.x;
            let rv = intr.fy * y / z + intr.cy - c.p2d.y;
            let du = Vector3::new(intr.fx / z, 0.0, -intr.fx * x / (z * z));
            let dv = Vector3::new(0.0, intr.fy / z, -intr.fy * y / (z * z));
            // d(pc)/d(omega) = -[rp]x, d(pc)/dt = I
            let skew = rp.cross_matrix();
            let ju_w = -(skew.transpose() * du);
            let jv_w = -(skew.transpose() * dv);
            let ju = Vector6::new(ju_w[0], ju_w[1], ju_w[2], du[0], du[1], du[2]);
            let jv = Vector6::new(jv_w[0], jv_w[1], jv_w[2], dv[0], dv[1], dv[2]);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(step) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            return Err(Error::Degenerate("singular Gauss-Newton normal equations".into()));
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let s = step * alpha;
            let w = Vector3::new(s[0], s[1], s[2]);
            let candidate = Extrinsics {
                rotation: (Rotation3::new(w) * Rotation3::from_matrix_unchecked(current.rotation)).into_inner(),
                translation: current.translation + Vector3::new(s[3], s[4], s[5]),
            };
            let c = cost(corr, intr, &candidate);
            if c.is_finite() && c <= current_cost {
                accepted = Some((candidate, c));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, next_cost)) = accepted else {
            // no descent along the GN direction: at a (numerical) minimum
            break;
        };
        let decrease = current_cost - next_cost;
        current = next;
        current_cost = next_cost;
        costs.push(current_cost);
        if decrease < opts.min_decrease {
            break;
        }
        if iter + 1 == opts.max_iterations {
            log::debug!("PnP stopped at the iteration cap with cost {current_cost:e}");
        }
    }
    if !current_cost.is_finite() {
        return Err(fail(costs.len(), current_cost));
    }
    Ok(PnpReport {
        extrinsics: current,
        initial_cost,
        rms: (current_cost / corr.len() as f64).sqrt(),
        costs,
    })
}

fn check_sorted(stream: &[TimedSample], name: &str) -> Result<()> {
    if let Some(i) = stream.windows(2).position(|w| !(w[0].timestamp <= w[1].timestamp)) {
        return Err(invalid(format!("stream {name} is not sorted at index {}", i + 1)));
    }
    Ok(())
}

/// Greedy nearest-timestamp pairing in time order. Returns index pairs
/// `(i, j)` into `a` and `b`; pairs never cross and every sample is used at
/// most once.
pub fn synchronize_streams(a: &[TimedSample], b: &[TimedSample], tolerance: f64) -> Result<Vec<(usize, usize)>> {
    check_sorted(a, "a")?;
    check_sorted(b, "b")?;
    if !(tolerance >= 0.0) {
        return Err(invalid(format!("tolerance {tolerance} must be >= 0")));
    }
    let mut pairs = Vec::new();
    let mut j = 0;
    for (i, sa) in a.iter().enumerate() {
        if j >= b.len() {
            break;
        }
        let mut k = j;
        while k + 1 < b.len()
            && (b[k + 1].timestamp - sa.timestamp).abs() < (b[k].timestamp - sa.timestamp).abs()
        {
            k += 1;
        }
        if (b[k].timestamp - sa.timestamp).abs() <= tolerance {
            pairs.push((i, k));
            j = k + 1;
        } else {
            j = k;
        }
    }
    Ok(pairs)
}

/// Rows of whitespace-separated numbers; blank lines and `#` comments are
/// skipped. Each row comes back with its 1-based line number.
fn numeric_rows(text: &str, width: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Parse { line: i + 1, message: format!("non-numeric field in {line:?}") })?;
        if values.len() != width {
            return Err(Error::Parse { line: i + 1, message: format!("expected {width} numbers, found {}", values.len()) });
        }
        rows.push((i + 1, values));
    }
    Ok(rows)
}

/// Correspondence file: one `X Y Z u v` line per point.
pub fn parse_correspondences(text: &str) -> Result<Vec<Correspondence>> {
    Ok(numeric_rows(text, 5)?
        .into_iter()
        .map(|(_, v)| Correspondence { p3d: Vector3::new(v[0], v[1], v[2]), p2d: Keypoint::new(v[3], v[4]) })
        .collect())
}

/// Intrinsics file: a single `fx fy cx cy` line.
pub fn parse_intrinsics(text: &str) -> Result<Intrinsics> {
    let rows = numeric_rows(text, 4)?;
    let [(line, v)] = rows.as_slice() else {
        return Err(Error::Parse { line: 1, message: format!("expected one intrinsics line, found {}", rows.len()) });
    };
    let intr = Intrinsics { fx: v[0], fy: v[1], cx: v[2], cy: v[3] };
    intr.validate().map_err(|e| Error::Parse { line: *line, message: e.to_string() })?;
    Ok(intr)
}

pub fn format_intrinsics(intr: &Intrinsics) -> String {
    format!("{} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy)
}

/// Extrinsics file: 12 numbers, `R` row-major then `t`, in any line layout.
pub fn parse_extrinsics(text: &str) -> Result<Extrinsics> {
    let values: Vec<f64> = numeric_rows(&text.split_whitespace().collect::<Vec<_>>().join("\n"), 1)?
        .into_iter()
        .map(|(_, v)| v[0])
        .collect();
    let v: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::Parse { line: 1, message: format!("expected 12 numbers, found {}", v.len()) })?;
    Extrinsics::from_array(&v)
}

/// One row of `R` per line, then `t`.
pub fn format_extrinsics(extr: &Extrinsics) -> String {
    let v = extr.to_array();
    v.chunks(3).map(|c| format!("{} {} {}\n", c[0], c[1], c[2])).collect()
}

/// Point file for projection: one `X Y Z` line per point.
pub fn parse_points3d(text: &str) -> Result<Vec<Vector3<f64>>> {
    Ok(numeric_rows(text, 3)?.into_iter().map(|(_, v)| Vector3::new(v[0], v[1], v[2])).collect())
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intr() -> Intrinsics {
        Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Extrinsics {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Extrinsics {
            rotation: Rotation3::new(axis * rng.random_range(0.0..1.2)).into_inner(),
            translation: Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)),
        }
    }

    /// Points in front of the camera, expressed in the sensor frame.
    fn synth(rng: &mut ChaCha8Rng, pose: &Extrinsics, n: usize, noise: f64) -> Vec<Correspondence> {
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let inv = pose.rotation.transpose();
        (0..n)
            .map(|_| {
                let pc = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(1.5..3.0));
                let p3d = inv * (pc - pose.translation);
                let mut p2d = project_point(&p3d, &intr(), pose).unwrap();
                if noise > 0.0 {
                    p2d.x += normal.sample(rng);
                    p2d.y += normal.sample(rng);
                }
                Correspondence { p3d, p2d }
            })
            .collect()
    }

    #[test]
    fn projection_examples() {
        let unit = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        let id = Extrinsics::identity();
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, 1.0), &unit, &id).unwrap(), Keypoint::new(0.0, 0.0));
        let p = project_point(&Vector3::new(0.1, 0.0, 1.0), &intr(), &id).unwrap();
        assert!((p.x - 370.0).abs() < 1e-12 && p.y == 240.0);
        let q = Vector3::new(0.3, -0.2, 2.0);
        let a = project_point(&q, &intr(), &id).unwrap();
        let b = project_point(&(q * 2.0), &intr(), &id).unwrap();
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
        assert!(matches!(
            project_point(&Vector3::new(0.0, 0.0, -1.0), &intr(), &id),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn joint_set_projection() {
        let id = Extrinsics::identity();
        let on_axis: Vec<_> = (1..=21).map(|i| Vector3::new(0.0, 0.0, i as f64 * 0.1)).collect();
        let js = project_joint_set(&on_axis, &intr(), &id).unwrap();
        assert_eq!(js.len(), 21);
        assert!(js.iter().all(|p| p.x == 320.0 && p.y == 240.0));

        let hand: Vec<_> = (0..21).map(|i| Vector3::new(-0.1 + i as f64 * 0.01, 0.02 * (i % 3) as f64, 1.0 + 0.01 * i as f64)).collect();
        let moved: Vec<_> = hand.iter().map(|p| p + Vector3::new(0.05, 0.0, 0.0)).collect();
        let a = project_joint_set(&hand, &intr(), &id).unwrap();
        let b = project_joint_set(&moved, &intr(), &id).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| q.x > p.x));

        let mut bad = hand.clone();
        bad[7].z = -0.5;
        match project_joint_set(&bad, &intr(), &id) {
            Err(Error::BehindCamera { index, .. }) => assert_eq!(index, 7),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn pnp_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corr = synth(&mut rng, &Extrinsics::identity(), 8, 0.0);
        let e = solve_pnp(&corr, &intr()).unwrap();
        assert!((e.rotation - Matrix3::identity()).norm() < 1e-6);
        assert!(e.translation.norm() < 1e-6);
    }

    #[test]
    fn pnp_roundtrip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let n = rng.random_range(8..=20);
            let corr = synth(&mut rng, &pose, n, 0.0);
            let e = solve_pnp(&corr, &intr()).unwrap();
            e.validate(1e-9).unwrap();
            assert!(reprojection_rms(&corr, &intr(), &e) < 1e-6);
            assert!((e.rotation - pose.rotation).norm() < 1e-6);
            assert!((e.translation - pose.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn gauss_newton_costs_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pose = random_pose(&mut rng);
            let corr = synth(&mut rng, &pose, 12, 2.0);
            // start from a perturbed pose so refinement has work to do
            let init = Extrinsics {
                rotation: (Rotation3::new(Vector3::new(0.05, -0.03, 0.02)) * Rotation3::from_matrix_unchecked(pose.rotation)).into_inner(),
                translation: pose.translation + Vector3::new(0.02, 0.01, -0.03),
            };
            let rep = refine_gauss_newton(&corr, &intr(), init, &PnpOptions::default()).unwrap();
            let mut prev = rep.initial_cost;
            for c in &rep.costs {
                assert!(*c <= prev);
                prev = *c;
            }
        }
    }

    #[test]
    fn pnp_rejects_degenerate_input() {
        let line: Vec<_> = (0..8)
            .map(|i| {
                let p3d = Vector3::new(0.1 * i as f64, 0.05 * i as f64, 2.0 + 0.1 * i as f64);
                Correspondence { p3d, p2d: project_point(&p3d, &intr(), &Extrinsics::identity()).unwrap() }
            })
            .collect();
        assert!(matches!(solve_pnp(&line, &intr()), Err(Error::Degenerate(_))));
        assert!(matches!(solve_pnp(&line[..5], &intr()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn extrinsics_array_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_pose(&mut rng);
        assert_eq!(Extrinsics::from_array(&e.to_array()).unwrap(), e);
        let mut bad = e.to_array();
        bad[0] += 0.1;
        assert!(Extrinsics::from_array(&bad).is_err());
    }

    fn stream(ts: &[f64]) -> Vec<TimedSample> {
        ts.iter().enumerate().map(|(i, t)| TimedSample::new(*t, format!("s{i}"))).collect()
    }

    #[test]
    fn sync_examples() {
        let pairs = synchronize_streams(&stream(&[0.0, 100.0, 200.0]), &stream(&[10.0, 110.0, 190.0]), 20.0).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(synchronize_streams(&stream(&[0.0, 10.0]), &stream(&[500.0, 600.0]), 20.0).unwrap().is_empty());
        let same = stream(&[1.0, 2.0, 3.0, 7.0]);
        assert_eq!(synchronize_streams(&same, &same, 0.0).unwrap().len(), 4);
        assert!(synchronize_streams(&stream(&[5.0, 1.0]), &same, 1.0).is_err());
    }

    #[test]
    fn sync_pairs_are_within_tolerance_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut a: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0.0..1000.0)).collect();
            let mut b: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0.0..1000.0)).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let tol = rng.random_range(0.0..60.0);
            let pairs = synchronize_streams(&stream(&a), &stream(&b), tol).unwrap();
            for w in pairs.windows(2) {
                assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
            for (i, j) in pairs {
                assert!((a[i] - b[j]).abs() <= tol);
            }
        }
    }

    #[test]
    fn text_formats_roundtrip() {
        let e = Extrinsics {
            rotation: *Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix(),
            translation: Vector3::new(0.1, -2.0, 5.5),
        };
        assert_eq!(parse_extrinsics(&format_extrinsics(&e)).unwrap(), e);
        assert_eq!(parse_intrinsics(&format_intrinsics(&intr())).unwrap(), intr());
        let corr = parse_correspondences("# header\n1 2 3 4 5\n\n-1 0.5 2 10 20 # trailing\n").unwrap();
        assert_eq!(corr.len(), 2);
        assert_eq!(corr[1].p3d, Vector3::new(-1.0, 0.5, 2.0));
        assert_eq!(corr[1].p2d, Keypoint::new(10.0, 20.0));
    }

    #[test]
    fn text_format_errors_name_the_line() {
        match parse_correspondences("1 2 3 4 5\n1 2 3 4\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_points3d("1 2 x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_intrinsics("1 1 0 0\n1 1 0 0\n").is_err());
        assert!(parse_intrinsics("-1 1 0 0\n").is_err());
        assert!(parse_extrinsics("1 0 0 0 1 0 0 0 1 0 0").is_err());
        assert!(parse_extrinsics("2 0 0 0 1 0 0 0 1 0 0 0").is_err());
    }
}
