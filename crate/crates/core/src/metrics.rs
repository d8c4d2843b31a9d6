//! Pose error metrics: EPE, MPJPE and PA-MPJPE with closed-form similarity
//! (Procrustes) alignment.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<usize> {
    if pred.shape() != gt.shape() || pred.shape()[1] != 3 {
        return Err(Error::InvalidShape(format!(
            "pose shapes {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(pred.shape()[0])
}

/// Mean per-joint Euclidean distance, no alignment. Millimeters.
pub fn epe(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let k = check_pair(pred, gt)?;
    let mut total = 0.0;
    for j in 0..k {
        let dx = pred[[j, 0]] - gt[[j, 0]];
        let dy = pred[[j, 1]] - gt[[j, 1]];
        let dz = pred[[j, 2]] - gt[[j, 2]];
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    Ok(total / k as f64)
}

/// Mean per-joint distance after root-joint translation alignment.
pub fn mpjpe(pred: &Array2<f64>, gt: &Array2<f64>, root_index: usize) -> Result<f64> {
    let k = check_pair(pred, gt)?;
    if root_index >= k {
        return Err(Error::InvalidParam(format!(
            "root index {root_index} out of range for {k} joints"
        )));
    }
    let rel = |p: &Array2<f64>| {
        let r = [p[[root_index, 0]], p[[root_index, 1]], p[[root_index, 2]]];
        let mut out = p.clone();
        for mut row in out.rows_mut() {
            row[0] -= r[0];
            row[1] -= r[1];
            row[2] -= r[2];
        }
        out
    };
    epe(&rel(pred), &rel(gt))
}

/// Jacobi eigendecomposition of a symmetric 3x3 matrix.
/// Returns (eigenvalues, eigenvectors as columns), descending.
fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..64 {
        // Largest off-diagonal element.
        let mut p = 0;
        let mut q = 1;
        let mut max = a[0][1].abs();
        if a[0][2].abs() > max {
            p = 0;
            q = 2;
            max = a[0][2].abs();
        }
        if a[1][2].abs() > max {
            p = 1;
            q = 2;
            max = a[1][2].abs();
        }
        if max < 1e-15 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        let mut next = a;
        next[p][p] = a[p][p] - t * a[p][q];
        next[q][q] = a[q][q] + t * a[p][q];
        next[p][q] = 0.0;
        next[q][p] = 0.0;
        for r in 0..3 {
            if r != p && r != q {
                next[r][p] = c * a[r][p] - s * a[r][q];
                next[p][r] = next[r][p];
                next[r][q] = s * a[r][p] + c * a[r][q];
                next[q][r] = next[r][q];
            }
        }
        a = next;
        for row in v.iter_mut() {
            let (vp, vq) = (row[p], row[q]);
            row[p] = c * vp - s * vq;
            row[q] = s * vp + c * vq;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = [[0.0; 3]; 3];
    for (col, &o) in order.iter().enumerate() {
        for r in 0..3 {
            vecs[r][col] = v[r][o];
        }
    }
    (vals, vecs)
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn column(m: &[[f64; 3]; 3], j: usize) -> [f64; 3] {
    [m[0][j], m[1][j], m[2][j]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-300 {
        return [0.0; 3];
    }
    [v[0] / n, v[1] / n, v[2] / n]
}

/// SVD of a 3x3 matrix via the eigendecomposition of `m^T m`.
/// Returns (u, singular values descending, v) with `m = u * diag(s) * v^T`.
fn svd3(m: &[[f64; 3]; 3]) -> ([[f64; 3]; 3], [f64; 3], [[f64; 3]; 3]) {
    let mut mtm = [[0.0; 3]; 3];
    for (i, row) in mtm.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| m[k][i] * m[k][j]).sum();
        }
    }
    let (vals, v) = symmetric_eigen3(mtm);
    let sv = [
        vals[0].max(0.0).sqrt(),
        vals[1].max(0.0).sqrt(),
        vals[2].max(0.0).sqrt(),
    ];
    let scale = sv[0].max(1e-300);
    let mut u = [[0.0; 3]; 3];
    let mut ucols: Vec<[f64; 3]> = Vec::with_capacity(3);
    for j in 0..3 {
        if sv[j] > 1e-12 * scale {
            let vj = column(&v, j);
            let mut col = [0.0; 3];
            for (r, c) in col.iter_mut().enumerate() {
                *c = (0..3).map(|k| m[r][k] * vj[k]).sum::<f64>() / sv[j];
            }
            ucols.push(normalize(col));
        } else {
            // Rank-deficient: complete to an orthonormal basis.
            let col = match ucols.len() {
                0 => [1.0, 0.0, 0.0],
                1 => {
                    let a = ucols[0];
                    let pick = if a[0].abs() < 0.9 {
                        [1.0, 0.0, 0.0]
                    } else {
                        [0.0, 1.0, 0.0]
                    };
                    normalize(cross(a, pick))
                }
                _ => normalize(cross(ucols[0], ucols[1])),
            };
            ucols.push(col);
        }
    }
    for (r, row) in u.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = ucols[j][r];
        }
    }
    (u, sv, v)
}

/// The similarity transform found by Procrustes alignment.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, pose: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(pose.raw_dim());
        for (i, row) in pose.rows().into_iter().enumerate() {
            for r in 0..3 {
                out[[i, r]] = self.scale
                    * (self.rotation[r][0] * row[0]
                        + self.rotation[r][1] * row[1]
                        + self.rotation[r][2] * row[2])
                    + self.translation[r];
            }
        }
        out
    }
}

/// Closed-form least-squares similarity alignment of `pred` onto `gt`:
/// rotation from the orthogonal solution with reflection correction,
/// uniform scale and translation. Returns the aligned pose and transform.
pub fn procrustes_align(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(Array2<f64>, Similarity)> {
    let k = check_pair(pred, gt)?;
    if k < 3 {
        return Err(Error::DegeneratePose(format!(
            "need at least 3 joints, got {k}"
        )));
    }
    let mean = |p: &Array2<f64>| {
        let mut m = [0.0; 3];
        for row in p.rows() {
            for (a, v) in m.iter_mut().zip(row.iter()) {
                *a += v;
            }
        }
        m.map(|v| v / k as f64)
    };
    let mu_p = mean(pred);
    let mu_g = mean(gt);

    // Cross-covariance A = sum_i (g_i - mu_g)(p_i - mu_p)^T and the
    // centered energy of the prediction.
    let mut a = [[0.0; 3]; 3];
    let mut pred_energy = 0.0;
    for i in 0..k {
        let pc = [
            pred[[i, 0]] - mu_p[0],
            pred[[i, 1]] - mu_p[1],
            pred[[i, 2]] - mu_p[2],
        ];
        let gc = [gt[[i, 0]] - mu_g[0], gt[[i, 1]] - mu_g[1], gt[[i, 2]] - mu_g[2]];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell += gc[r] * pc[c];
            }
        }
        pred_energy += pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
    }
    if pred_energy < 1e-12 {
        return Err(Error::DegeneratePose(
            "prediction joints are all coincident".into(),
        ));
    }

    let (u, sv, v) = svd3(&a);
    // Reflection correction: force a proper rotation.
    let sign = if det3(&u) * det3(&v) < 0.0 { -1.0 } else { 1.0 };
    let mut vt = [[0.0; 3]; 3];
    for (r, row) in vt.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = v[c][r];
        }
    }
    let mut ud = u;
    for row in ud.iter_mut() {
        row[2] *= sign;
    }
    let rotation = matmul3(&ud, &vt);
    let scale = (sv[0] + sv[1] + sign * sv[2]) / pred_energy;
    let translation = [
        mu_g[0] - scale * (rotation[0][0] * mu_p[0] + rotation[0][1] * mu_p[1] + rotation[0][2] * mu_p[2]),
        mu_g[1] - scale * (rotation[1][0] * mu_p[0] + rotation[1][1] * mu_p[1] + rotation[1][2] * mu_p[2]),
        mu_g[2] - scale * (rotation[2][0] * mu_p[0] + rotation[2][1] * mu_p[1] + rotation[2][2] * mu_p[2]),
    ];
    let sim = Similarity {
        rotation,
        scale,
        translation,
    };
    Ok((sim.apply(pred), sim))
}

/// Mean per-joint distance after Procrustes alignment.
pub fn pa_mpjpe(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let (aligned, _) = procrustes_align(pred, gt)?;
    epe(&aligned, gt)
}

/// Per-domain aggregate written by the evaluation driver.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub epe_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub n_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{self, Stream};
    use ndarray::array;
    use rand::Rng;

    fn random_pose(rng: &mut Stream, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((k, 3), |_| rng.random_range(-100.0..100.0))
    }

    fn rotation_from_euler(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }

    fn apply(pose: &Array2<f64>, r: &[[f64; 3]; 3], s: f64, t: [f64; 3]) -> Array2<f64> {
        Similarity {
            rotation: *r,
            scale: s,
            translation: t,
        }
        .apply(pose)
    }

    #[test]
    fn epe_zero_for_identical_poses() {
        let p = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(epe(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn epe_345_triangle() {
        let gt = array![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut pred = gt.clone();
        for mut row in pred.rows_mut() {
            row[0] += 3.0;
            row[1] += 4.0;
        }
        assert!((epe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn epe_invariant_to_consistent_permutation() {
        let mut rng = seeds::stream(1);
        let pred = random_pose(&mut rng, 6);
        let gt = random_pose(&mut rng, 6);
        let perm = [3usize, 0, 5, 2, 4, 1];
        let permute = |p: &Array2<f64>| {
            let mut out = Array2::zeros((6, 3));
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&p.row(src));
            }
            out
        };
        let a = epe(&pred, &gt).unwrap();
        let b = epe(&permute(&pred), &permute(&gt)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_removes_constant_offset() {
        let mut rng = seeds::stream(2);
        let gt = random_pose(&mut rng, 8);
        let mut pred = gt.clone();
        for mut row in pred.rows_mut() {
            row[0] += 17.0;
            row[1] -= 4.0;
            row[2] += 2.5;
        }
        assert!(mpjpe(&pred, &gt, 0).unwrap() < 1e-12);
    }

    #[test]
    fn mpjpe_single_offset_joint() {
        // One non-root joint offset by (0,0,2) in the root-relative frame,
        // K=4: mean error = 2/4.
        let gt = array![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0]
        ];
        let mut pred = gt.clone();
        pred[[2, 2]] += 2.0;
        assert!((mpjpe(&pred, &gt, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_rejects_bad_root() {
        let p = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(mpjpe(&p, &p, 3), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn procrustes_identity_for_equal_poses() {
        let mut rng = seeds::stream(3);
        let p = random_pose(&mut rng, 5);
        let (aligned, sim) = procrustes_align(&p, &p).unwrap();
        for (a, b) in aligned.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((sim.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_similarity_exactly() {
        let mut rng = seeds::stream(4);
        for _ in 0..100 {
            let gt = random_pose(&mut rng, 8);
            let r = rotation_from_euler(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let pred = apply(&gt, &r, 2.5, [30.0, -12.0, 5.0]);
            let (aligned, _) = procrustes_align(&pred, &gt).unwrap();
            for (a, b) in aligned.iter().zip(gt.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn procrustes_rejects_coincident_pred() {
        let pred = Array2::from_elem((4, 3), 1.0);
        let gt = array![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0]
        ];
        assert!(matches!(
            procrustes_align(&pred, &gt),
            Err(Error::DegeneratePose(_))
        ));
    }

    #[test]
    fn procrustes_beats_brute_force_grid() {
        // Oracle: exhaustive search over a 20^3 Euler grid and 50 scales with
        // the optimal translation, on noisy poses. The closed form must be at
        // least as good on every case.
        let mut rng = seeds::stream(5);
        for case in 0..50 {
            let gt = random_pose(&mut rng, 6);
            let r = rotation_from_euler(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let mut pred = apply(&gt, &r, rng.random_range(0.5..2.0), [10.0, 5.0, -8.0]);
            for v in pred.iter_mut() {
                *v += rng.random_range(-10.0..10.0);
            }

            let (aligned, _) = procrustes_align(&pred, &gt).unwrap();
            let closed: f64 = aligned
                .rows()
                .into_iter()
                .zip(gt.rows())
                .map(|(a, g)| {
                    (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2)
                })
                .sum();

            let mut best = f64::INFINITY;
            let steps = 20;
            for ia in 0..steps {
                for ib in 0..steps {
                    for ic in 0..steps {
                        let a = -std::f64::consts::PI
                            + 2.0 * std::f64::consts::PI * ia as f64 / steps as f64;
                        let b = -std::f64::consts::FRAC_PI_2
                            + std::f64::consts::PI * ib as f64 / steps as f64;
                        let c = -std::f64::consts::PI
                            + 2.0 * std::f64::consts::PI * ic as f64 / steps as f64;
                        let rot = rotation_from_euler(a, b, c);
                        for is in 0..50 {
                            let s = 0.1 + 2.9 * is as f64 / 49.0;
                            // Optimal translation matches the means.
                            let cand = brute_residual(&pred, &gt, &rot, s);
                            if cand < best {
                                best = cand;
                            }
                        }
                    }
                }
            }
            assert!(
                closed <= best + 1e-9,
                "case {case}: closed {closed} > grid {best}"
            );
        }
    }

    fn brute_residual(pred: &Array2<f64>, gt: &Array2<f64>, rot: &[[f64; 3]; 3], s: f64) -> f64 {
        let k = pred.shape()[0] as f64;
        let mut mu_p = [0.0; 3];
        let mut mu_g = [0.0; 3];
        for i in 0..pred.shape()[0] {
            for a in 0..3 {
                mu_p[a] += pred[[i, a] ] / k;
                mu_g[a] += gt[[i, a]] / k;
            }
        }
        let mut total = 0.0;
        for i in 0..pred.shape()[0] {
            let pc = [
                pred[[i, 0]] - mu_p[0],
                pred[[i, 1]] - mu_p[1],
                pred[[i, 2]] - mu_p[2],
            ];
            for a in 0..3 {
                let rp = rot[a][0] * pc[0] + rot[a][1] * pc[1] + rot[a][2] * pc[2];
                let d = s * rp - (gt[[i, a]] - mu_g[a]);
                total += d * d;
            }
        }
        total
    }

    #[test]
    fn pa_mpjpe_zero_for_similarity_transformed_gt() {
        let mut rng = seeds::stream(6);
        for _ in 0..100 {
            let gt = random_pose(&mut rng, 8);
            let r = rotation_from_euler(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let pred = apply(&gt, &r, rng.random_range(0.2..3.0), [1.0, 2.0, 3.0]);
            assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pa_mpjpe_not_above_mpjpe() {
        let mut rng = seeds::stream(7);
        for _ in 0..500 {
            let pred = random_pose(&mut rng, 8);
            let gt = random_pose(&mut rng, 8);
            let pa = pa_mpjpe(&pred, &gt).unwrap();
            let mp = mpjpe(&pred, &gt, 0).unwrap();
            assert!(pa <= mp + 1e-9, "pa {pa} > mpjpe {mp}");
        }
    }

    #[test]
    fn metrics_invariant_under_simultaneous_rigid_motion() {
        let mut rng = seeds::stream(8);
        let pred = random_pose(&mut rng, 8);
        let gt = random_pose(&mut rng, 8);
        let r = rotation_from_euler(0.3, -0.7, 1.1);
        let t = [40.0, -3.0, 9.0];
        let (p2, g2) = (apply(&pred, &r, 1.0, t), apply(&gt, &r, 1.0, t));
        assert!((epe(&pred, &gt).unwrap() - epe(&p2, &g2).unwrap()).abs() < 1e-9);
        assert!((mpjpe(&pred, &gt, 0).unwrap() - mpjpe(&p2, &g2, 0).unwrap()).abs() < 1e-9);
        assert!((pa_mpjpe(&pred, &gt).unwrap() - pa_mpjpe(&p2, &g2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn procrustes_is_idempotent() {
        let mut rng = seeds::stream(9);
        let pred = random_pose(&mut rng, 8);
        let gt = random_pose(&mut rng, 8);
        let (aligned, _) = procrustes_align(&pred, &gt).unwrap();
        let (again, _) = procrustes_align(&aligned, &gt).unwrap();
        for (a, b) in aligned.iter().zip(again.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
