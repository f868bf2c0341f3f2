//! Evaluation metrics: similarity-aligned position errors, diversity
//! (APD), nearest-neighbor distance to the training set, Fréchet distance
//! on pose features, and k-NN manifold precision/recall.

use crate::kinematics::{forward_kinematics, KinematicTree, PoseParams, ShapeParams};
use crate::numerics::{jacobi_eigen, sym_psd_sqrt, NumericsError};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate point cloud (rank < 2)")]
    Degenerate,
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("k = {k} must be smaller than the set size {n}")]
    BadK { k: usize, n: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

/// Similarity transform aligning X onto Y.
#[derive(Debug, Clone)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Array2<f64>,
    pub translation: [f64; 3],
}

fn centroid(x: &Array2<f64>) -> [f64; 3] {
    let n = x.ncols() as f64;
    [x.row(0).sum() / n, x.row(1).sum() / n, x.row(2).sum() / n]
}

/// Closed-form similarity alignment minimizing ||s R X + t - Y||_F.
/// The rotation comes from the maximal eigenvector of the quaternion
/// profile matrix, which is always a proper rotation (no reflections).
pub fn procrustes_align(
    x: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(Array2<f64>, Similarity), MetricError> {
    if x.nrows() != 3 || x.raw_dim() != y.raw_dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.ncols();
    if n < 3 {
        return Err(MetricError::TooFew { need: 3, got: n });
    }
    let cx = centroid(x);
    let cy = centroid(y);
    let mut s = [[0.0f64; 3]; 3]; // s[a][b] = sum_i xc_a yc_b
    let mut norm_x = 0.0;
    for i in 0..n {
        let xc = [x[[0, i]] - cx[0], x[[1, i]] - cx[1], x[[2, i]] - cx[2]];
        let yc = [y[[0, i]] - cy[0], y[[1, i]] - cy[1], y[[2, i]] - cy[2]];
        for a in 0..3 {
            norm_x += xc[a] * xc[a];
            for b in 0..3 {
                s[a][b] += xc[a] * yc[b];
            }
        }
    }
    // rank check on the centered X cloud: second singular value must be
    // meaningfully nonzero for the rotation to be determined
    {
        let mut gram = Array2::<f64>::zeros((3, 3));
        for i in 0..n {
            let xc = [x[[0, i]] - cx[0], x[[1, i]] - cx[1], x[[2, i]] - cx[2]];
            for a in 0..3 {
                for b in 0..3 {
                    gram[[a, b]] += xc[a] * xc[b];
                }
            }
        }
        let (mut w, _) = jacobi_eigen(&gram)?;
        w.as_slice_mut()
            .unwrap()
            .sort_by(|a, b| b.partial_cmp(a).unwrap());
        if w[1] <= 1e-12 * (1.0 + w[0]) {
            return Err(MetricError::Degenerate);
        }
    }
    let (sxx, sxy, sxz) = (s[0][0], s[0][1], s[0][2]);
    let (syx, syy, syz) = (s[1][0], s[1][1], s[1][2]);
    let (szx, szy, szz) = (s[2][0], s[2][1], s[2][2]);
    let nmat = ndarray::arr2(&[
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ]);
    let (w, v) = jacobi_eigen(&nmat)?;
    let kmax = (0..4).max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap()).unwrap();
    let q = [v[[0, kmax]], v[[1, kmax]], v[[2, kmax]], v[[3, kmax]]];
    let (qw, qx, qy, qz) = (q[0], q[1], q[2], q[3]);
    let rotation = ndarray::arr2(&[
        [
            1.0 - 2.0 * (qy * qy + qz * qz),
            2.0 * (qx * qy - qw * qz),
            2.0 * (qx * qz + qw * qy),
        ],
        [
            2.0 * (qx * qy + qw * qz),
            1.0 - 2.0 * (qx * qx + qz * qz),
            2.0 * (qy * qz - qw * qx),
        ],
        [
            2.0 * (qx * qz - qw * qy),
            2.0 * (qy * qz + qw * qx),
            1.0 - 2.0 * (qx * qx + qy * qy),
        ],
    ]);
    // optimal scale given the rotation
    let mut num = 0.0;
    for i in 0..n {
        let xc = [x[[0, i]] - cx[0], x[[1, i]] - cx[1], x[[2, i]] - cx[2]];
        let yc = [y[[0, i]] - cy[0], y[[1, i]] - cy[1], y[[2, i]] - cy[2]];
        for a in 0..3 {
            let rx = rotation[[a, 0]] * xc[0] + rotation[[a, 1]] * xc[1] + rotation[[a, 2]] * xc[2];
            num += yc[a] * rx;
        }
    }
    let scale = num / norm_x;
    let translation = {
        let mut t = [0.0; 3];
        for a in 0..3 {
            let rx = rotation[[a, 0]] * cx[0] + rotation[[a, 1]] * cx[1] + rotation[[a, 2]] * cx[2];
            t[a] = cy[a] - scale * rx;
        }
        t
    };
    let mut aligned = Array2::<f64>::zeros(x.raw_dim());
    for i in 0..n {
        for a in 0..3 {
            let rx = rotation[[a, 0]] * x[[0, i]]
                + rotation[[a, 1]] * x[[1, i]]
                + rotation[[a, 2]] * x[[2, i]];
            aligned[[a, i]] = scale * rx + translation[a];
        }
    }
    Ok((
        aligned,
        Similarity {
            scale,
            rotation,
            translation,
        },
    ))
}

fn mean_point_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.ncols();
    let mut acc = 0.0;
    for i in 0..n {
        let dx = a[[0, i]] - b[[0, i]];
        let dy = a[[1, i]] - b[[1, i]];
        let dz = a[[2, i]] - b[[2, i]];
        acc += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    acc / n as f64
}

/// Mean Euclidean distance between corresponding points, optionally after
/// similarity alignment of the prediction onto the ground truth.
pub fn position_error(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    aligned: bool,
) -> Result<f64, MetricError> {
    if pred.raw_dim() != gt.raw_dim() || pred.nrows() != 3 {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if aligned {
        let (al, _) = procrustes_align(pred, gt)?;
        Ok(mean_point_distance(&al, gt))
    } else {
        Ok(mean_point_distance(pred, gt))
    }
}

/// Average pairwise distance across a solution set (joint clouds).
pub fn apd_joints(solutions: &[Array2<f64>]) -> Result<f64, MetricError> {
    if solutions.len() < 2 {
        return Err(MetricError::TooFew {
            need: 2,
            got: solutions.len(),
        });
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..solutions.len() {
        for j in (i + 1)..solutions.len() {
            if solutions[i].raw_dim() != solutions[j].raw_dim() {
                return Err(MetricError::ShapeMismatch("solution shapes differ".into()));
            }
            acc += mean_point_distance(&solutions[i], &solutions[j]);
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// FK joints of a pose vector with zero shape and identity global pose.
pub fn pose_to_joints(tree: &KinematicTree, pose: &[f64]) -> Result<Array2<f64>, MetricError> {
    let params = PoseParams::from_pose_vector(tree, pose)?;
    Ok(forward_kinematics(tree, &params, &ShapeParams::zero(tree))?)
}

pub fn apd_poses(poses: &[Vec<f64>], tree: &KinematicTree) -> Result<f64, MetricError> {
    let joints: Result<Vec<_>, _> = poses.iter().map(|p| pose_to_joints(tree, p)).collect();
    apd_joints(&joints?)
}

/// Mean distance from each sample to its nearest training item, measured
/// in FK joint space.
pub fn d_nn_joints(
    samples: &[Array2<f64>],
    train: &[Array2<f64>],
) -> Result<f64, MetricError> {
    if samples.is_empty() || train.is_empty() {
        return Err(MetricError::TooFew {
            need: 1,
            got: 0,
        });
    }
    let mut acc = 0.0;
    for s in samples {
        let mut best = f64::INFINITY;
        for t in train {
            if s.raw_dim() != t.raw_dim() {
                return Err(MetricError::ShapeMismatch("joint shapes differ".into()));
            }
            best = best.min(mean_point_distance(s, t));
        }
        acc += best;
    }
    Ok(acc / samples.len() as f64)
}

pub fn d_nn_poses(
    samples: &[Vec<f64>],
    train: &[Vec<f64>],
    tree: &KinematicTree,
) -> Result<f64, MetricError> {
    let sj: Result<Vec<_>, _> = samples.iter().map(|p| pose_to_joints(tree, p)).collect();
    let tj: Result<Vec<_>, _> = train.iter().map(|p| pose_to_joints(tree, p)).collect();
    d_nn_joints(&sj?, &tj?)
}

fn sample_moments(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mean = Array1::from_iter((0..d).map(|j| x.column(j).sum() / nf));
    let mut cov = Array2::<f64>::zeros((d, d));
    for r in 0..n {
        for a in 0..d {
            let xa = x[[r, a]] - mean[a];
            for b in a..d {
                cov[[a, b]] += xa * (x[[r, b]] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[[a, b]] / nf;
            cov[[a, b]] = v;
            cov[[b, a]] = v;
        }
    }
    (mean, cov)
}

/// Fréchet distance between two Gaussians given their moments.
pub fn fid_gaussian(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> Result<f64, MetricError> {
    let sqrt_a = sym_psd_sqrt(cov_a)?;
    let inner = sqrt_a.dot(cov_b).dot(&sqrt_a);
    let cross = sym_psd_sqrt(&inner)?;
    let mut dist = 0.0;
    for i in 0..mu_a.len() {
        let d = mu_a[i] - mu_b[i];
        dist += d * d;
    }
    for i in 0..cov_a.nrows() {
        dist += cov_a[[i, i]] + cov_b[[i, i]] - 2.0 * cross[[i, i]];
    }
    // roundoff can push an exact zero slightly negative
    Ok(dist.max(0.0))
}

/// Fréchet distance between two sample sets (rows = samples). Features are
/// expected to be normalized pose vectors. Rank-deficient covariances are
/// regularized by 1e-8 I with a warning.
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, MetricError> {
    if a.ncols() != b.ncols() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} vs {} feature dims",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols();
    let (mu_a, mut cov_a) = sample_moments(a);
    let (mu_b, mut cov_b) = sample_moments(b);
    let deficient = a.nrows() <= d || b.nrows() <= d;
    if deficient {
        eprintln!(
            "warning: covariance rank-deficient ({}x{} / {}x{} samples), regularizing by 1e-8 I",
            a.nrows(),
            d,
            b.nrows(),
            d
        );
        for i in 0..d {
            cov_a[[i, i]] += 1e-8;
            cov_b[[i, i]] += 1e-8;
        }
    }
    fid_gaussian(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// k-NN manifold precision (fidelity of generated samples) and recall
/// (coverage of the real distribution). Rows are samples.
pub fn precision_recall(
    gen: &Array2<f64>,
    real: &Array2<f64>,
    k: usize,
) -> Result<(f64, f64), MetricError> {
    if gen.ncols() != real.ncols() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} vs {} feature dims",
            gen.ncols(),
            real.ncols()
        )));
    }
    if k >= gen.nrows() || k >= real.nrows() {
        return Err(MetricError::BadK {
            k,
            n: gen.nrows().min(real.nrows()),
        });
    }
    let dist = |x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize| {
        let mut acc = 0.0;
        for c in 0..x.ncols() {
            let d = x[[i, c]] - y[[j, c]];
            acc += d * d;
        }
        acc.sqrt()
    };
    // radius of each point's k-th nearest neighbor within its own set
    let radii = |s: &Array2<f64>| -> Vec<f64> {
        let n = s.nrows();
        (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(s, i, s, j))
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds[k - 1]
            })
            .collect()
    };
    let covered = |points: &Array2<f64>, manifold: &Array2<f64>, radii: &[f64]| -> f64 {
        let n = points.nrows();
        let hits = (0..n)
            .filter(|&i| {
                (0..manifold.nrows()).any(|j| dist(points, i, manifold, j) <= radii[j])
            })
            .count();
        hits as f64 / n as f64
    };
    let real_radii = radii(real);
    let gen_radii = radii(gen);
    let precision = covered(gen, real, &real_radii);
    let recall = covered(real, gen, &gen_radii);
    Ok((precision, recall))
}

/// Flat report of everything the evaluation pipeline measures. Entries the
/// run did not compute stay absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: Option<f64>,
    pub mpvpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub pa_mpvpe: Option<f64>,
    pub apd: Option<f64>,
    pub d_nn: Option<f64>,
    pub fid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "mpjpe,mpvpe,pa_mpjpe,pa_mpvpe,apd,d_nn,fid,precision,recall,sample_count"
    }

    pub fn to_csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            f(self.mpjpe),
            f(self.mpvpe),
            f(self.pa_mpjpe),
            f(self.pa_mpvpe),
            f(self.apd),
            f(self.d_nn),
            f(self.fid),
            f(self.precision),
            f(self.recall),
            self.sample_count
        )
    }
}
