//! Synthetic ground-truth pose distribution: a Gaussian mixture over the
//! pose vector with optional mirrored-hand structure, sequence generation
//! for motion tasks, an exact conditional oracle for completion baselines,
//! and dataset generation with train-only normalization statistics.

use crate::diffusion::NormStats;
use crate::kinematics::{mirror_hand_block, mirror_signs, KinematicTree};
use crate::numerics::{psd_factor, psd_inv_logdet, NumericsError, Rng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid mixture spec: {0}")]
    BadSpec(String),
    #[error("observation is improbable under every mixture component")]
    ImprobableObservation,
    #[error("observed dims/values mismatch or out of range")]
    BadObservation,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("bad dataset file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance entries. For mirrored components the right-hand
    /// block is overridden at generation time, so its entries here are
    /// ignored in favor of the mirror relation.
    pub var: Vec<f64>,
    pub mirrored_hands: bool,
}

/// Gaussian mixture over pose vectors. Components flagged mirrored
/// regenerate the right-hand block as mirror(left hand) plus small noise,
/// which induces a dense cross-block covariance the oracle accounts for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<Component>,
    pub left_hand: Range<usize>,
    pub right_hand: Range<usize>,
    pub mirror_noise_std: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        if self.components.is_empty() {
            return bad("no components".into());
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {wsum}"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.dim || c.var.len() != self.dim {
                return bad(format!("component {k} dim mismatch"));
            }
            if c.var.iter().any(|v| *v < 0.0) {
                return bad(format!("component {k} has negative variance"));
            }
        }
        let any_mirror = self.components.iter().any(|c| c.mirrored_hands);
        if any_mirror {
            if self.left_hand.len() != self.right_hand.len()
                || self.left_hand.is_empty()
                || self.right_hand.end > self.dim
                || self.left_hand.end > self.right_hand.start
            {
                return bad("mirrored components need disjoint equal-size hand blocks".into());
            }
            if self.mirror_noise_std < 0.0 {
                return bad("mirror noise std negative".into());
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Effective component mean: mirrored components pin the right-hand
    /// block to the mirror of the left-hand mean.
    pub fn component_mean(&self, k: usize) -> Vec<f64> {
        let c = &self.components[k];
        let mut m = c.mean.clone();
        if c.mirrored_hands {
            let lh = &c.mean[self.left_hand.clone()];
            let rh = mirror_hand_block(lh);
            m[self.right_hand.clone()].copy_from_slice(&rh);
        }
        m
    }

    /// Dense effective covariance of one component, including the
    /// cross-block correlation a mirrored right hand introduces.
    pub fn component_cov(&self, k: usize) -> Array2<f64> {
        let c = &self.components[k];
        let d = self.dim;
        let mut cov = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            cov[[i, i]] = c.var[i];
        }
        if c.mirrored_hands {
            let signs = mirror_signs(self.left_hand.len());
            let nu2 = self.mirror_noise_std * self.mirror_noise_std;
            for (off, s) in signs.iter().enumerate() {
                let l = self.left_hand.start + off;
                let r = self.right_hand.start + off;
                cov[[r, r]] = c.var[l] + nu2;
                cov[[l, r]] = s * c.var[l];
                cov[[r, l]] = s * c.var[l];
            }
        }
        cov
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Default ground-truth distribution over the standard 63-dim figure:
/// six components, three of them with mirrored hands.
pub fn default_spec() -> MixtureSpec {
    let tree = KinematicTree::default_figure();
    let split = tree.part_split();
    let d = split.total();
    let mut rng = Rng::new(0xD47A_5EED);
    let mut components = Vec::new();
    for k in 0..6 {
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..d {
            mean[i] = rng.uniform_in(-0.6, 0.6);
            // angle stds per block; expression coefficients are wider
            let std = if split.body.contains(&i) {
                0.3
            } else if split.left_hand.contains(&i) || split.right_hand.contains(&i) {
                0.2
            } else if i < split.face.start + 3 {
                0.3 // jaw joint angles
            } else {
                0.5 // expression coefficients
            };
            var[i] = std * std;
        }
        components.push(Component {
            weight: 1.0 / 6.0,
            mean,
            var,
            mirrored_hands: k % 2 == 0,
        });
    }
    MixtureSpec {
        dim: d,
        components,
        left_hand: split.left_hand,
        right_hand: split.right_hand,
        mirror_noise_std: 0.05,
    }
}

pub fn sample_gt_pose(spec: &MixtureSpec, rng: &mut Rng) -> Vec<f64> {
    let k = rng.categorical(&spec.weights());
    sample_component(spec, k, rng)
}

fn sample_component(spec: &MixtureSpec, k: usize, rng: &mut Rng) -> Vec<f64> {
    let c = &spec.components[k];
    let mut x: Vec<f64> = (0..spec.dim)
        .map(|i| c.mean[i] + c.var[i].sqrt() * rng.normal())
        .collect();
    if c.mirrored_hands {
        let lh = x[spec.left_hand.clone()].to_vec();
        let mirrored = mirror_hand_block(&lh);
        for (off, m) in mirrored.into_iter().enumerate() {
            x[spec.right_hand.start + off] = m + spec.mirror_noise_std * rng.normal();
        }
    }
    x
}

/// Mean-reverting sequence around one component mean. `rate` is the
/// continuous reversion rate: 0 gives a pure random walk, large values
/// pin every frame to the component mean.
pub fn sample_gt_sequence(
    spec: &MixtureSpec,
    frames: usize,
    rate: f64,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    assert!(frames >= 2, "need at least two frames");
    let k = rng.categorical(&spec.weights());
    let mean = spec.component_mean(k);
    let c = &spec.components[k];
    let theta = 1.0 - (-rate.max(0.0)).exp();
    let step: Vec<f64> = c.var.iter().map(|v| 0.2 * v.sqrt()).collect();
    let mut x = mean.clone();
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        for i in 0..spec.dim {
            x[i] += theta * (mean[i] - x[i]) + step[i] * rng.normal();
        }
        out.push(x.clone());
    }
    out
}

/// Exact conditional of the mixture given observed dimensions.
pub struct Conditional {
    /// Full-dimension posterior samples, observed dims fixed at y.
    pub samples: Vec<Vec<f64>>,
    pub posterior_mean: Vec<f64>,
    pub responsibilities: Vec<f64>,
}

pub fn conditional_oracle(
    spec: &MixtureSpec,
    obs_dims: &[usize],
    obs_vals: &[f64],
    n: usize,
    rng: &mut Rng,
) -> Result<Conditional, SynthError> {
    spec.validate()?;
    if obs_dims.is_empty()
        || obs_dims.len() != obs_vals.len()
        || obs_dims.iter().any(|&i| i >= spec.dim)
        || obs_vals.iter().any(|v| !v.is_finite())
    {
        return Err(SynthError::BadObservation);
    }
    let observed: Vec<bool> = {
        let mut m = vec![false; spec.dim];
        for &i in obs_dims {
            m[i] = true;
        }
        m
    };
    let unobs: Vec<usize> = (0..spec.dim).filter(|&i| !observed[i]).collect();
    let no = obs_dims.len();
    let nu = unobs.len();
    let kk = spec.components.len();

    struct CondComp {
        loglik: f64,
        mean_u: Vec<f64>,
        factor_u: Array2<f64>, // L with L L^T = conditional covariance
    }
    let mut comps = Vec::with_capacity(kk);
    for k in 0..kk {
        let mu = spec.component_mean(k);
        let cov = spec.component_cov(k);
        let sigma_oo = Array2::from_shape_fn((no, no), |(a, b)| cov[[obs_dims[a], obs_dims[b]]]);
        let sigma_uo = Array2::from_shape_fn((nu, no), |(a, b)| cov[[unobs[a], obs_dims[b]]]);
        let sigma_uu = Array2::from_shape_fn((nu, nu), |(a, b)| cov[[unobs[a], unobs[b]]]);
        let (inv_oo, logdet_oo) = psd_inv_logdet(&sigma_oo)?;
        let resid: Vec<f64> = (0..no).map(|a| obs_vals[a] - mu[obs_dims[a]]).collect();
        let mut quad = 0.0;
        let mut inv_resid = vec![0.0; no];
        for a in 0..no {
            for b in 0..no {
                inv_resid[a] += inv_oo[[a, b]] * resid[b];
            }
            quad += resid[a] * inv_resid[a];
        }
        let loglik = spec.components[k].weight.max(1e-300).ln()
            - 0.5 * (quad + logdet_oo + no as f64 * (2.0 * std::f64::consts::PI).ln());
        // conditional mean and covariance of the unobserved block
        let mut mean_u: Vec<f64> = (0..nu).map(|a| mu[unobs[a]]).collect();
        for a in 0..nu {
            for b in 0..no {
                mean_u[a] += sigma_uo[[a, b]] * inv_resid[b];
            }
        }
        let gain = sigma_uo.dot(&inv_oo); // (nu, no)
        let cond_cov = &sigma_uu - &gain.dot(&sigma_uo.t());
        let factor_u = if nu > 0 {
            psd_factor(&cond_cov)?
        } else {
            Array2::zeros((0, 0))
        };
        comps.push(CondComp {
            loglik,
            mean_u,
            factor_u,
        });
    }

    let max_ll = comps.iter().map(|c| c.loglik).fold(f64::NEG_INFINITY, f64::max);
    if !max_ll.is_finite() || max_ll < -700.0 {
        return Err(SynthError::ImprobableObservation);
    }
    let mut resp: Vec<f64> = comps.iter().map(|c| (c.loglik - max_ll).exp()).collect();
    let z: f64 = resp.iter().sum();
    for r in resp.iter_mut() {
        *r /= z;
    }

    let mut posterior_mean = vec![0.0; spec.dim];
    for (a, &i) in obs_dims.iter().enumerate() {
        posterior_mean[i] = obs_vals[a];
    }
    for (k, c) in comps.iter().enumerate() {
        for (a, &i) in unobs.iter().enumerate() {
            posterior_mean[i] += resp[k] * c.mean_u[a];
        }
    }

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.categorical(&resp);
        let z: Vec<f64> = (0..nu).map(|_| rng.normal()).collect();
        let mut x = vec![0.0; spec.dim];
        for (a, &i) in obs_dims.iter().enumerate() {
            x[i] = obs_vals[a];
        }
        for (a, &i) in unobs.iter().enumerate() {
            let mut v = comps[k].mean_u[a];
            for b in 0..nu {
                v += comps[k].factor_u[[a, b]] * z[b];
            }
            x[i] = v;
        }
        samples.push(x);
    }
    Ok(Conditional {
        samples,
        posterior_mean,
        responsibilities: resp,
    })
}

/// Mixture log-density of a full pose vector (used by metric sanity tests).
pub fn log_density(spec: &MixtureSpec, x: &[f64]) -> Result<f64, SynthError> {
    if x.len() != spec.dim {
        return Err(SynthError::BadObservation);
    }
    let mut lls = Vec::with_capacity(spec.components.len());
    for k in 0..spec.components.len() {
        let mu = spec.component_mean(k);
        let cov = spec.component_cov(k);
        let (inv, logdet) = psd_inv_logdet(&cov)?;
        let r: Vec<f64> = (0..spec.dim).map(|i| x[i] - mu[i]).collect();
        let mut quad = 0.0;
        for i in 0..spec.dim {
            for j in 0..spec.dim {
                quad += r[i] * inv[[i, j]] * r[j];
            }
        }
        lls.push(
            spec.components[k].weight.max(1e-300).ln()
                - 0.5 * (quad + logdet + spec.dim as f64 * (2.0 * std::f64::consts::PI).ln()),
        );
    }
    let m = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + lls.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
}

/// Marginal mixture over one index range of the pose vector.
pub fn marginal_spec(spec: &MixtureSpec, block: Range<usize>) -> MixtureSpec {
    let nu2 = spec.mirror_noise_std * spec.mirror_noise_std;
    let components = spec
        .components
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mean_full = spec.component_mean(k);
            let mut var = c.var[block.clone()].to_vec();
            if c.mirrored_hands && block == spec.right_hand {
                for (off, v) in var.iter_mut().enumerate() {
                    *v = c.var[spec.left_hand.start + off] + nu2;
                }
            }
            Component {
                weight: c.weight,
                mean: mean_full[block.clone()].to_vec(),
                var,
                mirrored_hands: false,
            }
        })
        .collect();
    MixtureSpec {
        dim: block.len(),
        components,
        left_hand: 0..0,
        right_hand: 0..0,
        mirror_noise_std: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Raw-space samples plus the normalization statistics that apply to them.
/// Statistics always come from the train split.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// (N, dim) in raw space, one sample per row.
    pub data: Array2<f64>,
    pub split: Split,
    pub spec_hash: String,
    pub stats: NormStats,
}

impl Dataset {
    /// Normalized samples as columns, the layout training consumes.
    pub fn columns_normalized(&self) -> Array2<f64> {
        let (n, d) = self.data.dim();
        Array2::from_shape_fn((d, n), |(i, j)| {
            (self.data[[j, i]] - self.stats.mean[i]) / self.stats.std[i]
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

fn raw_matrix(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> Array2<f64> {
    let mut data = Array2::<f64>::zeros((n, spec.dim));
    for j in 0..n {
        let x = sample_gt_pose(spec, rng);
        for i in 0..spec.dim {
            data[[j, i]] = x[i];
        }
    }
    data
}

/// Train/val/test generation from disjoint rng streams; normalization
/// statistics computed on the train split and shared with the others.
pub fn generate_splits(
    spec: &MixtureSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), SynthError> {
    spec.validate()?;
    let root = Rng::new(seed);
    let hash = spec.hash();
    let train_raw = raw_matrix(spec, n_train, &mut root.split(1));
    let stats = NormStats::from_data(&train_raw.t().to_owned());
    let make = |data: Array2<f64>, split: Split| Dataset {
        data,
        split,
        spec_hash: hash.clone(),
        stats: stats.clone(),
    };
    Ok((
        make(train_raw, Split::Train),
        make(raw_matrix(spec, n_val, &mut root.split(2)), Split::Val),
        make(raw_matrix(spec, n_test, &mut root.split(3)), Split::Test),
    ))
}

// ---------------------------------------------------------------------------
// .dpsd on-disk format: magic, version, JSON header, row-major LE f64 block
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"DPSD";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    split: Split,
    spec_hash: String,
    stats: NormStats,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&DatasetHeader {
            split: self.split,
            spec_hash: self.spec_hash.clone(),
            stats: self.stats.clone(),
            rows: self.data.nrows(),
            cols: self.data.ncols(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SynthError> {
        let bad = |m: &str| SynthError::BadFile(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(bad("truncated header"));
        }
        let header: DatasetHeader =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| bad(&e.to_string()))?;
        let block = &bytes[16 + hlen..];
        if block.len() != header.rows * header.cols * 8 {
            return Err(bad("data block size mismatch"));
        }
        let vals: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Dataset {
            data: Array2::from_shape_vec((header.rows, header.cols), vals)
                .map_err(|e| bad(&e.to_string()))?,
            split: header.split,
            spec_hash: header.spec_hash,
            stats: header.stats,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SynthError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}
