//! Whole-figure prior assembled from frozen part networks (body, one
//! shared hand evaluated through a mirror map, face) plus a residual fused
//! module, and the masked mixed-training procedure for the fused module.

use crate::diffusion::{
    crc32, perturb, NetArch, NoiseNet, NoisePredictor, NormStats, Schedule, TrainConfig,
};
use crate::kinematics::{mirror_signs, PartSplit};
use crate::numerics::{AdamState, GradTape, NodeId, Rng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CompositeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("part network dim {got} does not match split block {expected}")]
    PartDimMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("source weights must sum to 1 (got {0})")]
    BadWeights(f64),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Concatenated part predictions only.
    Base,
    /// Base plus the fused residual module (untrained or whole-body data).
    Fused,
    /// Same wiring as fused, trained on mixed part/whole batches.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Whole,
    BodyOnly,
    OneHand,
    TwoHand,
    FaceOnly,
}

pub const SOURCE_KINDS: [SourceKind; 5] = [
    SourceKind::Whole,
    SourceKind::BodyOnly,
    SourceKind::OneHand,
    SourceKind::TwoHand,
    SourceKind::FaceOnly,
];

/// Default source proportions for mixed training.
pub const DEFAULT_SOURCE_WEIGHTS: [f64; 5] = [0.65, 0.14, 0.12, 0.04, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartMask {
    pub body: bool,
    pub left_hand: bool,
    pub right_hand: bool,
    pub face: bool,
}

impl PartMask {
    pub const ALL: PartMask = PartMask {
        body: true,
        left_hand: true,
        right_hand: true,
        face: true,
    };

    pub const NONE: PartMask = PartMask {
        body: false,
        left_hand: false,
        right_hand: false,
        face: false,
    };

    /// Expand to a per-dimension 0/1 vector under the given split.
    pub fn to_dims(&self, split: &PartSplit) -> Vec<f64> {
        let mut v = vec![0.0; split.total()];
        let mut fill = |r: &std::ops::Range<usize>, on: bool| {
            if on {
                for i in r.clone() {
                    v[i] = 1.0;
                }
            }
        };
        fill(&split.body, self.body);
        fill(&split.left_hand, self.left_hand);
        fill(&split.right_hand, self.right_hand);
        fill(&split.face, self.face);
        v
    }
}

/// One mixed-training example: a whole pose vector in normalized space with
/// unavailable parts filled with the mean pose (zeros), plus which blocks
/// the loss applies to.
#[derive(Debug, Clone)]
pub struct MixedBatchItem {
    pub pose: Vec<f64>,
    pub avail: PartMask,
    pub loss_mask: PartMask,
    pub source: SourceKind,
}

/// Draws source kinds with fixed proportions.
#[derive(Debug, Clone)]
pub struct MixtureSchedule {
    weights: [f64; 5],
}

pub fn build_mixture_schedule(weights: &[f64]) -> Result<MixtureSchedule, CompositeError> {
    if weights.len() != 5 {
        return Err(CompositeError::DimMismatch {
            expected: 5,
            got: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(CompositeError::BadWeights(sum));
    }
    let mut w = [0.0; 5];
    w.copy_from_slice(weights);
    Ok(MixtureSchedule { weights: w })
}

impl MixtureSchedule {
    pub fn draw(&self, rng: &mut Rng) -> SourceKind {
        SOURCE_KINDS[rng.categorical(&self.weights)]
    }
}

/// Assemble a training item of the given source kind from a whole
/// normalized pose: blocks the source does not provide are zero-filled
/// (the mean pose) and excluded from both availability and loss.
pub fn make_item(
    kind: SourceKind,
    whole_pose: &[f64],
    split: &PartSplit,
    rng: &mut Rng,
) -> MixedBatchItem {
    let avail = match kind {
        SourceKind::Whole => PartMask::ALL,
        SourceKind::BodyOnly => PartMask {
            body: true,
            ..PartMask::NONE
        },
        SourceKind::OneHand => {
            if rng.uniform() < 0.5 {
                PartMask {
                    left_hand: true,
                    ..PartMask::NONE
                }
            } else {
                PartMask {
                    right_hand: true,
                    ..PartMask::NONE
                }
            }
        }
        SourceKind::TwoHand => PartMask {
            left_hand: true,
            right_hand: true,
            ..PartMask::NONE
        },
        SourceKind::FaceOnly => PartMask {
            face: true,
            ..PartMask::NONE
        },
    };
    let dims = avail.to_dims(split);
    let pose: Vec<f64> = whole_pose
        .iter()
        .zip(&dims)
        .map(|(x, m)| x * m)
        .collect();
    MixedBatchItem {
        pose,
        avail,
        loss_mask: avail,
        source: kind,
    }
}

/// Probability that a whole-body item gets part-masked during mixed training.
pub const WHOLE_MASK_PROB: f64 = 0.2;
/// Per-part masking probability given the masking event fires.
pub const PART_MASK_PROB: f64 = 1.0 / 3.0;

/// Randomly mask a whole-body item in place. With probability 20% each of
/// {left hand, right hand, face} is independently zero-filled (probability
/// 1/3 each); the body block always stays. The loss still covers all
/// blocks, which is what teaches the fused module to inpaint. Returns
/// whether the event fired and what was masked.
pub fn maybe_mask_whole(
    pose: &mut [f64],
    split: &PartSplit,
    rng: &mut Rng,
) -> (bool, PartMask) {
    if rng.uniform() >= WHOLE_MASK_PROB {
        return (false, PartMask::NONE);
    }
    let masked = PartMask {
        body: false,
        left_hand: rng.uniform() < PART_MASK_PROB,
        right_hand: rng.uniform() < PART_MASK_PROB,
        face: rng.uniform() < PART_MASK_PROB,
    };
    let dims = masked.to_dims(split);
    for (x, m) in pose.iter_mut().zip(&dims) {
        if *m > 0.0 {
            *x = 0.0;
        }
    }
    (true, masked)
}

/// Frozen part predictors behind an optional fused residual module. All
/// predictions live in whole-vector normalized space; the right hand runs
/// through the shared hand network via a sign-flip mirror in that space.
#[derive(Debug, Clone)]
pub struct CompositeNet {
    pub split: PartSplit,
    pub body: NoiseNet,
    pub hand: NoiseNet,
    pub face: NoiseNet,
    pub fused: NoiseNet,
    pub variant: Variant,
    pub stats: NormStats,
    pub schedule: Schedule,
}

/// Architecture of the fused module for a given split and part nets.
pub fn fused_arch(split: &PartSplit, hidden_per_part: usize) -> NetArch {
    NetArch {
        // concatenated last-layer features of the four part evaluations
        input_dim: 4 * hidden_per_part,
        output_dim: split.total(),
        hidden: 256,
        blocks: 2,
        time_embed: 64,
    }
}

impl CompositeNet {
    pub fn new(
        split: PartSplit,
        body: NoiseNet,
        hand: NoiseNet,
        face: NoiseNet,
        variant: Variant,
        stats: NormStats,
        seed: u64,
    ) -> Result<Self, CompositeError> {
        let check = |net: &NoiseNet, len: usize| {
            if net.arch.input_dim != len {
                Err(CompositeError::PartDimMismatch {
                    expected: len,
                    got: net.arch.input_dim,
                })
            } else {
                Ok(())
            }
        };
        check(&body, split.body.len())?;
        check(&hand, split.left_hand.len())?;
        check(&face, split.face.len())?;
        if split.left_hand.len() != split.right_hand.len() {
            return Err(CompositeError::PartDimMismatch {
                expected: split.left_hand.len(),
                got: split.right_hand.len(),
            });
        }
        if body.arch.hidden != hand.arch.hidden || body.arch.hidden != face.arch.hidden {
            return Err(CompositeError::PartDimMismatch {
                expected: body.arch.hidden,
                got: hand.arch.hidden.max(face.arch.hidden),
            });
        }
        let schedule = body.schedule;
        let fused = NoiseNet::new(
            fused_arch(&split, body.arch.hidden),
            schedule,
            NormStats::identity(split.total()),
            seed,
        );
        Ok(CompositeNet {
            split,
            body,
            hand,
            face,
            fused,
            variant,
            stats,
            schedule,
        })
    }

    /// Tape forward. `fused_leafs` may be trainable; part leafs never are.
    /// Returns the whole-vector noise prediction.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        fused_leafs: &[NodeId],
        x: NodeId,
        ts: &[f64],
        b: usize,
    ) -> NodeId {
        let sp = &self.split;
        let xb = tape.slice_rows(x, sp.body.start, sp.body.len());
        let xl = tape.slice_rows(x, sp.left_hand.start, sp.left_hand.len());
        let xr = tape.slice_rows(x, sp.right_hand.start, sp.right_hand.len());
        let xf = tape.slice_rows(x, sp.face.start, sp.face.len());
        // mirror the right hand into the shared hand net's convention
        let signs = mirror_signs(sp.right_hand.len());
        let sign_mat = Array2::from_shape_fn((signs.len(), b), |(i, _)| signs[i]);
        let sign_node = tape.constant(sign_mat);
        let xr_m = tape.mul_elem(xr, sign_node);

        let body_leafs = self.body.param_leafs(tape, false);
        let hand_leafs = self.hand.param_leafs(tape, false);
        let face_leafs = self.face.param_leafs(tape, false);
        let (eps_b, feat_b) = self.body.forward_on_tape(tape, &body_leafs, xb, ts);
        let (eps_l, feat_l) = self.hand.forward_on_tape(tape, &hand_leafs, xl, ts);
        let (eps_rm, feat_r) = self.hand.forward_on_tape(tape, &hand_leafs, xr_m, ts);
        let (eps_f, feat_f) = self.face.forward_on_tape(tape, &face_leafs, xf, ts);
        // mirror the right-hand prediction back
        let eps_r = tape.mul_elem(eps_rm, sign_node);

        let bl = tape.concat_rows(eps_b, eps_l);
        let blr = tape.concat_rows(bl, eps_r);
        let base = tape.concat_rows(blr, eps_f);
        match self.variant {
            Variant::Base => base,
            Variant::Fused | Variant::Mixed => {
                let f1 = tape.concat_rows(feat_b, feat_l);
                let f2 = tape.concat_rows(f1, feat_r);
                let feats = tape.concat_rows(f2, feat_f);
                let (resid, _) = self.fused.forward_on_tape(tape, fused_leafs, feats, ts);
                tape.add(base, resid)
            }
        }
    }
}

impl NoisePredictor for CompositeNet {
    fn dim(&self) -> usize {
        self.split.total()
    }

    fn predict(&self, x: &Array2<f64>, ts: &[f64]) -> Array2<f64> {
        let b = x.ncols();
        let mut tape = GradTape::new();
        let fused_leafs = self.fused.param_leafs(&mut tape, false);
        let xn = tape.leaf(x.clone(), false);
        let out = self.forward_on_tape(&mut tape, &fused_leafs, xn, ts, b);
        tape.value(out).clone()
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }
}

/// One mixed-training step: assemble the batch from the items' poses and
/// loss masks, perturb, and take an Adam step on the fused parameters
/// only. Whole-body items are randomly part-masked in place per
/// `maybe_mask_whole`.
pub fn mixed_train_step(
    cnet: &mut CompositeNet,
    items: &[MixedBatchItem],
    cfg: &TrainConfig,
    rng: &mut Rng,
    adam: &mut AdamState,
    iter: usize,
) -> Result<f64, CompositeError> {
    if items.is_empty() {
        return Err(CompositeError::EmptyBatch);
    }
    let d = cnet.split.total();
    let b = items.len();
    let mut x0 = Array2::<f64>::zeros((d, b));
    let mut mask = Array2::<f64>::zeros((d, b));
    for (j, item) in items.iter().enumerate() {
        if item.pose.len() != d {
            return Err(CompositeError::DimMismatch {
                expected: d,
                got: item.pose.len(),
            });
        }
        let mut pose = item.pose.clone();
        let loss_mask = if item.source == SourceKind::Whole {
            // random part-masking belongs to mixed training only; the
            // fused variant trains on intact whole vectors
            if cnet.variant == Variant::Mixed {
                maybe_mask_whole(&mut pose, &cnet.split, rng);
            }
            // masked inputs still incur loss on every block
            PartMask::ALL
        } else {
            item.loss_mask
        };
        let mdims = loss_mask.to_dims(&cnet.split);
        for i in 0..d {
            x0[[i, j]] = pose[i];
            mask[[i, j]] = mdims[i];
        }
    }
    let ts: Vec<f64> = (0..b).map(|_| rng.uniform_in(cfg.t_lo, cfg.t_hi)).collect();
    let eps = Array2::from_shape_fn((d, b), |_| rng.normal());
    let xt = perturb(&cnet.schedule, &x0, &ts, &eps)?;
    let mut tape = GradTape::new();
    let fused_leafs = cnet.fused.param_leafs(&mut tape, true);
    let x_node = tape.leaf(xt, false);
    let out = cnet.forward_on_tape(&mut tape, &fused_leafs, x_node, &ts, b);
    let eps_node = tape.constant(eps);
    let diff = tape.sub(eps_node, out);
    let mask_node = tape.constant(mask);
    let masked = tape.mul_elem(diff, mask_node);
    let per_item = tape.col_sum_sq(masked);
    let mut w = Array2::<f64>::zeros((1, b));
    for (j, &t) in ts.iter().enumerate() {
        let (_, sg) = cnet.schedule.eval(t)?;
        w[[0, j]] = sg * sg / b as f64;
    }
    let loss = tape.weighted_sum(per_item, w);
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(CompositeError::NonFiniteLoss(iter));
    }
    let grads = tape.backward(loss);
    let flat = cnet.fused.collect_grads(&grads, &fused_leafs);
    adam.step(&mut cnet.fused.params, &flat)
        .expect("param layout fixed");
    Ok(loss_val)
}

// ---------------------------------------------------------------------------
// checkpoint: part checkpoints embedded by content plus fused parameters
// ---------------------------------------------------------------------------

const COMPOSITE_MAGIC: &[u8; 4] = b"DPSC";
const COMPOSITE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CompositeHeader {
    variant: Variant,
    split: PartSplit,
    stats: NormStats,
    schedule: Schedule,
    blob_lens: [u64; 4], // body, hand, face, fused
}

impl CompositeNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs = [
            self.body.to_bytes(),
            self.hand.to_bytes(),
            self.face.to_bytes(),
            self.fused.to_bytes(),
        ];
        let header = serde_json::to_vec(&CompositeHeader {
            variant: self.variant,
            split: self.split.clone(),
            stats: self.stats.clone(),
            schedule: self.schedule,
            blob_lens: [
                blobs[0].len() as u64,
                blobs[1].len() as u64,
                blobs[2].len() as u64,
                blobs[3].len() as u64,
            ],
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(COMPOSITE_MAGIC);
        out.extend_from_slice(&COMPOSITE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for blob in &blobs {
            out.extend_from_slice(blob);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CompositeError> {
        let bad = |m: &str| CompositeError::BadCheckpoint(m.to_string());
        if bytes.len() < 20 {
            return Err(bad("truncated"));
        }
        let (body_bytes, crc_bytes) = bytes.split_at(bytes.len() - 4);
        if crc32(body_bytes) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
            return Err(bad("CRC mismatch"));
        }
        if &body_bytes[..4] != COMPOSITE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(body_bytes[4..8].try_into().unwrap());
        if version != COMPOSITE_VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = u64::from_le_bytes(body_bytes[8..16].try_into().unwrap()) as usize;
        if body_bytes.len() < 16 + hlen {
            return Err(bad("truncated header"));
        }
        let header: CompositeHeader =
            serde_json::from_slice(&body_bytes[16..16 + hlen]).map_err(|e| bad(&e.to_string()))?;
        let mut off = 16 + hlen;
        let mut nets = Vec::new();
        for len in header.blob_lens {
            let len = len as usize;
            if body_bytes.len() < off + len {
                return Err(bad("truncated part blob"));
            }
            nets.push(
                NoiseNet::from_bytes(&body_bytes[off..off + len])
                    .map_err(|e| bad(&e.to_string()))?,
            );
            off += len;
        }
        let fused = nets.pop().unwrap();
        let face = nets.pop().unwrap();
        let hand = nets.pop().unwrap();
        let body = nets.pop().unwrap();
        Ok(CompositeNet {
            split: header.split,
            body,
            hand,
            face,
            fused,
            variant: header.variant,
            stats: header.stats,
            schedule: header.schedule,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CompositeError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CompositeError> {
        CompositeNet::from_bytes(&std::fs::read(path)?)
    }
}
