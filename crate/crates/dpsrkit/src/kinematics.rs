//! Toy articulated figure: axis-angle joints on a kinematic tree with
//! per-bone log-scale shape, a linear expression basis on the face joint,
//! surrogate vertices along bones, and a perspective camera. Everything
//! is differentiable through the gradient tape.

use crate::numerics::{GradTape, NodeId, NumericsError, Rng};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Body,
    LeftHand,
    RightHand,
    Face,
}

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tree is not topologically sorted at joint {0}")]
    BadTopology(usize),
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Kinematic tree plus the fixed expression basis. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KinematicTree {
    pub model_version: u32,
    /// Parent joint index; `None` exactly at the root (joint 0).
    pub parents: Vec<Option<usize>>,
    /// Rest offset from parent, in length units.
    pub offsets: Vec<[f64; 3]>,
    pub parts: Vec<Part>,
    /// Named seed for the orthonormal expression displacement basis.
    pub expression_seed: u64,
    pub n_expression: usize,
    #[serde(skip)]
    expression_basis: Option<Array2<f64>>,
}

/// Index ranges of the flat pose vector per part block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSplit {
    pub body: std::ops::Range<usize>,
    pub left_hand: std::ops::Range<usize>,
    pub right_hand: std::ops::Range<usize>,
    pub face: std::ops::Range<usize>,
}

impl PartSplit {
    pub fn total(&self) -> usize {
        self.face.end
    }

    pub fn range(&self, part: Part) -> std::ops::Range<usize> {
        match part {
            Part::Body => self.body.clone(),
            Part::LeftHand => self.left_hand.clone(),
            Part::RightHand => self.right_hand.clone(),
            Part::Face => self.face.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    /// Per-joint axis-angle, 3 entries per joint, joint-major.
    pub joint_aa: Vec<f64>,
    /// Face expression coefficients.
    pub expression: Vec<f64>,
    pub global_orient: [f64; 3],
    pub global_trans: [f64; 3],
}

impl PoseParams {
    pub fn zero(tree: &KinematicTree) -> Self {
        PoseParams {
            joint_aa: vec![0.0; 3 * tree.num_joints()],
            expression: vec![0.0; tree.n_expression],
            global_orient: [0.0; 3],
            global_trans: [0.0; 3],
        }
    }

    /// Build from a flat pose vector (joint angles then expression).
    pub fn from_pose_vector(tree: &KinematicTree, x: &[f64]) -> Result<Self, KinematicsError> {
        if x.len() != tree.pose_dim() {
            return Err(KinematicsError::DimMismatch {
                what: "pose vector",
                expected: tree.pose_dim(),
                got: x.len(),
            });
        }
        let na = 3 * tree.num_joints();
        Ok(PoseParams {
            joint_aa: x[..na].to_vec(),
            expression: x[na..].to_vec(),
            global_orient: [0.0; 3],
            global_trans: [0.0; 3],
        })
    }

    pub fn to_pose_vector(&self) -> Vec<f64> {
        let mut v = self.joint_aa.clone();
        v.extend_from_slice(&self.expression);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    /// Per-bone log-scale; zero is the rest figure.
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zero(tree: &KinematicTree) -> Self {
        ShapeParams {
            beta: vec![0.0; tree.num_joints()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-from-world rotation, row-major 3x3.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn looking_at_origin(focal: f64, cx: f64, cy: f64, distance: f64) -> Self {
        Camera {
            focal,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, distance],
        }
    }

    pub fn rotation_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((3, 3), |(i, j)| self.rotation[i][j])
    }
}

impl KinematicTree {
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
        parts: Vec<Part>,
        expression_seed: u64,
        n_expression: usize,
    ) -> Result<Self, KinematicsError> {
        if parents.is_empty() || parents[0].is_some() {
            return Err(KinematicsError::BadTopology(0));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(pi) if *pi < j => {}
                _ => return Err(KinematicsError::BadTopology(j)),
            }
        }
        let mut tree = KinematicTree {
            model_version: MODEL_VERSION,
            parents,
            offsets,
            parts,
            expression_seed,
            n_expression,
            expression_basis: None,
        };
        tree.expression_basis = Some(tree.build_expression_basis());
        Ok(tree)
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.num_joints() + self.n_expression
    }

    pub fn face_joints(&self) -> Vec<usize> {
        (0..self.num_joints())
            .filter(|&j| self.parts[j] == Part::Face)
            .collect()
    }

    fn joints_of(&self, part: Part) -> Vec<usize> {
        (0..self.num_joints())
            .filter(|&j| self.parts[j] == part)
            .collect()
    }

    /// Pose vector layout: all joint angles joint-major, then expression.
    /// Part blocks are contiguous because the default figure orders joints
    /// body, left hand, right hand, face.
    pub fn part_split(&self) -> PartSplit {
        let nb = self.joints_of(Part::Body).len() * 3;
        let nl = self.joints_of(Part::LeftHand).len() * 3;
        let nr = self.joints_of(Part::RightHand).len() * 3;
        let nf = self.joints_of(Part::Face).len() * 3 + self.n_expression;
        PartSplit {
            body: 0..nb,
            left_hand: nb..nb + nl,
            right_hand: nb + nl..nb + nl + nr,
            face: nb + nl + nr..nb + nl + nr + nf,
        }
    }

    fn build_expression_basis(&self) -> Array2<f64> {
        let rows = 3 * self.face_joints().len();
        let cols = self.n_expression;
        let mut rng = Rng::new(self.expression_seed);
        let mut b = Array2::from_shape_fn((rows, cols), |_| rng.normal());
        // Gram-Schmidt on columns
        for c in 0..cols {
            for prev in 0..c {
                let dot: f64 = (0..rows).map(|r| b[[r, c]] * b[[r, prev]]).sum();
                for r in 0..rows {
                    b[[r, c]] -= dot * b[[r, prev]];
                }
            }
            let norm: f64 = (0..rows).map(|r| b[[r, c]] * b[[r, c]]).sum::<f64>().sqrt();
            for r in 0..rows {
                b[[r, c]] /= norm;
            }
        }
        b
    }

    pub fn expression_basis(&self) -> Array2<f64> {
        match &self.expression_basis {
            Some(b) => b.clone(),
            None => self.build_expression_basis(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, KinematicsError> {
        let mut tree: KinematicTree =
            serde_json::from_str(s).map_err(|e| KinematicsError::BadModelFile(e.to_string()))?;
        if tree.model_version != MODEL_VERSION {
            return Err(KinematicsError::BadModelFile(format!(
                "unsupported model_version {}",
                tree.model_version
            )));
        }
        if tree.parents.len() != tree.offsets.len() || tree.parents.len() != tree.parts.len() {
            return Err(KinematicsError::BadModelFile(
                "parents/offsets/parts length mismatch".into(),
            ));
        }
        tree.expression_basis = Some(tree.build_expression_basis());
        Ok(tree)
    }

    /// Default desk-scale figure: 11 body joints, 4 joints per hand, one
    /// face (jaw) joint plus 3 expression coefficients. Pose dimension 63.
    pub fn default_figure() -> Self {
        let mut parents: Vec<Option<usize>> = Vec::new();
        let mut offsets: Vec<[f64; 3]> = Vec::new();
        let mut parts: Vec<Part> = Vec::new();
        let mut push = |parent: Option<usize>, off: [f64; 3], part: Part| {
            parents.push(parent);
            offsets.push(off);
            parts.push(part);
            parents.len() - 1
        };
        // body
        let pelvis = push(None, [0.0, 0.0, 0.0], Part::Body); // 0
        let spine = push(Some(pelvis), [0.0, 0.25, 0.0], Part::Body); // 1
        let chest = push(Some(spine), [0.0, 0.25, 0.0], Part::Body); // 2
        let neck = push(Some(chest), [0.0, 0.15, 0.0], Part::Body); // 3
        let head = push(Some(neck), [0.0, 0.15, 0.0], Part::Body); // 4
        let l_shoulder = push(Some(chest), [0.2, 0.05, 0.0], Part::Body); // 5
        let l_elbow = push(Some(l_shoulder), [0.3, 0.0, 0.0], Part::Body); // 6
        let r_shoulder = push(Some(chest), [-0.2, 0.05, 0.0], Part::Body); // 7
        let r_elbow = push(Some(r_shoulder), [-0.3, 0.0, 0.0], Part::Body); // 8
        let _l_hip = push(Some(pelvis), [0.12, -0.35, 0.0], Part::Body); // 9
        let _r_hip = push(Some(pelvis), [-0.12, -0.35, 0.0], Part::Body); // 10
        // left hand: wrist plus a 3-link finger chain
        let l_wrist = push(Some(l_elbow), [0.25, 0.0, 0.0], Part::LeftHand); // 11
        let lf1 = push(Some(l_wrist), [0.08, 0.0, 0.0], Part::LeftHand); // 12
        let lf2 = push(Some(lf1), [0.05, 0.0, 0.0], Part::LeftHand); // 13
        let _lf3 = push(Some(lf2), [0.04, 0.0, 0.0], Part::LeftHand); // 14
        // right hand, mirrored offsets
        let r_wrist = push(Some(r_elbow), [-0.25, 0.0, 0.0], Part::RightHand); // 15
        let rf1 = push(Some(r_wrist), [-0.08, 0.0, 0.0], Part::RightHand); // 16
        let rf2 = push(Some(rf1), [-0.05, 0.0, 0.0], Part::RightHand); // 17
        let _rf3 = push(Some(rf2), [-0.04, 0.0, 0.0], Part::RightHand); // 18
        // face: jaw joint on the head
        let _jaw = push(Some(head), [0.0, 0.05, 0.1], Part::Face); // 19
        KinematicTree::new(parents, offsets, parts, DEFAULT_EXPRESSION_SEED, 3)
            .expect("default figure is valid")
    }
}

/// Named seed for the default figure's expression basis.
pub const DEFAULT_EXPRESSION_SEED: u64 = 0xFACE_BA51;

/// Tape handles to every differentiable FK input.
pub struct FkInputs {
    /// (3J, 1) all joint axis-angles.
    pub joint_aa: NodeId,
    /// (J, 1) per-bone log-scales.
    pub beta: NodeId,
    /// (E, 1) expression coefficients.
    pub expression: NodeId,
    /// (3, 1) global orientation axis-angle.
    pub global_orient: NodeId,
    /// (3, 1) global translation.
    pub global_trans: NodeId,
}

impl FkInputs {
    /// Leaf everything from parameter structs; `differentiable` controls
    /// which inputs get gradients.
    pub fn from_params(
        tape: &mut GradTape,
        pose: &PoseParams,
        shape: &ShapeParams,
        differentiable: bool,
    ) -> FkInputs {
        FkInputs {
            joint_aa: tape.vec_leaf(&pose.joint_aa, differentiable),
            beta: tape.vec_leaf(&shape.beta, differentiable),
            expression: tape.vec_leaf(&pose.expression, differentiable),
            global_orient: tape.vec_leaf(&pose.global_orient, differentiable),
            global_trans: tape.vec_leaf(&pose.global_trans, differentiable),
        }
    }
}

/// Forward kinematics on the tape. Returns the (3, J) world-space joint
/// matrix node plus per-joint (3,1) position nodes.
pub fn fk_on_tape(
    tape: &mut GradTape,
    tree: &KinematicTree,
    inputs: &FkInputs,
) -> Result<(NodeId, Vec<NodeId>), KinematicsError> {
    let nj = tree.num_joints();
    if tape.value(inputs.joint_aa).nrows() != 3 * nj {
        return Err(KinematicsError::DimMismatch {
            what: "joint_aa",
            expected: 3 * nj,
            got: tape.value(inputs.joint_aa).nrows(),
        });
    }
    if tape.value(inputs.beta).nrows() != nj {
        return Err(KinematicsError::DimMismatch {
            what: "beta",
            expected: nj,
            got: tape.value(inputs.beta).nrows(),
        });
    }
    if tape.value(inputs.expression).nrows() != tree.n_expression {
        return Err(KinematicsError::DimMismatch {
            what: "expression",
            expected: tree.n_expression,
            got: tape.value(inputs.expression).nrows(),
        });
    }
    let r_global = tape.rodrigues(inputs.global_orient);
    let mut rot_world: Vec<NodeId> = Vec::with_capacity(nj);
    let mut pos: Vec<NodeId> = Vec::with_capacity(nj);
    // expression displacement in the global frame
    let basis = tree.expression_basis();
    let face_joints = tree.face_joints();
    let disp = if tree.n_expression > 0 && !face_joints.is_empty() {
        let b = tape.constant(basis);
        let local = tape.matmul(b, inputs.expression);
        Some(tape.matmul(r_global, local))
    } else {
        None
    };
    for j in 0..nj {
        let aa = tape.slice_rows(inputs.joint_aa, 3 * j, 3);
        let r_local = tape.rodrigues(aa);
        let (r_parent, p_parent) = match tree.parents[j] {
            None => (r_global, inputs.global_trans),
            Some(p) => (rot_world[p], pos[p]),
        };
        let beta_j = tape.slice_rows(inputs.beta, j, 1);
        let scale = tape.exp(beta_j);
        let off = Array1::from_iter(tree.offsets[j].iter().cloned());
        let scaled_off = tape.scale_vec_by_scalar(off, scale);
        let step = tape.matmul(r_parent, scaled_off);
        let mut p = tape.add(p_parent, step);
        if let Some(disp) = disp {
            if let Some(fi) = face_joints.iter().position(|&fj| fj == j) {
                let d = tape.slice_rows(disp, 3 * fi, 3);
                p = tape.add(p, d);
            }
        }
        let r = tape.matmul(r_parent, r_local);
        rot_world.push(r);
        pos.push(p);
    }
    let joints = tape.stack_cols(&pos);
    Ok((joints, pos))
}

/// Convenience non-tape FK: world-space joints as a (3, J) matrix.
pub fn forward_kinematics(
    tree: &KinematicTree,
    pose: &PoseParams,
    shape: &ShapeParams,
) -> Result<Array2<f64>, KinematicsError> {
    let mut tape = GradTape::new();
    let inputs = FkInputs::from_params(&mut tape, pose, shape, false);
    let (joints, _) = fk_on_tape(&mut tape, tree, &inputs)?;
    Ok(tape.value(joints).clone())
}

pub const VERTEX_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

/// Surrogate surface points: three per bone along each parent-child segment.
pub fn surrogate_vertices_on_tape(
    tape: &mut GradTape,
    tree: &KinematicTree,
    joint_pos: &[NodeId],
) -> NodeId {
    let mut verts: Vec<NodeId> = Vec::new();
    for j in 0..tree.num_joints() {
        if let Some(p) = tree.parents[j] {
            for f in VERTEX_FRACTIONS {
                let a = tape.scale(joint_pos[p], 1.0 - f);
                let b = tape.scale(joint_pos[j], f);
                verts.push(tape.add(a, b));
            }
        }
    }
    tape.stack_cols(&verts)
}

pub fn surrogate_vertices(tree: &KinematicTree, joints: &Array2<f64>) -> Array2<f64> {
    let bones: Vec<(usize, usize)> = (0..tree.num_joints())
        .filter_map(|j| tree.parents[j].map(|p| (p, j)))
        .collect();
    let mut v = Array2::<f64>::zeros((3, bones.len() * VERTEX_FRACTIONS.len()));
    for (bi, (p, c)) in bones.iter().enumerate() {
        for (fi, f) in VERTEX_FRACTIONS.iter().enumerate() {
            for r in 0..3 {
                v[[r, bi * 3 + fi]] = (1.0 - f) * joints[[r, *p]] + f * joints[[r, *c]];
            }
        }
    }
    v
}

/// World points (3, N) through the camera onto the image plane (2, N).
pub fn project_on_tape(
    tape: &mut GradTape,
    cam: &Camera,
    points: NodeId,
) -> Result<NodeId, NumericsError> {
    let r = tape.constant(cam.rotation_matrix());
    let t = tape.vec_leaf(&cam.translation, false);
    let rotated = tape.matmul(r, points);
    let cam_space = tape.add_bias(rotated, t);
    tape.project(cam_space, cam.focal, cam.cx, cam.cy)
}

pub fn project_perspective(cam: &Camera, points: &Array2<f64>) -> Result<Array2<f64>, NumericsError> {
    let mut tape = GradTape::new();
    let p = tape.constant(points.clone());
    let px = project_on_tape(&mut tape, cam, p)?;
    Ok(tape.value(px).clone())
}

/// Left/right hand mirror: negate the y and z axis-angle components of
/// each joint. An involution shared by the composite prior and the data
/// generator.
pub fn mirror_hand_block(block: &[f64]) -> Vec<f64> {
    block
        .iter()
        .enumerate()
        .map(|(i, &x)| if i % 3 == 0 { x } else { -x })
        .collect()
}

/// The same map as a sign vector for tape-side use.
pub fn mirror_signs(len: usize) -> Vec<f64> {
    (0..len).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn tree() -> KinematicTree {
        KinematicTree::default_figure()
    }

    #[test]
    fn default_figure_dimensions() {
        let t = tree();
        assert_eq!(t.num_joints(), 20);
        assert_eq!(t.pose_dim(), 63);
        let split = t.part_split();
        assert_eq!(split.body, 0..33);
        assert_eq!(split.left_hand, 33..45);
        assert_eq!(split.right_hand, 45..57);
        assert_eq!(split.face, 57..63);
        assert_eq!(split.total(), 63);
    }

    #[test]
    fn zero_pose_gives_cumulative_offsets() {
        let t = tree();
        let joints =
            forward_kinematics(&t, &PoseParams::zero(&t), &ShapeParams::zero(&t)).unwrap();
        // accumulate rest offsets by hand
        let mut expect = vec![[0.0f64; 3]; t.num_joints()];
        for j in 0..t.num_joints() {
            let base = t.parents[j].map(|p| expect[p]).unwrap_or([0.0; 3]);
            for k in 0..3 {
                expect[j][k] = base[k] + t.offsets[j][k];
            }
        }
        for j in 0..t.num_joints() {
            for k in 0..3 {
                assert!((joints[[k, j]] - expect[j][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn root_rotation_pi_about_z_negates_xy() {
        let t = tree();
        let mut pose = PoseParams::zero(&t);
        pose.joint_aa[2] = std::f64::consts::PI; // pelvis about z
        let rotated = forward_kinematics(&t, &pose, &ShapeParams::zero(&t)).unwrap();
        let rest =
            forward_kinematics(&t, &PoseParams::zero(&t), &ShapeParams::zero(&t)).unwrap();
        for j in 0..t.num_joints() {
            assert!((rotated[[0, j]] + rest[[0, j]]).abs() < 1e-10, "x joint {j}");
            assert!((rotated[[1, j]] + rest[[1, j]]).abs() < 1e-10, "y joint {j}");
            assert!((rotated[[2, j]] - rest[[2, j]]).abs() < 1e-10, "z joint {j}");
        }
    }

    #[test]
    fn log_scale_doubles_bone() {
        let t = tree();
        let mut shape = ShapeParams::zero(&t);
        shape.beta[1] = (2.0f64).ln(); // spine bone
        let scaled = forward_kinematics(&t, &PoseParams::zero(&t), &shape).unwrap();
        let rest =
            forward_kinematics(&t, &PoseParams::zero(&t), &ShapeParams::zero(&t)).unwrap();
        // the spine's subtree translates by one extra offset length (0.25 in y)
        assert!((scaled[[1, 1]] - rest[[1, 1]] - 0.25).abs() < 1e-12);
        assert!((scaled[[1, 4]] - rest[[1, 4]] - 0.25).abs() < 1e-12);
        // pelvis and hips untouched
        assert!((scaled[[1, 0]] - rest[[1, 0]]).abs() < 1e-12);
        assert!((scaled[[1, 9]] - rest[[1, 9]]).abs() < 1e-12);
    }

    #[test]
    fn fk_global_rotation_equivariance() {
        let t = tree();
        let mut rng = Rng::new(17);
        let mut pose = PoseParams::zero(&t);
        for v in pose.joint_aa.iter_mut() {
            *v = 0.3 * rng.normal();
        }
        for v in pose.expression.iter_mut() {
            *v = rng.normal();
        }
        let shape = ShapeParams::zero(&t);
        let base = forward_kinematics(&t, &pose, &shape).unwrap();
        let aa = [0.4, -0.3, 0.8];
        let r = crate::numerics::tape::rodrigues_value(&aa);
        let mut rotated_pose = pose.clone();
        rotated_pose.global_orient = aa;
        let fk_rot = forward_kinematics(&t, &rotated_pose, &shape).unwrap();
        let expect = r.dot(&base);
        let max = (&fk_rot - &expect).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-10, "max deviation {max}");
    }

    #[test]
    fn surrogate_vertices_on_segments() {
        let t = KinematicTree::new(
            vec![None, Some(0)],
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, 4.0]],
            vec![Part::Body, Part::Body],
            1,
            0,
        )
        .unwrap();
        let joints =
            forward_kinematics(&t, &PoseParams::zero(&t), &ShapeParams::zero(&t)).unwrap();
        let v = surrogate_vertices(&t, &joints);
        assert_eq!(v.ncols(), 3);
        for (i, z) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((v[[2, i]] - z).abs() < 1e-12);
            assert!(v[[0, i]].abs() < 1e-12);
        }
    }

    #[test]
    fn vertices_transform_rigidly_with_joints() {
        let t = tree();
        let mut rng = Rng::new(3);
        let mut pose = PoseParams::zero(&t);
        for v in pose.joint_aa.iter_mut() {
            *v = 0.2 * rng.normal();
        }
        let joints = forward_kinematics(&t, &pose, &ShapeParams::zero(&t)).unwrap();
        let r = crate::numerics::tape::rodrigues_value(&[0.1, 0.7, -0.2]);
        let moved = r.dot(&joints);
        let v1 = surrogate_vertices(&t, &joints);
        let v2 = surrogate_vertices(&t, &moved);
        let diff = (&r.dot(&v1) - &v2).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::looking_at_origin(1.0, 0.0, 0.0, 0.0);
        let p = ndarray::arr2(&[[0.0], [0.0], [1.0]]);
        let px = project_perspective(&cam, &p).unwrap();
        assert!(px[[0, 0]].abs() < 1e-12 && px[[1, 0]].abs() < 1e-12);
        let cam2 = Camera::looking_at_origin(2.0, 0.0, 0.0, 0.0);
        let p2 = ndarray::arr2(&[[1.0], [1.0], [2.0]]);
        let px2 = project_perspective(&cam2, &p2).unwrap();
        assert!((px2[[0, 0]] - 1.0).abs() < 1e-12 && (px2[[1, 0]] - 1.0).abs() < 1e-12);
        // doubling depth halves offset
        let p4 = ndarray::arr2(&[[1.0], [1.0], [4.0]]);
        let px4 = project_perspective(&cam2, &p4).unwrap();
        assert!((px4[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fk_gradients_match_finite_differences() {
        let t = tree();
        let mut rng = Rng::new(99);
        for case in 0..20 {
            let mut pose = PoseParams::zero(&t);
            for v in pose.joint_aa.iter_mut() {
                *v = 0.4 * rng.normal();
            }
            for v in pose.expression.iter_mut() {
                *v = rng.normal();
            }
            pose.global_orient = [rng.normal() * 0.3, rng.normal() * 0.3, rng.normal() * 0.3];
            pose.global_trans = [rng.normal() * 0.1, rng.normal() * 0.1, rng.normal() * 0.1];
            let mut shape = ShapeParams::zero(&t);
            for v in shape.beta.iter_mut() {
                *v = 0.2 * rng.normal();
            }
            let weights = Array2::from_shape_fn((3, t.num_joints()), |_| rng.normal());

            // pack everything into one flat vector for the fd oracle
            let mut flat = pose.joint_aa.clone();
            flat.extend_from_slice(&pose.expression);
            flat.extend_from_slice(&shape.beta);
            flat.extend_from_slice(&pose.global_orient);
            flat.extend_from_slice(&pose.global_trans);
            let nj = t.num_joints();
            let ne = t.n_expression;
            let eval = |flat: &[f64]| {
                let mut tape = GradTape::new();
                let inputs = FkInputs {
                    joint_aa: tape.vec_leaf(&flat[..3 * nj], true),
                    expression: tape.vec_leaf(&flat[3 * nj..3 * nj + ne], true),
                    beta: tape.vec_leaf(&flat[3 * nj + ne..3 * nj + ne + nj], true),
                    global_orient: tape.vec_leaf(&flat[3 * nj + ne + nj..3 * nj + ne + nj + 3], true),
                    global_trans: tape.vec_leaf(&flat[3 * nj + ne + nj + 3..], true),
                };
                let (joints, _) = fk_on_tape(&mut tape, &t, &inputs).unwrap();
                let loss = tape.weighted_sum(joints, weights.clone());
                (tape, inputs, loss)
            };
            let (tape, inputs, loss) = eval(&flat);
            let grads = tape.backward(loss);
            let mut analytic: Vec<f64> = Vec::new();
            for id in [
                inputs.joint_aa,
                inputs.expression,
                inputs.beta,
                inputs.global_orient,
                inputs.global_trans,
            ] {
                analytic.extend(grads.get(id).unwrap().iter().cloned());
            }
            let fd = finite_diff_grad(
                |x| {
                    let (tape, _, loss) = eval(x);
                    tape.scalar(loss)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            let num: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-5, "case {case}: rel err {}", num / den);
        }
    }

    #[test]
    fn mirror_is_involutive() {
        let block: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
        let twice = mirror_hand_block(&mirror_hand_block(&block));
        assert_eq!(block, twice);
    }

    #[test]
    fn model_json_roundtrip() {
        let t = tree();
        let json = t.to_json();
        let back = KinematicTree::from_json(&json).unwrap();
        assert_eq!(t.parents, back.parents);
        assert_eq!(t.expression_seed, back.expression_seed);
        let b1 = t.expression_basis();
        let b2 = back.expression_basis();
        assert!((&b1 - &b2).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn bad_topology_rejected() {
        let r = KinematicTree::new(
            vec![None, Some(2), Some(1)],
            vec![[0.0; 3]; 3],
            vec![Part::Body; 3],
            1,
            0,
        );
        assert!(r.is_err());
    }
}
