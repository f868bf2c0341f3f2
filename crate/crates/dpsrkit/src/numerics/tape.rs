//! Reverse-mode differentiation over a fixed set of matrix-valued
//! primitives: affine maps, elementwise nonlinearities, reductions,
//! Rodrigues rotation, perspective projection, and the Geman-McClure
//! robustifier. Values are `ndarray::Array2<f64>`; a column vector is an
//! `(n, 1)` matrix and a batch is `(n, B)`.
//!
//! A [`GradTape`] records one forward evaluation; [`GradTape::backward`]
//! replays it to accumulate adjoints for every leaf created with
//! `requires_grad = true`. Tapes are single-use: build a fresh one per
//! evaluation.

use crate::numerics::NumericsError;
use ndarray::{concatenate, Array1, Array2, Axis};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// (m, n) + (m, 1) broadcast across columns.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    Silu(NodeId),
    Exp(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    StackCols(Vec<NodeId>),
    SumSq(NodeId),
    Sum(NodeId),
    ColSumSq(NodeId),
    WeightedSum(NodeId, Array2<f64>),
    /// const_vec (n,1) scaled by a (1,1) scalar node.
    ScaleVecByScalar(Array1<f64>, NodeId),
    Rodrigues(NodeId),
    Project { points: NodeId, focal: f64 },
    GemanMcclure(NodeId, f64),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn vec_leaf(&mut self, v: &[f64], requires_grad: bool) -> NodeId {
        let value = Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("shape");
        self.leaf(value, requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(Op::Add(a, b), v, r)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[bias].value;
        let r = self.req(a) || self.req(bias);
        self.push(Op::AddBias(a, bias), v, r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(Op::Sub(a, b), v, r)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let r = self.req(a) || self.req(b);
        self.push(Op::MatMul(a, b), v, r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        let r = self.req(a);
        self.push(Op::Scale(a, c), v, r)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(Op::MulElem(a, b), v, r)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x / (1.0 + (-x).exp()));
        let r = self.req(a);
        self.push(Op::Silu(a), v, r)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let r = self.req(a);
        self.push(Op::Exp(a), v, r)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = concatenate(
            Axis(0),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .expect("column counts must match");
        let r = self.req(a) || self.req(b);
        self.push(Op::ConcatRows(a, b), v, r)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let r = self.req(a);
        self.push(Op::SliceRows(a, start, len), v, r)
    }

    /// Stack (m,1) column vectors into an (m,k) matrix.
    pub fn stack_cols(&mut self, cols: &[NodeId]) -> NodeId {
        let views: Vec<_> = cols.iter().map(|&c| self.nodes[c].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must match");
        let r = cols.iter().any(|&c| self.req(c));
        self.push(Op::StackCols(cols.to_vec()), v, r)
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().map(|x| x * x).sum();
        let r = self.req(a);
        self.push(Op::SumSq(a), Array2::from_elem((1, 1), s), r)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        let r = self.req(a);
        self.push(Op::Sum(a), Array2::from_elem((1, 1), s), r)
    }

    /// Per-column squared norm: (m, n) -> (1, n).
    pub fn col_sum_sq(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a].value;
        let mut v = Array2::<f64>::zeros((1, src.ncols()));
        for j in 0..src.ncols() {
            v[[0, j]] = src.column(j).iter().map(|x| x * x).sum();
        }
        let r = self.req(a);
        self.push(Op::ColSumSq(a), v, r)
    }

    /// sum(value .* weights) -> (1,1). Weights are constants.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[a].value.raw_dim(), weights.raw_dim());
        let s: f64 = self.nodes[a]
            .value
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| x * w)
            .sum();
        let r = self.req(a);
        self.push(Op::WeightedSum(a, weights), Array2::from_elem((1, 1), s), r)
    }

    /// Constant vector scaled by a (1,1) scalar node: offsets scaled by exp(beta).
    pub fn scale_vec_by_scalar(&mut self, vec: Array1<f64>, s: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[s].value.len(), 1);
        let c = self.nodes[s].value[[0, 0]];
        let v = Array2::from_shape_fn((vec.len(), 1), |(i, _)| vec[i] * c);
        let r = self.req(s);
        self.push(Op::ScaleVecByScalar(vec, s), v, r)
    }

    /// Axis-angle (3,1) -> rotation matrix (3,3).
    pub fn rodrigues(&mut self, aa: NodeId) -> NodeId {
        let a = &self.nodes[aa].value;
        debug_assert_eq!(a.raw_dim(), ndarray::Dim([3, 1]));
        let v = rodrigues_value(&[a[[0, 0]], a[[1, 0]], a[[2, 0]]]);
        let r = self.req(aa);
        self.push(Op::Rodrigues(aa), v, r)
    }

    /// Perspective projection of camera-space points (3,n) -> pixels (2,n).
    pub fn project(
        &mut self,
        points: NodeId,
        focal: f64,
        cx: f64,
        cy: f64,
    ) -> Result<NodeId, NumericsError> {
        let p = &self.nodes[points].value;
        let n = p.ncols();
        let mut v = Array2::<f64>::zeros((2, n));
        for j in 0..n {
            let z = p[[2, j]];
            if z <= 1e-6 {
                return Err(NumericsError::NonPositiveDepth { index: j, depth: z });
            }
            v[[0, j]] = focal * p[[0, j]] / z + cx;
            v[[1, j]] = focal * p[[1, j]] / z + cy;
        }
        let r = self.req(points);
        Ok(self.push(Op::Project { points, focal }, v, r))
    }

    /// Geman-McClure on squared residuals: rho(r2) = s2*r2/(s2+r2), elementwise.
    pub fn geman_mcclure(&mut self, r2: NodeId, sigma_sq: f64) -> NodeId {
        let v = self.nodes[r2]
            .value
            .mapv(|x| sigma_sq * x / (sigma_sq + x));
        let r = self.req(r2);
        self.push(Op::GemanMcclure(r2, sigma_sq), v, r)
    }

    /// Reverse pass from a scalar (1,1) root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), self);
                    accumulate(&mut grads, *b, g.clone(), self);
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut grads, *a, g.clone(), self);
                    let gb = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *bias, gb, self);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), self);
                    accumulate(&mut grads, *b, -&g, self);
                }
                Op::MatMul(a, b) => {
                    if self.req(*a) {
                        let ga = g.dot(&self.nodes[*b].value.t());
                        accumulate(&mut grads, *a, ga, self);
                    }
                    if self.req(*b) {
                        let gb = self.nodes[*a].value.t().dot(&g);
                        accumulate(&mut grads, *b, gb, self);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c, self),
                Op::MulElem(a, b) => {
                    if self.req(*a) {
                        accumulate(&mut grads, *a, &g * &self.nodes[*b].value, self);
                    }
                    if self.req(*b) {
                        accumulate(&mut grads, *b, &g * &self.nodes[*a].value, self);
                    }
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let d = x.mapv(|x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, &g * &d, self);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[id].value, self);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.nrows();
                    let ga = g.slice(ndarray::s![..ra, ..]).to_owned();
                    let gb = g.slice(ndarray::s![ra.., ..]).to_owned();
                    accumulate(&mut grads, *a, ga, self);
                    accumulate(&mut grads, *b, gb, self);
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Array2::<f64>::zeros(self.nodes[*a].value.raw_dim());
                    ga.slice_mut(ndarray::s![*start..*start + *len, ..])
                        .assign(&g);
                    accumulate(&mut grads, *a, ga, self);
                }
                Op::StackCols(cols) => {
                    for (j, &c) in cols.iter().enumerate() {
                        let gc = g.column(j).to_owned().insert_axis(Axis(1));
                        accumulate(&mut grads, c, gc, self);
                    }
                }
                Op::SumSq(a) => {
                    let gs = g[[0, 0]];
                    accumulate(&mut grads, *a, self.nodes[*a].value.mapv(|x| 2.0 * gs * x), self);
                }
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    accumulate(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.nodes[*a].value.raw_dim(), gs),
                        self,
                    );
                }
                Op::ColSumSq(a) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::<f64>::zeros(src.raw_dim());
                    for j in 0..src.ncols() {
                        let gj = g[[0, j]];
                        for i in 0..src.nrows() {
                            ga[[i, j]] = 2.0 * gj * src[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *a, ga, self);
                }
                Op::WeightedSum(a, w) => {
                    let gs = g[[0, 0]];
                    accumulate(&mut grads, *a, w.mapv(|w| w * gs), self);
                }
                Op::ScaleVecByScalar(vec, s) => {
                    let gs: f64 = vec.iter().zip(g.column(0)).map(|(v, g)| v * g).sum();
                    accumulate(&mut grads, *s, Array2::from_elem((1, 1), gs), self);
                }
                Op::Rodrigues(aa) => {
                    let a = &self.nodes[*aa].value;
                    let jac = rodrigues_jacobian(&[a[[0, 0]], a[[1, 0]], a[[2, 0]]]);
                    let mut ga = Array2::<f64>::zeros((3, 1));
                    for k in 0..3 {
                        ga[[k, 0]] = jac[k].iter().zip(g.iter()).map(|(d, g)| d * g).sum();
                    }
                    accumulate(&mut grads, *aa, ga, self);
                }
                Op::Project { points, focal } => {
                    let p = &self.nodes[*points].value;
                    let mut gp = Array2::<f64>::zeros(p.raw_dim());
                    for j in 0..p.ncols() {
                        let z = p[[2, j]];
                        let gu = g[[0, j]];
                        let gv = g[[1, j]];
                        gp[[0, j]] = focal * gu / z;
                        gp[[1, j]] = focal * gv / z;
                        gp[[2, j]] =
                            -focal * (p[[0, j]] * gu + p[[1, j]] * gv) / (z * z);
                    }
                    accumulate(&mut grads, *points, gp, self);
                }
                Op::GemanMcclure(r2, s2) => {
                    let d = self.nodes[*r2].value.mapv(|x| {
                        let denom = s2 + x;
                        s2 * s2 / (denom * denom)
                    });
                    accumulate(&mut grads, *r2, &g * &d, self);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>, tape: &GradTape) {
    if !tape.req(id) {
        return;
    }
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Rodrigues rotation matrix: R = I + A K + B K^2 with A = sin t / t,
/// B = (1 - cos t) / t^2, K the cross-product matrix of the axis-angle.
pub fn rodrigues_value(aa: &[f64; 3]) -> Array2<f64> {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let t = t2.sqrt();
    let (a, b) = sin_cos_coeffs(t);
    let k = cross_matrix(aa);
    let k2 = k.dot(&k);
    Array2::eye(3) + &(&k * a) + &(&k2 * b)
}

fn sin_cos_coeffs(t: f64) -> (f64, f64) {
    // Series below 1e-4 keeps both values and derivatives finite at t = 0.
    if t < 1e-4 {
        (1.0 - t * t / 6.0, 0.5 - t * t / 24.0)
    } else {
        (t.sin() / t, (1.0 - t.cos()) / (t * t))
    }
}

fn cross_matrix(a: &[f64; 3]) -> Array2<f64> {
    ndarray::arr2(&[
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])
}

/// d vec(R) / d aa_i for i = 0..3, each returned as a 3x3 matrix.
fn rodrigues_jacobian(aa: &[f64; 3]) -> [Array2<f64>; 3] {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let t = t2.sqrt();
    let (a, b) = sin_cos_coeffs(t);
    let k = cross_matrix(aa);
    let k2 = k.dot(&k);
    let mut out = [
        Array2::<f64>::zeros((3, 3)),
        Array2::<f64>::zeros((3, 3)),
        Array2::<f64>::zeros((3, 3)),
    ];
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = cross_matrix(&e);
        let kei = k.dot(&ei) + ei.dot(&k);
        // dA/da_i = A'(t) * a_i / t, finite for t -> 0 via series.
        let (da, db) = if t < 1e-4 {
            (-aa[i] / 3.0 * (1.0 - t * t / 10.0), -aa[i] / 12.0)
        } else {
            let ap = (t * t.cos() - t.sin()) / t2;
            let bp = (t * t.sin() - 2.0 * (1.0 - t.cos())) / (t2 * t);
            (ap * aa[i] / t, bp * aa[i] / t)
        };
        out[i] = &(&k * da) + &(&ei * a) + &(&k2 * db) + &(&kei * b);
    }
    out
}

/// Central-difference gradient of a scalar function. The oracle used to
/// validate tape gradients throughout the test suite.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite("finite_diff_grad evaluation"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
