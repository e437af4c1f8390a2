//! The category prior and its two generative functions: the linear shape
//! function `S(β;B) = Bβ` and the joint function `J(β;Γ)`, a two-layer
//! ReLU MLP mapping shape parameters to per-joint axis geometry.

use nalgebra::{DMatrix, DVector, Point3};

use crate::error::{Error, Result};
use crate::kinematics::{JointParams, JointState, KinematicTree};

/// Shape coefficients β (length `K_b`).
pub type ShapeParams = DVector<f64>;

/// Raw directions below this norm are treated as degenerate: a healthy
/// joint function produces O(1) directions, so anything near zero means
/// the network output collapsed (e.g. every hidden unit inactive).
const DEGENERATE_DIRECTION_NORM: f64 = 1e-12;

/// Low-rank shape basis `B` (3M×K_b). Column `i` is one basis shape with
/// keypoint layout `(3i, 3i+1, 3i+2) = (x, y, z)` of keypoint `i`.
///
/// Bases produced by the prior learner additionally have orthonormal,
/// per-coordinate zero-mean columns; the constructor checks only shape
/// and finiteness so hand-built bases remain expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBasis {
    matrix: DMatrix<f64>,
}

impl ShapeBasis {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() % 3 != 0 {
            return Err(Error::contract(format!(
                "shape basis must have 3M rows, got {}",
                matrix.nrows()
            )));
        }
        if matrix.ncols() == 0 {
            return Err(Error::contract("shape basis must have at least one column"));
        }
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("shape basis entries must be finite"));
        }
        Ok(ShapeBasis { matrix })
    }

    /// Keypoint count M.
    pub fn m(&self) -> usize {
        self.matrix.nrows() / 3
    }

    /// Basis count K_b.
    pub fn k_b(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Largest norm over columns of the per-coordinate keypoint mean —
    /// zero (to round-off) for zero-centered bases.
    pub fn max_column_centroid_norm(&self) -> f64 {
        let m = self.m() as f64;
        (0..self.k_b())
            .map(|c| {
                let col = self.matrix.column(c);
                let mut mean = [0.0f64; 3];
                for i in 0..self.m() {
                    for d in 0..3 {
                        mean[d] += col[3 * i + d];
                    }
                }
                (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt() / m
            })
            .fold(0.0, f64::max)
    }
}

/// Reshape a stacked 3M-vector into M keypoints.
pub fn unflatten_keypoints(v: &DVector<f64>) -> Vec<Point3<f64>> {
    debug_assert_eq!(v.len() % 3, 0);
    (0..v.len() / 3)
        .map(|i| Point3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
        .collect()
}

/// Flatten M keypoints into a stacked 3M-vector (inverse of
/// [`unflatten_keypoints`]).
pub fn flatten_keypoints(points: &[Point3<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        3 * points.len(),
        points.iter().flat_map(|p| [p.x, p.y, p.z]),
    )
}

/// The shape function: `P′ = S(β;B) = Bβ`, reshaped to M keypoints.
pub fn shape_apply(basis: &ShapeBasis, beta: &ShapeParams) -> Result<Vec<Point3<f64>>> {
    if beta.len() != basis.k_b() {
        return Err(Error::contract(format!(
            "beta length {} does not match basis count {}",
            beta.len(),
            basis.k_b()
        )));
    }
    let flat = basis.matrix() * beta;
    Ok(unflatten_keypoints(&flat))
}

/// Weights Γ of the two-layer ReLU joint function. Output has 6 slots per
/// 1-DoF joint: raw direction (3) then pivot (3), in 1-DoF joint order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFunctionWeights {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl JointFunctionWeights {
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    ) -> Result<Self> {
        if b1.len() != w1.nrows() {
            return Err(Error::contract(format!(
                "b1 length {} does not match W1 rows {}",
                b1.len(),
                w1.nrows()
            )));
        }
        if w2.ncols() != w1.nrows() {
            return Err(Error::contract(format!(
                "W2 columns {} do not match hidden width {}",
                w2.ncols(),
                w1.nrows()
            )));
        }
        if b2.len() != w2.nrows() {
            return Err(Error::contract(format!(
                "b2 length {} does not match W2 rows {}",
                b2.len(),
                w2.nrows()
            )));
        }
        if w2.nrows() % 6 != 0 {
            return Err(Error::contract(format!(
                "joint function output dimension {} must be 6 per 1-DoF joint",
                w2.nrows()
            )));
        }
        let finite = w1.iter().all(|v| v.is_finite())
            && b1.iter().all(|v| v.is_finite())
            && w2.iter().all(|v| v.is_finite())
            && b2.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::contract("joint function weights must be finite"));
        }
        Ok(JointFunctionWeights { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    /// Number of 1-DoF joints the output covers.
    pub fn k_1dof(&self) -> usize {
        self.w2.nrows() / 6
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }
}

/// Intermediate values of one joint-function evaluation, kept for
/// gradient computations.
#[derive(Debug, Clone)]
pub(crate) struct MlpForward {
    /// Hidden pre-activations `W1·β + b1`.
    pub pre: DVector<f64>,
    /// Hidden activations `relu(pre)`.
    pub hidden: DVector<f64>,
    /// Raw outputs `W2·hidden + b2`, 6 per 1-DoF joint.
    pub raw: DVector<f64>,
}

pub(crate) fn mlp_forward(gamma: &JointFunctionWeights, beta: &ShapeParams) -> MlpForward {
    let pre = gamma.w1() * beta + gamma.b1();
    let hidden = pre.map(|v| v.max(0.0));
    let raw = gamma.w2() * &hidden + gamma.b2();
    MlpForward { pre, hidden, raw }
}

/// Jacobian of the raw MLP output with respect to β (active-set
/// linearization: ReLU derivative is 0 at exactly 0).
pub(crate) fn mlp_jacobian(gamma: &JointFunctionWeights, fwd: &MlpForward) -> DMatrix<f64> {
    let mut masked_w1 = gamma.w1().clone();
    for (h, &pre) in fwd.pre.iter().enumerate() {
        if pre <= 0.0 {
            masked_w1.row_mut(h).fill(0.0);
        }
    }
    gamma.w2() * masked_w1
}

/// Split raw MLP outputs (6 per 1-DoF joint) into per-joint params,
/// normalizing directions. Shared by [`joint_apply`] and the estimator's
/// Jacobian, which needs the raw vector as well.
pub(crate) fn split_raw_params(
    raw: &DVector<f64>,
    tree: &KinematicTree,
) -> Result<Vec<Option<JointParams>>> {
    let mut out = vec![None; tree.joint_count()];
    for (slot, &joint) in tree.one_dof_joints().iter().enumerate() {
        let raw_dir = raw.fixed_rows::<3>(6 * slot).into_owned();
        let pivot = raw.fixed_rows::<3>(6 * slot + 3).into_owned();
        let norm = raw_dir.norm();
        if !norm.is_finite() || norm < DEGENERATE_DIRECTION_NORM {
            return Err(Error::DegenerateDirection { joint });
        }
        out[joint] = Some(JointParams::new(raw_dir / norm, pivot));
    }
    Ok(out)
}

/// The joint function: `Φ′ = J(β;Γ)`. Evaluates the MLP and splits the
/// output into per-joint axis direction (normalized) and pivot. Returns
/// one entry per tree joint; the free joint's entry is `None`.
pub fn joint_apply(
    gamma: &JointFunctionWeights,
    beta: &ShapeParams,
    tree: &KinematicTree,
) -> Result<Vec<Option<JointParams>>> {
    if beta.len() != gamma.input_dim() {
        return Err(Error::contract(format!(
            "beta length {} does not match joint function input {}",
            beta.len(),
            gamma.input_dim()
        )));
    }
    if gamma.k_1dof() != tree.one_dof_count() {
        return Err(Error::contract(format!(
            "joint function covers {} 1-DoF joints but tree has {}",
            gamma.k_1dof(),
            tree.one_dof_count()
        )));
    }
    let fwd = mlp_forward(gamma, beta);
    split_raw_params(&fwd.raw, tree)
}

/// The frozen category prior: topology, shape basis, joint-function
/// weights, rest states and small dataset statistics used to seed the
/// estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct OmadPrior {
    tree: KinematicTree,
    basis: ShapeBasis,
    gamma: JointFunctionWeights,
    rest_states: Vec<JointState>,
    category_name: String,
    /// Mean of the training β vectors (estimator initialization seed).
    mean_beta: DVector<f64>,
    /// Diameter (max pairwise keypoint distance) of the training data.
    data_diameter: f64,
}

impl OmadPrior {
    pub fn new(
        tree: KinematicTree,
        basis: ShapeBasis,
        gamma: JointFunctionWeights,
        rest_states: Vec<JointState>,
        category_name: String,
        mean_beta: DVector<f64>,
        data_diameter: f64,
    ) -> Result<Self> {
        if basis.m() != tree.keypoint_count() {
            return Err(Error::contract(format!(
                "basis covers {} keypoints but tree assigns {}",
                basis.m(),
                tree.keypoint_count()
            )));
        }
        if gamma.k_1dof() != tree.one_dof_count() {
            return Err(Error::contract(format!(
                "joint function covers {} 1-DoF joints but tree has {}",
                gamma.k_1dof(),
                tree.one_dof_count()
            )));
        }
        if gamma.input_dim() != basis.k_b() {
            return Err(Error::contract(format!(
                "joint function input {} does not match basis count {}",
                gamma.input_dim(),
                basis.k_b()
            )));
        }
        if rest_states.len() != tree.joint_count() {
            return Err(Error::contract(format!(
                "rest states must cover all {} joints (got {})",
                tree.joint_count(),
                rest_states.len()
            )));
        }
        for (j, (state, joint)) in rest_states.iter().zip(tree.joints()).enumerate() {
            if *state != JointState::rest(joint.joint_type) {
                return Err(Error::contract(format!(
                    "rest state of joint {j} must be the zero/identity state"
                )));
            }
        }
        if mean_beta.len() != basis.k_b() {
            return Err(Error::contract(format!(
                "mean beta length {} does not match basis count {}",
                mean_beta.len(),
                basis.k_b()
            )));
        }
        if !data_diameter.is_finite() || data_diameter < 0.0 {
            return Err(Error::contract("data diameter must be finite and nonnegative"));
        }
        Ok(OmadPrior {
            tree,
            basis,
            gamma,
            rest_states,
            category_name,
            mean_beta,
            data_diameter,
        })
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn basis(&self) -> &ShapeBasis {
        &self.basis
    }

    pub fn gamma(&self) -> &JointFunctionWeights {
        &self.gamma
    }

    pub fn rest_states(&self) -> &[JointState] {
        &self.rest_states
    }

    pub fn category_name(&self) -> &str {
        &self.category_name
    }

    pub fn mean_beta(&self) -> &DVector<f64> {
        &self.mean_beta
    }

    pub fn data_diameter(&self) -> f64 {
        self.data_diameter
    }

    /// Keypoint count M.
    pub fn m(&self) -> usize {
        self.basis.m()
    }

    /// Basis count K_b.
    pub fn k_b(&self) -> usize {
        self.basis.k_b()
    }

    /// Canonical keypoints for `beta` (shape function shortcut).
    pub fn canonical_keypoints(&self, beta: &ShapeParams) -> Result<Vec<Point3<f64>>> {
        shape_apply(&self.basis, beta)
    }

    /// Per-joint axis geometry for `beta` (joint function shortcut).
    pub fn joint_params(&self, beta: &ShapeParams) -> Result<Vec<Option<JointParams>>> {
        joint_apply(&self.gamma, beta, &self.tree)
    }
}
