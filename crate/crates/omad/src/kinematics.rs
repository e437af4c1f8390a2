//! Joint taxonomy, kinematic tree and the deformation function.
//!
//! An articulated object is a rooted tree of rigid parts. Every part is
//! connected to its parent by exactly one joint — its *reference joint*.
//! The root part's reference joint is the single free (6-DoF) joint that
//! places the whole object in camera space; all other joints are 1-DoF
//! (revolute or prismatic). Given per-joint axis geometry and per-joint
//! states, [`deform`] maps canonical keypoints to camera space by rigid
//! part-wise transforms.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Unit-norm tolerance for joint axis directions and quaternions.
pub const UNIT_TOL: f64 = 1e-9;

/// The three joint kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    /// 6-DoF joint placing the root part in camera space.
    Free,
    /// 1-DoF rotation about an axis (direction + pivot).
    Revolute,
    /// 1-DoF translation along an axis direction.
    Prismatic,
}

impl JointType {
    /// True for revolute and prismatic joints.
    pub fn is_one_dof(self) -> bool {
        !matches!(self, JointType::Free)
    }
}

/// Canonical-space axis geometry of a 1-DoF joint.
///
/// `direction` must be unit norm (within [`UNIT_TOL`]). `pivot` is a point
/// on the axis; it is meaningful for revolute joints and carried but
/// ignored for prismatic joints. Free joints carry no `JointParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub direction: Vector3<f64>,
    pub pivot: Vector3<f64>,
}

impl JointParams {
    pub fn new(direction: Vector3<f64>, pivot: Vector3<f64>) -> Self {
        JointParams { direction, pivot }
    }

    fn check_unit(&self) -> Result<()> {
        let n = self.direction.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "joint direction must be unit norm (got norm {n})"
            )));
        }
        if !self.pivot.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("joint pivot must be finite"));
        }
        Ok(())
    }
}

/// Pose variable of one joint, tagged by joint kind.
#[derive(Debug, Clone, PartialEq)]
pub enum JointState {
    Free {
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
    },
    Revolute {
        /// Rotation angle in radians, relative to the rest state.
        angle: f64,
    },
    Prismatic {
        /// Displacement along the axis, relative to the rest state.
        displacement: f64,
    },
}

impl JointState {
    /// Rest state for a joint kind: identity transform, zero angle or
    /// zero displacement.
    pub fn rest(jtype: JointType) -> Self {
        match jtype {
            JointType::Free => JointState::Free {
                rotation: UnitQuaternion::identity(),
                translation: Vector3::zeros(),
            },
            JointType::Revolute => JointState::Revolute { angle: 0.0 },
            JointType::Prismatic => JointState::Prismatic { displacement: 0.0 },
        }
    }

    /// The joint kind this state belongs to.
    pub fn joint_type(&self) -> JointType {
        match self {
            JointState::Free { .. } => JointType::Free,
            JointState::Revolute { .. } => JointType::Revolute,
            JointState::Prismatic { .. } => JointType::Prismatic,
        }
    }

    /// The scalar value of a 1-DoF state (angle or displacement).
    pub fn scalar(&self) -> Option<f64> {
        match self {
            JointState::Free { .. } => None,
            JointState::Revolute { angle } => Some(*angle),
            JointState::Prismatic { displacement } => Some(*displacement),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            JointState::Free {
                rotation,
                translation,
            } => {
                // UnitQuaternion keeps itself normalized, but deserialized or
                // hand-built values are re-checked to honor the invariant.
                let n = rotation.as_ref().norm();
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::contract(format!(
                        "free-joint quaternion must be unit norm (got norm {n})"
                    )));
                }
                if !translation.iter().all(|v| v.is_finite()) {
                    return Err(Error::contract("free-joint translation must be finite"));
                }
            }
            JointState::Revolute { angle } => {
                if !angle.is_finite() {
                    return Err(Error::contract("revolute angle must be finite"));
                }
            }
            JointState::Prismatic { displacement } => {
                if !displacement.is_finite() {
                    return Err(Error::contract("prismatic displacement must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// One edge of the kinematic tree: a joint of `joint_type` connecting
/// `parent` to `child`. The free joint has `parent == None` (it connects
/// the root part to the world).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSpec {
    pub joint_type: JointType,
    pub parent: Option<usize>,
    pub child: usize,
}

impl JointSpec {
    pub fn new(joint_type: JointType, parent: Option<usize>, child: usize) -> Self {
        JointSpec {
            joint_type,
            parent,
            child,
        }
    }
}

/// Object topology: parts, joints, and the keypoint→part assignment.
///
/// Validated on construction: exactly one free joint whose child is the
/// root part, every part is exactly one joint's child, parent links are
/// acyclic, and keypoint part ids are in range. Per-joint slices passed to
/// the operations below are indexed by the joint order given here.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    part_count: usize,
    joints: Vec<JointSpec>,
    keypoint_part: Vec<usize>,
    root_part: usize,
    /// part → index of the joint whose child it is.
    reference_joint: Vec<usize>,
    /// part → joint indices along the chain from the root to it, root
    /// (free joint) first, the part's own reference joint last.
    chains: Vec<Vec<usize>>,
    /// 1-DoF joint indices in joint order.
    one_dof_joints: Vec<usize>,
    /// joint → its slot among the 1-DoF joints (None for the free joint).
    one_dof_slot: Vec<Option<usize>>,
    /// parts ordered root-first (every part after its parent).
    topo_parts: Vec<usize>,
}

impl KinematicTree {
    pub fn new(
        part_count: usize,
        joints: Vec<JointSpec>,
        keypoint_part: Vec<usize>,
    ) -> Result<Self> {
        if part_count == 0 {
            return Err(Error::contract("tree must have at least one part"));
        }
        if joints.len() != part_count {
            return Err(Error::contract(format!(
                "every part needs exactly one reference joint: {} parts but {} joints",
                part_count,
                joints.len()
            )));
        }
        let mut reference_joint = vec![usize::MAX; part_count];
        let mut free_idx = None;
        for (j, joint) in joints.iter().enumerate() {
            if joint.child >= part_count {
                return Err(Error::Range {
                    what: "joint child part id",
                    index: joint.child,
                    bound: part_count,
                });
            }
            if let Some(p) = joint.parent {
                if p >= part_count {
                    return Err(Error::Range {
                        what: "joint parent part id",
                        index: p,
                        bound: part_count,
                    });
                }
                if p == joint.child {
                    return Err(Error::contract(format!(
                        "joint {j} connects part {p} to itself"
                    )));
                }
                if joint.joint_type == JointType::Free {
                    return Err(Error::contract(format!(
                        "free joint {j} must have no parent part"
                    )));
                }
            } else {
                if joint.joint_type != JointType::Free {
                    return Err(Error::contract(format!(
                        "joint {j} has no parent part but is not the free joint"
                    )));
                }
                if free_idx.replace(j).is_some() {
                    return Err(Error::contract("tree must have exactly one free joint"));
                }
            }
            if reference_joint[joint.child] != usize::MAX {
                return Err(Error::contract(format!(
                    "part {} is the child of more than one joint",
                    joint.child
                )));
            }
            reference_joint[joint.child] = j;
        }
        let free_idx = free_idx
            .ok_or_else(|| Error::contract("tree must have exactly one free joint"))?;
        if joints.iter().filter(|j| j.joint_type == JointType::Free).count() != 1 {
            return Err(Error::contract("tree must have exactly one free joint"));
        }
        let root_part = joints[free_idx].child;

        // Walk every part's parent links to the root; bounded walk length
        // doubles as cycle detection.
        let mut chains = vec![Vec::new(); part_count];
        for part in 0..part_count {
            let mut chain = Vec::new();
            let mut cur = part;
            for _ in 0..=part_count {
                let j = reference_joint[cur];
                chain.push(j);
                match joints[j].parent {
                    Some(p) => cur = p,
                    None => {
                        chain.reverse();
                        chains[part] = chain;
                        break;
                    }
                }
            }
            if chains[part].is_empty() {
                return Err(Error::contract(format!(
                    "parent links of part {part} do not reach the root (cycle)"
                )));
            }
        }

        if keypoint_part.is_empty() {
            return Err(Error::contract("tree must carry at least one keypoint"));
        }
        for (i, &p) in keypoint_part.iter().enumerate() {
            if p >= part_count {
                return Err(Error::contract(format!(
                    "keypoint {i} assigned to part {p}, but only {part_count} parts exist"
                )));
            }
        }

        let mut one_dof_joints = Vec::new();
        let mut one_dof_slot = vec![None; joints.len()];
        for (j, joint) in joints.iter().enumerate() {
            if joint.joint_type.is_one_dof() {
                one_dof_slot[j] = Some(one_dof_joints.len());
                one_dof_joints.push(j);
            }
        }

        let mut topo_parts: Vec<usize> = (0..part_count).collect();
        topo_parts.sort_by_key(|&p| chains[p].len());

        Ok(KinematicTree {
            part_count,
            joints,
            keypoint_part,
            root_part,
            reference_joint,
            chains,
            one_dof_joints,
            one_dof_slot,
            topo_parts,
        })
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    /// Number of keypoints M.
    pub fn keypoint_count(&self) -> usize {
        self.keypoint_part.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn keypoint_part(&self) -> &[usize] {
        &self.keypoint_part
    }

    pub fn root_part(&self) -> usize {
        self.root_part
    }

    /// The joint whose child is `part`.
    pub fn reference_joint(&self, part: usize) -> usize {
        self.reference_joint[part]
    }

    /// Joint indices from the root to `part`, free joint first and the
    /// part's own reference joint last.
    pub fn chain(&self, part: usize) -> &[usize] {
        &self.chains[part]
    }

    /// Indices of revolute/prismatic joints in joint order.
    pub fn one_dof_joints(&self) -> &[usize] {
        &self.one_dof_joints
    }

    pub fn one_dof_count(&self) -> usize {
        self.one_dof_joints.len()
    }

    /// Slot of `joint` among the 1-DoF joints, None for the free joint.
    pub fn one_dof_slot(&self, joint: usize) -> Option<usize> {
        self.one_dof_slot[joint]
    }

    /// Parts ordered so every part appears after its parent.
    pub fn parts_root_first(&self) -> &[usize] {
        &self.topo_parts
    }

    /// Rest state for every joint (identity free joint, zeros elsewhere).
    pub fn rest_states(&self) -> Vec<JointState> {
        self.joints
            .iter()
            .map(|j| JointState::rest(j.joint_type))
            .collect()
    }

    fn check_per_joint<T>(&self, what: &str, slice: &[T]) -> Result<()> {
        if slice.len() != self.joints.len() {
            return Err(Error::contract(format!(
                "{what} must cover all {} joints (got {})",
                self.joints.len(),
                slice.len()
            )));
        }
        Ok(())
    }
}

fn homogeneous(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// The rigid motion contributed by one joint.
///
/// Free → `[R(quat) | t]`. Revolute → rotation by `angle` about the axis
/// `direction` through `pivot`: linear part `R = Rodrigues(direction,
/// angle)`, translation `(I − R)·pivot`. Prismatic → `[I | displacement ·
/// direction]`. `params` must be present exactly for 1-DoF joints, and the
/// state tag must match `jtype`.
pub fn joint_transform(
    jtype: JointType,
    params: Option<&JointParams>,
    state: &JointState,
) -> Result<Matrix4<f64>> {
    if state.joint_type() != jtype {
        return Err(Error::contract(format!(
            "joint state tag {:?} does not match joint type {:?}",
            state.joint_type(),
            jtype
        )));
    }
    state.check()?;
    match jtype {
        JointType::Free => {
            if params.is_some() {
                return Err(Error::contract("free joints carry no joint params"));
            }
            let JointState::Free {
                rotation,
                translation,
            } = state
            else {
                unreachable!("tag checked above");
            };
            Ok(homogeneous(rotation.to_rotation_matrix().into_inner(), *translation))
        }
        JointType::Revolute => {
            let p = params
                .ok_or_else(|| Error::contract("revolute joint requires joint params"))?;
            p.check_unit()?;
            let JointState::Revolute { angle } = state else {
                unreachable!("tag checked above");
            };
            let axis = Unit::new_unchecked(p.direction.normalize());
            let r = Rotation3::from_axis_angle(&axis, *angle).into_inner();
            let t = (Matrix3::identity() - r) * p.pivot;
            Ok(homogeneous(r, t))
        }
        JointType::Prismatic => {
            let p = params
                .ok_or_else(|| Error::contract("prismatic joint requires joint params"))?;
            p.check_unit()?;
            let JointState::Prismatic { displacement } = state else {
                unreachable!("tag checked above");
            };
            Ok(homogeneous(Matrix3::identity(), *displacement * p.direction))
        }
    }
}

fn joint_transform_at(
    tree: &KinematicTree,
    params_all: &[Option<JointParams>],
    states: &[JointState],
    joint: usize,
) -> Result<Matrix4<f64>> {
    joint_transform(
        tree.joints()[joint].joint_type,
        params_all[joint].as_ref(),
        &states[joint],
    )
}

/// The camera-space transform of one part: the chain product
/// `G_k = ∏_{j ∈ A(k)} F_j` with the free joint leftmost and the part's
/// own reference joint rightmost.
pub fn part_transform(
    tree: &KinematicTree,
    params_all: &[Option<JointParams>],
    states: &[JointState],
    part_id: usize,
) -> Result<Matrix4<f64>> {
    if part_id >= tree.part_count() {
        return Err(Error::Range {
            what: "part id",
            index: part_id,
            bound: tree.part_count(),
        });
    }
    tree.check_per_joint("joint params", params_all)?;
    tree.check_per_joint("joint states", states)?;
    let mut g = Matrix4::identity();
    for &j in tree.chain(part_id) {
        g *= joint_transform_at(tree, params_all, states, j)?;
    }
    Ok(g)
}

/// Transforms for all parts at once, sharing parent products. Bitwise
/// identical to calling [`part_transform`] per part (same left-to-right
/// association along each chain).
pub fn all_part_transforms(
    tree: &KinematicTree,
    params_all: &[Option<JointParams>],
    states: &[JointState],
) -> Result<Vec<Matrix4<f64>>> {
    tree.check_per_joint("joint params", params_all)?;
    tree.check_per_joint("joint states", states)?;
    let mut gs = vec![Matrix4::identity(); tree.part_count()];
    for &part in tree.parts_root_first() {
        let j = tree.reference_joint(part);
        let f = joint_transform_at(tree, params_all, states, j)?;
        gs[part] = match tree.joints()[j].parent {
            Some(parent) => gs[parent] * f,
            None => f,
        };
    }
    Ok(gs)
}

/// The deformation function W: transform each canonical keypoint by its
/// part's transform. Output order equals input order.
pub fn deform(
    tree: &KinematicTree,
    canonical_keypoints: &[Point3<f64>],
    params_all: &[Option<JointParams>],
    states: &[JointState],
) -> Result<Vec<Point3<f64>>> {
    if canonical_keypoints.len() != tree.keypoint_count() {
        return Err(Error::contract(format!(
            "keypoint count {} does not match tree keypoint assignment {}",
            canonical_keypoints.len(),
            tree.keypoint_count()
        )));
    }
    let gs = all_part_transforms(tree, params_all, states)?;
    let parts: Vec<(Matrix3<f64>, Vector3<f64>)> = gs
        .iter()
        .map(|g| {
            (
                g.fixed_view::<3, 3>(0, 0).into_owned(),
                g.fixed_view::<3, 1>(0, 3).into_owned(),
            )
        })
        .collect();
    Ok(canonical_keypoints
        .iter()
        .zip(tree.keypoint_part())
        .map(|(p, &part)| {
            let (r, t) = &parts[part];
            Point3::from(r * p.coords + t)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-formula Rodrigues rotation: R = cosθ·I + sinθ·[u]× + (1−cosθ)·uuᵀ.
    fn rodrigues_oracle(u: [f64; 3], theta: f64) -> [[f64; 3]; 3] {
        let (s, c) = theta.sin_cos();
        let k = [
            [0.0, -u[2], u[1]],
            [u[2], 0.0, -u[0]],
            [-u[1], u[0], 0.0],
        ];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                r[i][j] = c * eye + s * k[i][j] + (1.0 - c) * u[i] * u[j];
            }
        }
        r
    }

    fn apply3(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    fn transform_point(m: &Matrix4<f64>, p: Point3<f64>) -> Point3<f64> {
        let r = m.fixed_view::<3, 3>(0, 0);
        let t = m.fixed_view::<3, 1>(0, 3);
        Point3::from(r * p.coords + t.into_owned())
    }

    /// 3 parts in a chain: free → part0, revolute → part1, revolute → part2.
    /// Two keypoints per part.
    fn chain3() -> KinematicTree {
        KinematicTree::new(
            3,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 1),
                JointSpec::new(JointType::Revolute, Some(1), 2),
            ],
            vec![0, 0, 1, 1, 2, 2],
        )
        .unwrap()
    }

    fn chain3_params() -> Vec<Option<JointParams>> {
        vec![
            None,
            Some(JointParams::new(
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.5, 0.0, 0.0),
            )),
            Some(JointParams::new(
                Vector3::new(0.0, 1.0, 0.0).normalize(),
                Vector3::new(1.0, 0.0, 0.2),
            )),
        ]
    }

    fn random_state(rng: &mut ChaCha8Rng, jtype: JointType) -> JointState {
        match jtype {
            JointType::Free => {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let angle = rng.random_range(-3.0..3.0);
                let rotation = if axis.norm() < 1e-6 {
                    UnitQuaternion::identity()
                } else {
                    UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle)
                };
                JointState::Free {
                    rotation,
                    translation: Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                }
            }
            JointType::Revolute => JointState::Revolute {
                angle: rng.random_range(-3.0..3.0),
            },
            JointType::Prismatic => JointState::Prismatic {
                displacement: rng.random_range(-1.0..1.0),
            },
        }
    }

    #[test]
    fn revolute_quarter_turn_about_z() {
        let m = joint_transform(
            JointType::Revolute,
            Some(&JointParams::new(
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::zeros(),
            )),
            &JointState::Revolute {
                angle: std::f64::consts::FRAC_PI_2,
            },
        )
        .unwrap();
        let p = transform_point(&m, Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn prismatic_zero_displacement_is_identity() {
        let m = joint_transform(
            JointType::Prismatic,
            Some(&JointParams::new(
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::zeros(),
            )),
            &JointState::Prismatic { displacement: 0.0 },
        )
        .unwrap();
        assert_eq!(m, Matrix4::identity());
    }

    #[test]
    fn revolute_with_pivot_matches_rodrigues_oracle() {
        // Quarter turn about z through (1,0,0): (2,0,0) → (1,1,0).
        let pivot = Vector3::new(1.0, 0.0, 0.0);
        let m = joint_transform(
            JointType::Revolute,
            Some(&JointParams::new(Vector3::new(0.0, 0.0, 1.0), pivot)),
            &JointState::Revolute {
                angle: std::f64::consts::FRAC_PI_2,
            },
        )
        .unwrap();
        let p = transform_point(&m, Point3::new(2.0, 0.0, 0.0));
        assert_relative_eq!(p, Point3::new(1.0, 1.0, 0.0), epsilon = 1e-12);

        // Independent oracle on a generic axis/pivot/angle/point.
        let u = {
            let v = [0.3, -0.5, 0.81];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let theta = 1.234;
        let pivot = [0.2, -0.7, 0.4];
        let point = [1.5, 0.25, -0.6];
        let r = rodrigues_oracle(u, theta);
        let shifted = [point[0] - pivot[0], point[1] - pivot[1], point[2] - pivot[2]];
        let rotated = apply3(&r, shifted);
        let expected = Point3::new(
            rotated[0] + pivot[0],
            rotated[1] + pivot[1],
            rotated[2] + pivot[2],
        );

        let m = joint_transform(
            JointType::Revolute,
            Some(&JointParams::new(
                Vector3::new(u[0], u[1], u[2]),
                Vector3::new(pivot[0], pivot[1], pivot[2]),
            )),
            &JointState::Revolute { angle: theta },
        )
        .unwrap();
        let got = transform_point(&m, Point3::new(point[0], point[1], point[2]));
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn free_joint_transform_is_rotation_then_translation() {
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.7);
        let translation = Vector3::new(1.0, 2.0, 3.0);
        let m = joint_transform(
            JointType::Free,
            None,
            &JointState::Free {
                rotation,
                translation,
            },
        )
        .unwrap();
        let p = Point3::new(0.3, -0.4, 0.5);
        assert_relative_eq!(
            transform_point(&m, p),
            Point3::from(rotation * p.coords + translation),
            epsilon = 1e-14
        );
    }

    #[test]
    fn mismatched_tag_is_contract_error() {
        let err = joint_transform(
            JointType::Revolute,
            Some(&JointParams::new(Vector3::z(), Vector3::zeros())),
            &JointState::Prismatic { displacement: 0.1 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_unit_direction_is_contract_error() {
        let err = joint_transform(
            JointType::Revolute,
            Some(&JointParams::new(
                Vector3::new(0.0, 0.0, 2.0),
                Vector3::zeros(),
            )),
            &JointState::Revolute { angle: 0.1 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rest_part_transforms_are_identity() {
        let tree = chain3();
        let params = chain3_params();
        let states = tree.rest_states();
        for part in 0..tree.part_count() {
            let g = part_transform(&tree, &params, &states, part).unwrap();
            assert_eq!(g, Matrix4::identity());
        }
    }

    #[test]
    fn two_part_hinge_single_factor_chain() {
        let tree = KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 1),
            ],
            vec![0, 1],
        )
        .unwrap();
        let params = vec![
            None,
            Some(JointParams::new(Vector3::z(), Vector3::zeros())),
        ];
        let states = vec![
            JointState::rest(JointType::Free),
            JointState::Revolute {
                angle: std::f64::consts::FRAC_PI_2,
            },
        ];
        let g0 = part_transform(&tree, &params, &states, 0).unwrap();
        let g1 = part_transform(&tree, &params, &states, 1).unwrap();
        assert_eq!(g0, Matrix4::identity());
        let expected =
            joint_transform(JointType::Revolute, params[1].as_ref(), &states[1]).unwrap();
        assert_eq!(g1, expected);
    }

    #[test]
    fn chain_product_matches_sequential_point_oracle() {
        let tree = chain3();
        let params = chain3_params();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let states: Vec<JointState> = tree
                .joints()
                .iter()
                .map(|j| random_state(&mut rng, j.joint_type))
                .collect();
            let g2 = part_transform(&tree, &params, &states, 2).unwrap();
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            // Oracle: apply each chain factor to the point one at a time,
            // deepest joint first (rightmost factor acts first).
            let mut q = p;
            for &j in tree.chain(2).iter().rev() {
                let f = joint_transform(
                    tree.joints()[j].joint_type,
                    params[j].as_ref(),
                    &states[j],
                )
                .unwrap();
                q = transform_point(&f, q);
            }
            assert_relative_eq!(transform_point(&g2, p), q, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_part_transforms_bitwise_matches_per_part() {
        let tree = chain3();
        let params = chain3_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<JointState> = tree
            .joints()
            .iter()
            .map(|j| random_state(&mut rng, j.joint_type))
            .collect();
        let all = all_part_transforms(&tree, &params, &states).unwrap();
        for part in 0..tree.part_count() {
            let single = part_transform(&tree, &params, &states, part).unwrap();
            assert_eq!(all[part], single, "part {part}");
        }
    }

    #[test]
    fn deform_rest_is_exact_identity() {
        let tree = chain3();
        let params = chain3_params();
        let keypoints: Vec<Point3<f64>> = (0..6)
            .map(|i| Point3::new(i as f64 * 0.1, -(i as f64) * 0.2, 0.3 + i as f64))
            .collect();
        let out = deform(&tree, &keypoints, &params, &tree.rest_states()).unwrap();
        assert_eq!(out, keypoints);
    }

    #[test]
    fn deform_pure_translation_shifts_all_keypoints() {
        let tree = chain3();
        let params = chain3_params();
        let t = Vector3::new(0.5, -1.5, 2.0);
        let mut states = tree.rest_states();
        states[0] = JointState::Free {
            rotation: UnitQuaternion::identity(),
            translation: t,
        };
        let keypoints: Vec<Point3<f64>> = (0..6)
            .map(|i| Point3::new(i as f64, 2.0 - i as f64, 0.25 * i as f64))
            .collect();
        let out = deform(&tree, &keypoints, &params, &states).unwrap();
        for (a, b) in keypoints.iter().zip(&out) {
            assert_relative_eq!(*b, Point3::from(a.coords + t), epsilon = 1e-14);
        }
    }

    #[test]
    fn deform_matches_per_point_oracle() {
        let tree = chain3();
        let params = chain3_params();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let states: Vec<JointState> = tree
                .joints()
                .iter()
                .map(|j| random_state(&mut rng, j.joint_type))
                .collect();
            let keypoints: Vec<Point3<f64>> = (0..6)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let out = deform(&tree, &keypoints, &params, &states).unwrap();
            for (i, p) in keypoints.iter().enumerate() {
                let g =
                    part_transform(&tree, &params, &states, tree.keypoint_part()[i]).unwrap();
                assert_relative_eq!(out[i], transform_point(&g, *p), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rigid_part_distances_and_determinants_preserved() {
        let tree = chain3();
        let params = chain3_params();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let keypoints: Vec<Point3<f64>> = (0..6)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        for _ in 0..200 {
            let states: Vec<JointState> = tree
                .joints()
                .iter()
                .map(|j| random_state(&mut rng, j.joint_type))
                .collect();
            let out = deform(&tree, &keypoints, &params, &states).unwrap();
            for i in 0..keypoints.len() {
                for j in (i + 1)..keypoints.len() {
                    if tree.keypoint_part()[i] != tree.keypoint_part()[j] {
                        continue;
                    }
                    let before = (keypoints[i] - keypoints[j]).norm();
                    let after = (out[i] - out[j]).norm();
                    assert!(
                        (after - before).abs() <= 1e-9 * before.max(1.0),
                        "distance drift {before} → {after}"
                    );
                }
            }
            for g in all_part_transforms(&tree, &params, &states).unwrap() {
                let det = g.fixed_view::<3, 3>(0, 0).determinant();
                assert!((det - 1.0).abs() <= 1e-9, "determinant {det}");
            }
        }
    }

    #[test]
    fn composition_with_global_rigid_transform() {
        let tree = chain3();
        let params = chain3_params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keypoints: Vec<Point3<f64>> = (0..6)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        for _ in 0..20 {
            let states1: Vec<JointState> = tree
                .joints()
                .iter()
                .map(|j| random_state(&mut rng, j.joint_type))
                .collect();
            let JointState::Free {
                rotation: r1,
                translation: t1,
            } = states1[0].clone()
            else {
                panic!("joint 0 is free");
            };
            let JointState::Free {
                rotation: r2,
                translation: t2,
            } = random_state(&mut rng, JointType::Free)
            else {
                panic!("free state requested");
            };
            let mut states2 = states1.clone();
            states2[0] = JointState::Free {
                rotation: r2 * r1,
                translation: t2 + r2 * t1,
            };
            let base = deform(&tree, &keypoints, &params, &states1).unwrap();
            let composed = deform(&tree, &keypoints, &params, &states2).unwrap();
            for (b, c) in base.iter().zip(&composed) {
                let expected = Point3::from(r2 * b.coords + t2);
                assert_relative_eq!(*c, expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn tree_validation_rejects_malformed_input() {
        // Two free joints.
        assert!(KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Free, None, 1),
            ],
            vec![0, 1],
        )
        .is_err());
        // Part that is nobody's child.
        assert!(KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 0),
            ],
            vec![0, 1],
        )
        .is_err());
        // Cycle between parts 1 and 2.
        assert!(KinematicTree::new(
            3,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(2), 1),
                JointSpec::new(JointType::Revolute, Some(1), 2),
            ],
            vec![0, 1, 2],
        )
        .is_err());
        // Keypoint assigned to a nonexistent part.
        assert!(KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 1),
            ],
            vec![0, 5],
        )
        .is_err());
        // Free joint with a parent part.
        assert!(KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Revolute, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 1),
            ],
            vec![0, 1],
        )
        .is_err());
    }

    #[test]
    fn invalid_part_id_is_range_error() {
        let tree = chain3();
        let err = part_transform(&tree, &chain3_params(), &tree.rest_states(), 9).unwrap_err();
        assert!(matches!(err, Error::Range { .. }));
    }

    #[test]
    fn one_dof_bookkeeping() {
        let tree = chain3();
        assert_eq!(tree.one_dof_joints(), &[1, 2]);
        assert_eq!(tree.one_dof_slot(0), None);
        assert_eq!(tree.one_dof_slot(1), Some(0));
        assert_eq!(tree.one_dof_slot(2), Some(1));
        assert_eq!(tree.root_part(), 0);
        assert_eq!(tree.chain(2), &[0, 1, 2]);
    }
}
