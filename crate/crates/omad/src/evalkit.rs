//! Evaluation metrics: joint-state error with missing-prediction
//! penalties, camera-space joint-axis angle and distance errors, and
//! shape-parameter retrieval mAP.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{all_part_transforms, JointState, UNIT_TOL};
use crate::model::{OmadPrior, ShapeParams};

/// Penalty (degrees) charged for a revolute joint with no prediction.
pub const MISSING_REVOLUTE_PENALTY_DEG: f64 = 90.0;
/// Penalty (length units) charged for a prismatic joint with no
/// prediction.
pub const MISSING_PRISMATIC_PENALTY: f64 = 1.0;

/// An infinite line in camera space: a unit direction anchored at a
/// point. The anchor is not canonical — any point on the line describes
/// the same line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointAxisLine {
    pub direction: Vector3<f64>,
    pub point: Vector3<f64>,
}

impl JointAxisLine {
    /// Build a line, validating that `direction` is unit length.
    pub fn new(direction: Vector3<f64>, point: Vector3<f64>) -> Result<Self> {
        if !direction.iter().chain(point.iter()).all(|v| v.is_finite()) {
            return Err(Error::contract("axis line must be finite"));
        }
        if (direction.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "axis direction must be unit length (norm {})",
                direction.norm()
            )));
        }
        Ok(JointAxisLine { direction, point })
    }
}

/// One retrieval query: a probe shape vector against a labeled database.
#[derive(Debug, Clone)]
pub struct RetrievalRecord {
    pub query_beta: ShapeParams,
    pub database: Vec<(ShapeParams, String)>,
    pub query_label: String,
}

/// Joint-state error for a 1-DoF joint: `|θ_pred − θ_gt|` in degrees for
/// revolute joints (90° when the prediction is missing), `|d_pred −
/// d_gt|` in length units for prismatic joints (1.0 when missing).
pub fn joint_state_error(pred: Option<&JointState>, gt: &JointState) -> Result<f64> {
    match gt {
        JointState::Revolute { angle: gt_angle } => match pred {
            None => Ok(MISSING_REVOLUTE_PENALTY_DEG),
            Some(JointState::Revolute { angle }) => Ok((angle - gt_angle).abs().to_degrees()),
            Some(other) => Err(Error::contract(format!(
                "predicted state is {:?}, ground truth is revolute",
                other.joint_type()
            ))),
        },
        JointState::Prismatic {
            displacement: gt_d,
        } => match pred {
            None => Ok(MISSING_PRISMATIC_PENALTY),
            Some(JointState::Prismatic { displacement }) => Ok((displacement - gt_d).abs()),
            Some(other) => Err(Error::contract(format!(
                "predicted state is {:?}, ground truth is prismatic",
                other.joint_type()
            ))),
        },
        JointState::Free { .. } => Err(Error::contract(
            "joint-state error is defined for 1-DoF joints only",
        )),
    }
}

/// Angle between two axis directions in degrees, `arccos(clamp(u_pred ·
/// u_gt, −1, 1))`. Directions are signed: an antiparallel prediction
/// scores 180°, not 0°, because the direction sign fixes the sign of the
/// joint state. Output range [0°, 180°].
pub fn joint_axis_angle_error(pred: &JointAxisLine, gt: &JointAxisLine) -> f64 {
    pred.direction
        .dot(&gt.direction)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

/// Minimum Euclidean distance between two infinite lines:
/// `|(p₂−p₁)·(u₁×u₂)| / ‖u₁×u₂‖` when the directions are independent,
/// and the perpendicular point-to-line distance when (anti)parallel.
pub fn joint_axis_distance_error(pred: &JointAxisLine, gt: &JointAxisLine) -> f64 {
    let cross = pred.direction.cross(&gt.direction);
    let cross_norm = cross.norm();
    let dp = gt.point - pred.point;
    if cross_norm < 1e-9 {
        // Parallel: distance from gt.point to the pred line.
        let along = dp.dot(&pred.direction);
        (dp - along * pred.direction).norm()
    } else {
        dp.dot(&cross).abs() / cross_norm
    }
}

/// Mean average precision of retrieval by ascending Euclidean distance
/// between shape vectors. Per query the database is ranked (ties broken
/// by database index), the top `top_k` entries are scored by label
/// match, and AP is the mean of the precision values at the relevant
/// ranks — zero when nothing relevant is retrieved.
pub fn retrieval_map(queries: &[RetrievalRecord], top_k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::contract("at least one retrieval query is required"));
    }
    if top_k == 0 {
        return Err(Error::contract("top_k must be at least 1"));
    }
    let mut ap_sum = 0.0;
    for (qi, query) in queries.iter().enumerate() {
        if query.database.is_empty() {
            return Err(Error::contract(format!("query {qi} has an empty database")));
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(query.database.len());
        for (idx, (beta, _)) in query.database.iter().enumerate() {
            if beta.len() != query.query_beta.len() {
                return Err(Error::contract(format!(
                    "query {qi}: database entry {idx} has β length {} vs query {}",
                    beta.len(),
                    query.query_beta.len()
                )));
            }
            let dist = (beta - &query.query_beta).norm();
            if !dist.is_finite() {
                return Err(Error::contract(format!(
                    "query {qi}: non-finite distance to database entry {idx}"
                )));
            }
            scored.push((dist, idx));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &(_, idx)) in scored.iter().take(top_k).enumerate() {
            if query.database[idx].1 == query.query_label {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        if hits > 0 {
            ap_sum += precision_sum / hits as f64;
        }
    }
    Ok(ap_sum / queries.len() as f64)
}

/// Map a 1-DoF joint's canonical axis into camera space using the
/// transform of the joint's parent part: the direction takes the linear
/// part (renormalized), the anchor point the full rigid transform. For
/// prismatic joints the anchor is carried through for line construction
/// even though the pivot has no kinematic meaning there.
pub fn axis_to_camera(
    prior: &OmadPrior,
    beta: &ShapeParams,
    states: &[JointState],
    joint_id: usize,
) -> Result<JointAxisLine> {
    let tree = prior.tree();
    if joint_id >= tree.joint_count() {
        return Err(Error::Range {
            what: "joint id",
            index: joint_id,
            bound: tree.joint_count(),
        });
    }
    let joint = &tree.joints()[joint_id];
    if !joint.joint_type.is_one_dof() {
        return Err(Error::contract(
            "axis_to_camera is defined for 1-DoF joints only",
        ));
    }
    let params = prior.joint_params(beta)?;
    let gs = all_part_transforms(tree, &params, states)?;
    let parent = joint.parent.expect("1-DoF joints have parents");
    let g = &gs[parent];
    let lin = g.fixed_view::<3, 3>(0, 0);
    let t = g.fixed_view::<3, 1>(0, 3);
    let p = params[joint_id].as_ref().expect("1-DoF joints have params");
    let direction = (lin * p.direction).normalize();
    let point = lin * p.pivot + t;
    JointAxisLine::new(direction, Vector3::new(point.x, point.y, point.z))
}

/// Rotate a point about an axis line (used by tests and consumers that
/// re-pose keypoints around a recovered axis).
pub fn rotate_about_line(p: &Point3<f64>, line: &JointAxisLine, angle: f64) -> Point3<f64> {
    let rot = nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(line.direction),
        angle,
    );
    Point3::from(line.point + rot * (p.coords - line.point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{deform, JointSpec, JointType, KinematicTree};
    use crate::model::{JointFunctionWeights, ShapeBasis};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector, UnitQuaternion};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_error_missing_penalties() {
        let rev = JointState::Revolute { angle: 0.3 };
        let pri = JointState::Prismatic { displacement: 0.2 };
        assert_eq!(joint_state_error(None, &rev).unwrap(), 90.0);
        assert_eq!(joint_state_error(None, &pri).unwrap(), 1.0);
    }

    #[test]
    fn state_error_exact_and_converted() {
        let gt = JointState::Revolute { angle: 0.25 };
        assert_eq!(joint_state_error(Some(&gt), &gt).unwrap(), 0.0);
        let pred = JointState::Revolute { angle: 0.50 };
        let err = joint_state_error(Some(&pred), &gt).unwrap();
        assert_relative_eq!(err, 0.25f64.to_degrees(), epsilon = 1e-12);
        assert_relative_eq!(err, 14.3239, epsilon = 1e-4);

        let gt_p = JointState::Prismatic { displacement: 0.1 };
        let pred_p = JointState::Prismatic { displacement: -0.05 };
        assert_relative_eq!(
            joint_state_error(Some(&pred_p), &gt_p).unwrap(),
            0.15,
            epsilon = 1e-15
        );
    }

    #[test]
    fn state_error_rejects_mismatch_and_free() {
        let rev = JointState::Revolute { angle: 0.3 };
        let pri = JointState::Prismatic { displacement: 0.2 };
        assert!(joint_state_error(Some(&pri), &rev).is_err());
        assert!(joint_state_error(Some(&rev), &pri).is_err());
        let free = JointState::Free {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        };
        assert!(joint_state_error(Some(&free), &free).is_err());
        assert!(joint_state_error(None, &free).is_err());
    }

    #[test]
    fn axis_angle_error_examples() {
        let line = |d: Vector3<f64>| JointAxisLine::new(d.normalize(), Vector3::zeros()).unwrap();
        let x = line(Vector3::x());
        assert_eq!(joint_axis_angle_error(&x, &x), 0.0);
        assert_relative_eq!(
            joint_axis_angle_error(&x, &line(Vector3::y())),
            90.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            joint_axis_angle_error(&x, &line(Vector3::new(1.0, 1.0, 0.0))),
            45.0,
            epsilon = 1e-12
        );
        // Signed convention: antiparallel is a 180° error, not 0°.
        assert_relative_eq!(
            joint_axis_angle_error(&x, &line(-Vector3::x())),
            180.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn axis_angle_error_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rand_dir = |rng: &mut ChaCha8Rng| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
            };
            let a = JointAxisLine::new(rand_dir(&mut rng), Vector3::zeros()).unwrap();
            let b = JointAxisLine::new(rand_dir(&mut rng), Vector3::zeros()).unwrap();
            let angle = joint_axis_angle_error(&a, &b);
            assert!((0.0..=180.0).contains(&angle), "angle {angle}");
        }
    }

    #[test]
    fn axis_distance_error_examples() {
        // Identical lines.
        let a = JointAxisLine::new(Vector3::x(), Vector3::zeros()).unwrap();
        assert_eq!(joint_axis_distance_error(&a, &a), 0.0);
        // Unit skew offset: x line at origin vs y line through (0,0,1).
        let b = JointAxisLine::new(Vector3::y(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(joint_axis_distance_error(&a, &b), 1.0, epsilon = 1e-12);
        // Parallel lines along z through (0,0,0) and (3,4,0) → 5.
        let c = JointAxisLine::new(Vector3::z(), Vector3::zeros()).unwrap();
        let d = JointAxisLine::new(Vector3::z(), Vector3::new(3.0, 4.0, 0.0)).unwrap();
        assert_relative_eq!(joint_axis_distance_error(&c, &d), 5.0, epsilon = 1e-12);
        // Antiparallel hits the parallel branch too.
        let e = JointAxisLine::new(-Vector3::z(), Vector3::new(3.0, 4.0, 7.0)).unwrap();
        assert_relative_eq!(joint_axis_distance_error(&c, &e), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_distance_symmetry_and_reanchoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let rand_vec = |rng: &mut ChaCha8Rng, s: f64| {
                Vector3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                )
            };
            let a = JointAxisLine::new(rand_vec(&mut rng, 1.0).normalize(), rand_vec(&mut rng, 2.0))
                .unwrap();
            let b = JointAxisLine::new(rand_vec(&mut rng, 1.0).normalize(), rand_vec(&mut rng, 2.0))
                .unwrap();
            let d_ab = joint_axis_distance_error(&a, &b);
            let d_ba = joint_axis_distance_error(&b, &a);
            assert_relative_eq!(d_ab, d_ba, epsilon = 1e-9);
            assert!(d_ab >= 0.0);
            // Sliding an anchor along its own line changes nothing.
            let slide = rng.random_range(-3.0..3.0);
            let a2 = JointAxisLine::new(a.direction, a.point + slide * a.direction).unwrap();
            assert_relative_eq!(joint_axis_distance_error(&a2, &b), d_ab, epsilon = 1e-9);
            let b2 = JointAxisLine::new(b.direction, b.point + slide * b.direction).unwrap();
            assert_relative_eq!(joint_axis_distance_error(&a, &b2), d_ab, epsilon = 1e-9);
        }
    }

    fn beta1(v: f64) -> ShapeParams {
        DVector::from_vec(vec![v])
    }

    #[test]
    fn retrieval_map_hand_cases() {
        // Every top-k item relevant → 1.0.
        let db = vec![
            (beta1(0.1), "a".to_string()),
            (beta1(0.2), "a".to_string()),
            (beta1(5.0), "b".to_string()),
        ];
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: db.clone(),
            query_label: "a".into(),
        };
        assert_relative_eq!(retrieval_map(&[q.clone()], 2).unwrap(), 1.0);

        // Relevance pattern [1,0,1] at top-3 → AP = (1/1 + 2/3)/2.
        let db = vec![
            (beta1(1.0), "a".to_string()),
            (beta1(2.0), "b".to_string()),
            (beta1(3.0), "a".to_string()),
        ];
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: db,
            query_label: "a".into(),
        };
        assert_relative_eq!(
            retrieval_map(&[q], 3).unwrap(),
            (1.0 + 2.0 / 3.0) / 2.0,
            epsilon = 1e-12
        );

        // Nothing relevant retrieved → 0.
        let db = vec![(beta1(1.0), "b".to_string()), (beta1(2.0), "a".to_string())];
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: db,
            query_label: "a".into(),
        };
        assert_eq!(retrieval_map(&[q], 1).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_zero_distance_ranks_first() {
        let db = vec![
            (beta1(7.0), "far".to_string()),
            (beta1(3.0), "exact".to_string()),
            (beta1(-9.0), "far".to_string()),
        ];
        let q = RetrievalRecord {
            query_beta: beta1(3.0),
            database: db,
            query_label: "exact".into(),
        };
        assert_relative_eq!(retrieval_map(&[q], 1).unwrap(), 1.0);
    }

    #[test]
    fn retrieval_tie_break_is_stable_by_index() {
        // Two equidistant entries: index order decides ranks 1 and 2.
        let db = vec![
            (beta1(1.0), "b".to_string()),
            (beta1(-1.0), "a".to_string()),
        ];
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: db,
            query_label: "a".into(),
        };
        // "a" sits at rank 2 → AP = 1/2.
        assert_relative_eq!(retrieval_map(&[q], 2).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn retrieval_map_contract_errors_and_range() {
        assert!(retrieval_map(&[], 1).is_err());
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: vec![],
            query_label: "a".into(),
        };
        assert!(retrieval_map(&[q], 1).is_err());
        let q = RetrievalRecord {
            query_beta: beta1(0.0),
            database: vec![(beta1(1.0), "a".into())],
            query_label: "a".into(),
        };
        assert!(retrieval_map(&[q.clone()], 0).is_err());

        // Random records stay within [0, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = ["a", "b", "c"];
        let db: Vec<(ShapeParams, String)> = (0..30)
            .map(|i| {
                (
                    DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                    labels[i % 3].to_string(),
                )
            })
            .collect();
        let queries: Vec<RetrievalRecord> = (0..10)
            .map(|i| RetrievalRecord {
                query_beta: DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                database: db.clone(),
                query_label: labels[i % 3].to_string(),
            })
            .collect();
        let map = retrieval_map(&queries, 10).unwrap();
        assert!((0.0..=1.0).contains(&map), "mAP {map}");
    }

    /// Hinge prior with a constant joint function: direction +z, pivot
    /// (0.5, 0, 0), six keypoints.
    fn hinge_prior() -> OmadPrior {
        let tree = KinematicTree::new(
            2,
            vec![
                JointSpec::new(JointType::Free, None, 0),
                JointSpec::new(JointType::Revolute, Some(0), 1),
            ],
            vec![0, 0, 0, 1, 1, 1],
        )
        .unwrap();
        let pts = [
            [-0.5, -0.2, 0.0],
            [-0.5, 0.2, 0.1],
            [-0.3, 0.0, -0.1],
            [0.5, -0.2, 0.0],
            [0.5, 0.2, 0.1],
            [0.3, 0.0, -0.1],
        ];
        let mut b = DMatrix::zeros(18, 1);
        for i in 0..6 {
            for d in 0..3 {
                b[(3 * i + d, 0)] = pts[i][d];
            }
        }
        let basis = ShapeBasis::new(b).unwrap();
        let w1 = DMatrix::zeros(1, 1);
        let b1 = DVector::from_vec(vec![1.0]);
        let w2 = DMatrix::zeros(6, 1);
        let b2 = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
        let gamma = JointFunctionWeights::new(w1, b1, w2, b2).unwrap();
        OmadPrior::new(
            tree.clone(),
            basis,
            gamma,
            tree.rest_states(),
            "eval-hinge".into(),
            DVector::from_vec(vec![1.0]),
            2.0,
        )
        .unwrap()
    }

    fn states_for(q: UnitQuaternion<f64>, t: Vector3<f64>, angle: f64) -> Vec<JointState> {
        vec![
            JointState::Free {
                rotation: q,
                translation: t,
            },
            JointState::Revolute { angle },
        ]
    }

    #[test]
    fn axis_to_camera_identity_and_translation() {
        let prior = hinge_prior();
        let beta = beta1(1.0);
        let rest = states_for(UnitQuaternion::identity(), Vector3::zeros(), 0.0);
        let line = axis_to_camera(&prior, &beta, &rest, 1).unwrap();
        assert_relative_eq!(line.direction, Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(line.point, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);

        let t = Vector3::new(1.0, -2.0, 3.0);
        let moved = states_for(UnitQuaternion::identity(), t, 0.4);
        let line = axis_to_camera(&prior, &beta, &moved, 1).unwrap();
        assert_relative_eq!(line.direction, Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(line.point, Vector3::new(0.5, 0.0, 0.0) + t, epsilon = 1e-12);
    }

    #[test]
    fn axis_to_camera_matches_two_point_oracle() {
        let prior = hinge_prior();
        let beta = beta1(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let q = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let states = states_for(q, t, rng.random_range(-1.0..1.0));
            let line = axis_to_camera(&prior, &beta, &states, 1).unwrap();
            // Oracle: transform two points of the canonical line by the
            // free-joint rigid motion (the revolute joint's parent is the
            // root, so its prefix is exactly that motion).
            let canon_q = Vector3::new(0.5, 0.0, 0.0);
            let canon_u = Vector3::z();
            let p0 = q * canon_q + t;
            let p1 = q * (canon_q + canon_u) + t;
            let dir_oracle = (p1 - p0).normalize();
            assert_relative_eq!(line.direction, dir_oracle, epsilon = 1e-10);
            let gap = line.point - p0;
            assert_relative_eq!(
                (gap - gap.dot(&dir_oracle) * dir_oracle).norm(),
                0.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn axis_to_camera_rejects_free_joint_and_bad_id() {
        let prior = hinge_prior();
        let beta = beta1(1.0);
        let rest = states_for(UnitQuaternion::identity(), Vector3::zeros(), 0.0);
        assert!(axis_to_camera(&prior, &beta, &rest, 0).is_err());
        assert!(matches!(
            axis_to_camera(&prior, &beta, &rest, 5),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn axis_commutes_with_deform_for_leaf_revolute() {
        let prior = hinge_prior();
        let beta = beta1(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let q = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let theta = rng.random_range(-1.0..1.0);
            let dtheta = rng.random_range(-0.7..0.7);
            let states = states_for(q, t, theta);
            let line = axis_to_camera(&prior, &beta, &states, 1).unwrap();

            let canonical = prior.canonical_keypoints(&beta).unwrap();
            let params = prior.joint_params(&beta).unwrap();
            let at_theta = deform(prior.tree(), &canonical, &params, &states).unwrap();
            let bumped = states_for(q, t, theta + dtheta);
            let at_bumped = deform(prior.tree(), &canonical, &params, &bumped).unwrap();
            for i in 0..prior.m() {
                if prior.tree().keypoint_part()[i] != 1 {
                    continue;
                }
                let rotated = rotate_about_line(&at_theta[i], &line, dtheta);
                assert_relative_eq!(
                    rotated.coords,
                    at_bumped[i].coords,
                    epsilon = 1e-8
                );
            }
        }
    }
}
