//! Optimization-based estimation of shape parameters and joint states
//! from observed camera-space keypoints: Levenberg–Marquardt on the
//! keypoint energy with an analytic Jacobian and deterministic
//! multi-start over free-joint orientations, plus the standalone loss
//! and aggregation formulas the surrounding pipeline evaluates.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{
    all_part_transforms, deform, joint_transform, JointState, JointType, KinematicTree,
};
use crate::learning::joint_loss;
use crate::model::{
    flatten_keypoints, mlp_forward, mlp_jacobian, split_raw_params, OmadPrior, ShapeParams,
};

/// One estimation task: a prior, observed keypoint targets, and an
/// optional warm start.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub prior: &'a OmadPrior,
    /// Observed camera-space keypoints P̂, ordered like the prior's.
    pub targets: Vec<Point3<f64>>,
    /// Warm start (β, per-joint states); multi-start is used when absent.
    pub init: Option<(ShapeParams, Vec<JointState>)>,
}

/// Levenberg–Marquardt settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Convergence threshold on the relative residual decrease of an
    /// accepted step.
    pub rel_tol: f64,
    pub lm_damping_init: f64,
    /// Number of multi-start initializations when no warm start is given.
    pub restarts: usize,
    /// Seed for initializations beyond the deterministic candidate list.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 200,
            rel_tol: 1e-10,
            lm_damping_init: 1e-3,
            restarts: 8,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.lm_damping_init > 0.0) {
            return Err(Error::contract("solver tolerances must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::contract("at least one restart is required"));
        }
        Ok(())
    }
}

/// Recovered parameters plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: ShapeParams,
    pub states: Vec<JointState>,
    /// RMS keypoint distance `‖r‖₂ / √M` in length units.
    pub residual: f64,
    /// Outer iterations of the winning run.
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
    /// Scalar energies of the winning run's accepted iterates (initial
    /// energy first); nonincreasing by construction.
    pub accepted_energies: Vec<f64>,
}

/// Analytic Jacobian plus smoothness diagnostics.
#[derive(Debug, Clone)]
pub struct EnergyJacobian {
    /// (3M)×D matrix, D = K_b + 6 + K_1dof, variable order
    /// `[β; free-joint rotation δω; free-joint translation; θ per 1-DoF
    /// joint]`. The rotation block is the local axis-angle increment
    /// around the current free-joint rotation (left-multiplied).
    pub matrix: DMatrix<f64>,
    /// True when the joint-function evaluation sits within 1e-9 of a
    /// ReLU kink, where the piecewise linearization is one-sided.
    pub near_kink: bool,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn check_problem_dims(prior: &OmadPrior, states: &[JointState], targets: &[Point3<f64>]) -> Result<()> {
    let tree = prior.tree();
    if states.len() != tree.joint_count() {
        return Err(Error::contract(format!(
            "states must cover all {} joints (got {})",
            tree.joint_count(),
            states.len()
        )));
    }
    for (j, (state, joint)) in states.iter().zip(tree.joints()).enumerate() {
        if state.joint_type() != joint.joint_type {
            return Err(Error::contract(format!(
                "state {j} tag {:?} does not match joint type {:?}",
                state.joint_type(),
                joint.joint_type
            )));
        }
    }
    if targets.len() != prior.m() {
        return Err(Error::contract(format!(
            "targets have {} keypoints, prior expects {}",
            targets.len(),
            prior.m()
        )));
    }
    if targets.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
        return Err(Error::contract("targets must be finite"));
    }
    Ok(())
}

/// The keypoint energy of the estimator: residual vector
/// `flatten(W(S(β), J(β), Θ) − targets)` and its Euclidean norm.
pub fn energy(
    prior: &OmadPrior,
    beta: &ShapeParams,
    states: &[JointState],
    targets: &[Point3<f64>],
) -> Result<(DVector<f64>, f64)> {
    check_problem_dims(prior, states, targets)?;
    let canonical = prior.canonical_keypoints(beta)?;
    let params = prior.joint_params(beta)?;
    let deformed = deform(prior.tree(), &canonical, &params, states)?;
    let mut r = DVector::zeros(3 * targets.len());
    for (i, (d, t)) in deformed.iter().zip(targets).enumerate() {
        let diff = d - t;
        r[3 * i] = diff.x;
        r[3 * i + 1] = diff.y;
        r[3 * i + 2] = diff.z;
    }
    let norm = r.norm();
    Ok((r, norm))
}

/// Elementary skew matrices ∂[u]×/∂u_m.
fn elementary_skews() -> [Matrix3<f64>; 3] {
    [
        skew(&Vector3::x()),
        skew(&Vector3::y()),
        skew(&Vector3::z()),
    ]
}

/// Analytic Jacobian of the energy residual with respect to
/// `[β; δω; t; θ…]`. β acts through both the shape function and the
/// joint function (axis directions and pivots), so its block carries the
/// chain rule through the MLP and the direction normalization.
pub fn energy_jacobian(
    prior: &OmadPrior,
    beta: &ShapeParams,
    states: &[JointState],
    targets: &[Point3<f64>],
) -> Result<EnergyJacobian> {
    check_problem_dims(prior, states, targets)?;
    let tree = prior.tree();
    let m = prior.m();
    let k_b = prior.k_b();
    let k1 = tree.one_dof_count();
    let dim = k_b + 6 + k1;

    let fwd = mlp_forward(prior.gamma(), beta);
    let near_kink = fwd.pre.iter().any(|v| v.abs() < 1e-9);
    let j_raw = mlp_jacobian(prior.gamma(), &fwd);
    let params = split_raw_params(&fwd.raw, tree)?;
    let canonical = prior.canonical_keypoints(beta)?;
    let gs = all_part_transforms(tree, &params, states)?;

    let free_joint = tree.reference_joint(tree.root_part());
    let JointState::Free { translation: t_free, .. } = &states[free_joint] else {
        return Err(Error::contract("root reference joint must be free"));
    };

    // Per 1-DoF joint: camera-space axis data and β-sensitivities.
    struct JointCols {
        /// Camera-space unit axis (prefix rotation applied).
        u_cam: Vector3<f64>,
        /// Camera-space pivot (prefix transform applied) — revolute only.
        q_cam: Vector3<f64>,
        /// Prefix linear part (transform of the joint's parent part).
        p_rot: Matrix3<f64>,
        /// Canonical direction Jacobian ∂u/∂β (3×K_b).
        du_dbeta: nalgebra::Matrix3xX<f64>,
        /// Canonical pivot Jacobian ∂q/∂β (3×K_b).
        dq_dbeta: nalgebra::Matrix3xX<f64>,
        /// Joint rotation matrix (revolute) and its ∂R/∂u_m pieces.
        rot: Matrix3<f64>,
        drot_du: [Matrix3<f64>; 3],
    }

    let e_skew = elementary_skews();
    let mut per_joint: Vec<Option<JointCols>> =
        (0..tree.joint_count()).map(|_| None).collect();
    for (slot, &j) in tree.one_dof_joints().iter().enumerate() {
        let p = params[j].as_ref().expect("1-DoF joints have params");
        let parent = tree.joints()[j].parent.expect("1-DoF joints have parents");
        let g_parent = &gs[parent];
        let p_rot = g_parent.fixed_view::<3, 3>(0, 0).into_owned();
        let p_t = g_parent.fixed_view::<3, 1>(0, 3).into_owned();
        let u_cam = p_rot * p.direction;
        let q_cam = p_rot * p.pivot + p_t;

        let raw_dir = fwd.raw.fixed_rows::<3>(6 * slot).into_owned();
        let raw_norm = raw_dir.norm();
        let unit = raw_dir / raw_norm;
        // ∂(raw/‖raw‖)/∂raw = (I − ûûᵀ)/‖raw‖, chained with the MLP rows.
        let norm_chain = (Matrix3::identity() - unit * unit.transpose()) / raw_norm;
        let j_dir = j_raw.fixed_rows::<3>(6 * slot).into_owned();
        let du_dbeta = norm_chain * j_dir;
        let dq_dbeta = j_raw.fixed_rows::<3>(6 * slot + 3).into_owned();

        let (rot, drot_du) = match tree.joints()[j].joint_type {
            JointType::Revolute => {
                let JointState::Revolute { angle } = &states[j] else {
                    unreachable!("tags checked");
                };
                let u = p.direction;
                let rot = Rotation3::from_axis_angle(
                    &nalgebra::Unit::new_unchecked(u),
                    *angle,
                )
                .into_inner();
                let big_u = skew(&u);
                let (s, c) = angle.sin_cos();
                let mut drot = [Matrix3::zeros(); 3];
                for (mcomp, dr) in drot.iter_mut().enumerate() {
                    *dr = s * e_skew[mcomp]
                        + (1.0 - c) * (e_skew[mcomp] * big_u + big_u * e_skew[mcomp]);
                }
                (rot, drot)
            }
            JointType::Prismatic => (Matrix3::identity(), [Matrix3::zeros(); 3]),
            JointType::Free => unreachable!("only 1-DoF joints reach here"),
        };

        per_joint[j] = Some(JointCols {
            u_cam,
            q_cam,
            p_rot,
            du_dbeta,
            dq_dbeta,
            rot,
            drot_du,
        });
    }

    // Per-joint transforms for the inside-out chain walk.
    let joint_mats: Vec<nalgebra::Matrix4<f64>> = tree
        .joints()
        .iter()
        .enumerate()
        .map(|(j, joint)| joint_transform(joint.joint_type, params[j].as_ref(), &states[j]))
        .collect::<Result<_>>()?;

    let mut jac = DMatrix::zeros(3 * m, dim);
    let basis = prior.basis().matrix();

    for i in 0..m {
        let part = tree.keypoint_part()[i];
        let chain = tree.chain(part);
        // Intermediate points: w[pos] is the input of the chain factor at
        // `pos`; the final point p_i comes out of the last application.
        let mut w = vec![Vector3::zeros(); chain.len()];
        let mut cur = canonical[i].coords;
        for pos in (0..chain.len()).rev() {
            w[pos] = cur;
            let f = &joint_mats[chain[pos]];
            cur = f.fixed_view::<3, 3>(0, 0) * cur + f.fixed_view::<3, 1>(0, 3);
        }
        let p_i = cur;

        // Free-joint translation block: identity.
        for d in 0..3 {
            jac[(3 * i + d, k_b + 3 + d)] = 1.0;
        }
        // Free-joint rotation block: −[p − t]× for the local increment
        // R ← exp([δω]×)·R.
        let rot_block = -skew(&(p_i - t_free));
        for r in 0..3 {
            for c in 0..3 {
                jac[(3 * i + r, k_b + c)] = rot_block[(r, c)];
            }
        }
        // Shape path of β: rotate the basis rows by the part's linear part.
        let g_rot = gs[part].fixed_view::<3, 3>(0, 0).into_owned();
        let b_rows = basis.rows(3 * i, 3);
        let shape_block = &g_rot * b_rows;
        for r in 0..3 {
            for c in 0..k_b {
                jac[(3 * i + r, c)] += shape_block[(r, c)];
            }
        }

        // 1-DoF joints along the chain: θ columns and the joint-geometry
        // path of β.
        for (pos, &j) in chain.iter().enumerate() {
            let Some(slot) = tree.one_dof_slot(j) else {
                continue;
            };
            let cols = per_joint[j].as_ref().expect("filled above");
            let theta_col = k_b + 6 + slot;
            match tree.joints()[j].joint_type {
                JointType::Revolute => {
                    let dtheta = cols.u_cam.cross(&(p_i - cols.q_cam));
                    for r in 0..3 {
                        jac[(3 * i + r, theta_col)] = dtheta[r];
                    }
                    let p = params[j].as_ref().expect("1-DoF");
                    let lever = w[pos] - p.pivot;
                    // ∂p/∂u (3×3): prefix · ∂R/∂u_m · (w − q) per column.
                    let mut dp_du = Matrix3::zeros();
                    for (mcomp, dr) in cols.drot_du.iter().enumerate() {
                        let col = cols.p_rot * (dr * lever);
                        dp_du.set_column(mcomp, &col);
                    }
                    // ∂p/∂q = prefix · (I − R).
                    let dp_dq = cols.p_rot * (Matrix3::identity() - cols.rot);
                    let beta_block = dp_du * &cols.du_dbeta + dp_dq * &cols.dq_dbeta;
                    for r in 0..3 {
                        for c in 0..k_b {
                            jac[(3 * i + r, c)] += beta_block[(r, c)];
                        }
                    }
                }
                JointType::Prismatic => {
                    for r in 0..3 {
                        jac[(3 * i + r, theta_col)] = cols.u_cam[r];
                    }
                    let JointState::Prismatic { displacement } = &states[j] else {
                        unreachable!("tags checked");
                    };
                    // ∂p/∂u = θ · prefix; pivot has no effect.
                    let beta_block = (*displacement * cols.p_rot) * &cols.du_dbeta;
                    for r in 0..3 {
                        for c in 0..k_b {
                            jac[(3 * i + r, c)] += beta_block[(r, c)];
                        }
                    }
                }
                JointType::Free => unreachable!("free joint has no slot"),
            }
        }
    }

    Ok(EnergyJacobian {
        matrix: jac,
        near_kink,
    })
}

/// Split per-joint states into the free-joint pose and the 1-DoF scalars
/// (in 1-DoF joint order).
fn split_states(
    tree: &KinematicTree,
    states: &[JointState],
) -> Result<(UnitQuaternion<f64>, Vector3<f64>, Vec<f64>)> {
    if states.len() != tree.joint_count() {
        return Err(Error::contract("states must cover all joints"));
    }
    let free_joint = tree.reference_joint(tree.root_part());
    let JointState::Free {
        rotation,
        translation,
    } = &states[free_joint]
    else {
        return Err(Error::contract("root reference joint state must be free"));
    };
    let thetas = tree
        .one_dof_joints()
        .iter()
        .map(|&j| {
            states[j]
                .scalar()
                .ok_or_else(|| Error::contract("1-DoF joint state must carry a scalar"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((*rotation, *translation, thetas))
}

/// Inverse of [`split_states`].
fn assemble_states(
    tree: &KinematicTree,
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    thetas: &[f64],
) -> Vec<JointState> {
    let mut states: Vec<JointState> = tree.rest_states();
    let free_joint = tree.reference_joint(tree.root_part());
    states[free_joint] = JointState::Free {
        rotation,
        translation,
    };
    for (slot, &j) in tree.one_dof_joints().iter().enumerate() {
        states[j] = match tree.joints()[j].joint_type {
            JointType::Revolute => JointState::Revolute {
                angle: thetas[slot],
            },
            JointType::Prismatic => JointState::Prismatic {
                displacement: thetas[slot],
            },
            JointType::Free => unreachable!("1-DoF slots only"),
        };
    }
    states
}

/// The 24 rotation matrices of the octahedral group (signed permutation
/// matrices with determinant +1), ordered identity-first and then by
/// greedy farthest-point selection under geodesic distance, so that any
/// prefix is a well-spread subsample of SO(3)'s coarse symmetries.
fn octahedral_orientations() -> Vec<Rotation3<f64>> {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut all = Vec::with_capacity(24);
    for perm in perms {
        for bits in 0..8u32 {
            let mut m = Matrix3::<f64>::zeros();
            for (row, &col) in perm.iter().enumerate() {
                let sign = if bits & (1 << row) == 0 { 1.0 } else { -1.0 };
                m[(row, col)] = sign;
            }
            if (m.determinant() - 1.0).abs() < 1e-12 {
                all.push(m);
            }
        }
    }
    debug_assert_eq!(all.len(), 24);

    let angle = |a: &Matrix3<f64>, b: &Matrix3<f64>| -> f64 {
        let rel = a * b.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    };
    let identity_pos = all
        .iter()
        .position(|m| (m - Matrix3::identity()).norm() < 1e-12)
        .expect("identity is octahedral");
    let mut order = vec![identity_pos];
    let mut remaining: Vec<usize> = (0..all.len()).filter(|&i| i != identity_pos).collect();
    while !remaining.is_empty() {
        let (pick_idx, _) = remaining
            .iter()
            .enumerate()
            .map(|(ri, &cand)| {
                let min_dist = order
                    .iter()
                    .map(|&sel| angle(&all[cand], &all[sel]))
                    .fold(f64::INFINITY, f64::min)
                    // Stable deterministic tie-break: prefer lower index.
                    - 1e-12 * cand as f64;
                (ri, min_dist)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("nonempty");
        let cand = remaining.remove(pick_idx);
        order.push(cand);
    }
    order
        .into_iter()
        .map(|i| Rotation3::from_matrix_unchecked(all[i]))
        .collect()
}

struct LmRun {
    beta: ShapeParams,
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    thetas: Vec<f64>,
    energy: f64,
    iterations: usize,
    converged: bool,
    accepted_energies: Vec<f64>,
}

const LM_DAMPING_MAX: f64 = 1e12;
const LM_DAMPING_MIN: f64 = 1e-12;
/// Scalar energy below which a run is accepted as exact.
const ENERGY_EXACT: f64 = 1e-13;

#[allow(clippy::too_many_arguments)]
fn lm_run(
    prior: &OmadPrior,
    targets: &[Point3<f64>],
    mut beta: ShapeParams,
    mut rotation: UnitQuaternion<f64>,
    mut translation: Vector3<f64>,
    mut thetas: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<LmRun> {
    let tree = prior.tree();
    let k_b = prior.k_b();
    let mut states = assemble_states(tree, rotation, translation, &thetas);
    let (_, mut e) = energy(prior, &beta, &states, targets)?;
    let mut accepted_energies = vec![e];
    let mut damping = cfg.lm_damping_init;
    let mut converged = e < ENERGY_EXACT;
    let mut iterations = 0usize;

    'outer: while iterations < cfg.max_iters && !converged {
        iterations += 1;
        let jac = energy_jacobian(prior, &beta, &states, targets)?.matrix;
        let (r, _) = energy(prior, &beta, &states, targets)?;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.norm() < 1e-14 * (1.0 + e) {
            converged = true;
            break;
        }
        loop {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += damping;
            }
            let delta = match a.cholesky() {
                Some(chol) => chol.solve(&(-&g)),
                None => {
                    damping *= 10.0;
                    if damping > LM_DAMPING_MAX {
                        break 'outer;
                    }
                    continue;
                }
            };
            let cand_beta = &beta + delta.rows(0, k_b).into_owned();
            let d_omega = Vector3::new(delta[k_b], delta[k_b + 1], delta[k_b + 2]);
            let cand_rotation = UnitQuaternion::from_scaled_axis(d_omega) * rotation;
            let cand_translation =
                translation + Vector3::new(delta[k_b + 3], delta[k_b + 4], delta[k_b + 5]);
            let cand_thetas: Vec<f64> = thetas
                .iter()
                .enumerate()
                .map(|(s, &t)| t + delta[k_b + 6 + s])
                .collect();
            let cand_states =
                assemble_states(tree, cand_rotation, cand_translation, &cand_thetas);
            let cand_e = match energy(prior, &cand_beta, &cand_states, targets) {
                Ok((_, en)) if en.is_finite() => en,
                _ => f64::INFINITY,
            };
            if cand_e < e {
                let rel_decrease = (e - cand_e) / e.max(f64::MIN_POSITIVE);
                beta = cand_beta;
                rotation = cand_rotation;
                translation = cand_translation;
                thetas = cand_thetas;
                states = cand_states;
                e = cand_e;
                accepted_energies.push(e);
                damping = (damping / 10.0).max(LM_DAMPING_MIN);
                if rel_decrease < cfg.rel_tol || e < ENERGY_EXACT {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
            if damping > LM_DAMPING_MAX {
                // No acceptable step at any damping: a (local) stationary
                // point; report the current iterate as converged.
                converged = true;
                break 'outer;
            }
        }
    }

    Ok(LmRun {
        beta,
        rotation,
        translation,
        thetas,
        energy: e,
        iterations,
        converged,
        accepted_energies,
    })
}

/// Minimize the keypoint energy. With a warm start, runs a single
/// Levenberg–Marquardt descent from it; otherwise runs `cfg.restarts`
/// seeded initializations (octahedral free-joint orientations × β from
/// the prior's mean and zero, translation at the target centroid, 1-DoF
/// states at rest) and returns the best final residual.
pub fn fit(problem: &FitProblem, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let prior = problem.prior;
    let tree = prior.tree();
    if problem.targets.len() != prior.m() {
        return Err(Error::contract(format!(
            "targets have {} keypoints, prior expects {}",
            problem.targets.len(),
            prior.m()
        )));
    }
    if problem
        .targets
        .iter()
        .any(|p| !p.coords.iter().all(|v| v.is_finite()))
    {
        return Err(Error::contract("targets must be finite"));
    }

    let starts: Vec<(ShapeParams, UnitQuaternion<f64>, Vector3<f64>, Vec<f64>)> =
        match &problem.init {
            Some((beta, states)) => {
                let (q, t, thetas) = split_states(tree, states)?;
                if beta.len() != prior.k_b() {
                    return Err(Error::contract(format!(
                        "init beta length {} does not match basis count {}",
                        beta.len(),
                        prior.k_b()
                    )));
                }
                vec![(beta.clone(), q, t, thetas)]
            }
            None => {
                let centroid = problem
                    .targets
                    .iter()
                    .fold(Vector3::zeros(), |acc, p| acc + p.coords)
                    / problem.targets.len() as f64;
                let thetas0 = vec![0.0; tree.one_dof_count()];
                let octa = octahedral_orientations();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (0..cfg.restarts)
                    .map(|idx| {
                        let rotation = if idx < 48 {
                            UnitQuaternion::from_rotation_matrix(&octa[idx % 24])
                        } else {
                            // Beyond the deterministic candidate list:
                            // uniform random orientation.
                            let q = nalgebra::Quaternion::new(
                                rng.sample::<f64, _>(rand_distr::StandardNormal),
                                rng.sample::<f64, _>(rand_distr::StandardNormal),
                                rng.sample::<f64, _>(rand_distr::StandardNormal),
                                rng.sample::<f64, _>(rand_distr::StandardNormal),
                            );
                            UnitQuaternion::from_quaternion(q)
                        };
                        let beta = if idx < 24 || idx >= 48 {
                            prior.mean_beta().clone()
                        } else {
                            DVector::zeros(prior.k_b())
                        };
                        (beta, rotation, centroid, thetas0.clone())
                    })
                    .collect()
            }
        };

    let mut best: Option<LmRun> = None;
    let mut attempts = 0usize;
    let mut last_err: Option<Error> = None;
    for (beta, q, t, thetas) in starts {
        attempts += 1;
        match lm_run(prior, &problem.targets, beta, q, t, thetas, cfg) {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .map_or(true, |b| run.energy < b.energy);
                if better {
                    best = Some(run);
                }
                if best.as_ref().map_or(false, |b| b.energy < ENERGY_EXACT) {
                    break;
                }
            }
            Err(err) => {
                last_err = Some(err);
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::OptimizationFailed(format!(
            "all {attempts} restarts failed (last error: {})",
            last_err.map_or_else(|| "none".to_string(), |e| e.to_string())
        ))
    })?;
    let states = assemble_states(tree, best.rotation, best.translation, &best.thetas);
    Ok(FitResult {
        beta: best.beta,
        states,
        residual: best.energy / (prior.m() as f64).sqrt(),
        iterations: best.iterations,
        converged: best.converged,
        restarts_used: attempts,
        accepted_energies: best.accepted_energies,
    })
}

/// Attention-weighted keypoint voting: `p̂_j = (1/N) Σ_i s_{i,j} (x_i +
/// o_{i,j})`, evaluated literally (attention weights are divided by N,
/// not by their own sum).
pub fn keypoint_vote(
    points: &[Point3<f64>],
    offsets: &[Vec<Vector3<f64>>],
    attention: &DMatrix<f64>,
) -> Result<Vec<Point3<f64>>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::contract("at least one voting point is required"));
    }
    if offsets.len() != n || attention.nrows() != n {
        return Err(Error::contract(format!(
            "offsets ({}) and attention rows ({}) must match point count {n}",
            offsets.len(),
            attention.nrows()
        )));
    }
    let m = attention.ncols();
    if offsets.iter().any(|row| row.len() != m) {
        return Err(Error::contract(
            "every offset row must have one entry per keypoint",
        ));
    }
    if attention.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::contract("attention entries must lie in [0, 1]"));
    }
    let mut out = vec![Vector3::zeros(); m];
    for (i, point) in points.iter().enumerate() {
        for (j, acc) in out.iter_mut().enumerate() {
            *acc += attention[(i, j)] * (point.coords + offsets[i][j]);
        }
    }
    Ok(out
        .into_iter()
        .map(|v| Point3::from(v / n as f64))
        .collect())
}

/// Shape-parameter loss: `‖S(β) − S(β*)‖₂ + L_joint(J(β), J(β*))`.
pub fn loss_beta(
    beta: &ShapeParams,
    beta_star: &ShapeParams,
    prior: &OmadPrior,
    lambda: f64,
) -> Result<f64> {
    let s_pred = flatten_keypoints(&prior.canonical_keypoints(beta)?);
    let s_gt = flatten_keypoints(&prior.canonical_keypoints(beta_star)?);
    let shape_term = (s_pred - s_gt).norm();
    let j_pred = prior.joint_params(beta)?;
    let j_gt = prior.joint_params(beta_star)?;
    Ok(shape_term + joint_loss(&j_pred, &j_gt, lambda, prior.tree())?)
}

/// Keypoint loss: `‖P̂ − W(S(β*), J(β*), Θ*)‖₂`.
pub fn loss_kp(
    pred: &[Point3<f64>],
    prior: &OmadPrior,
    beta_star: &ShapeParams,
    states_star: &[JointState],
) -> Result<f64> {
    if pred.len() != prior.m() {
        return Err(Error::contract(format!(
            "predicted keypoints ({}) must match prior M ({})",
            pred.len(),
            prior.m()
        )));
    }
    let canonical = prior.canonical_keypoints(beta_star)?;
    let params = prior.joint_params(beta_star)?;
    let gt = deform(prior.tree(), &canonical, &params, states_star)?;
    Ok((flatten_keypoints(pred) - flatten_keypoints(&gt)).norm())
}

/// Joint-state loss L_Θ, summed over joints: free joint contributes
/// `(1 − |q_pred·q_gt|)` plus the RMS of the translation difference;
/// 1-DoF joints contribute the squared state difference.
pub fn loss_joint_state(pred: &[JointState], gt: &[JointState]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "state lists differ in length ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (j, (p, g)) in pred.iter().zip(gt).enumerate() {
        match (p, g) {
            (
                JointState::Free {
                    rotation: qp,
                    translation: tp,
                },
                JointState::Free {
                    rotation: qg,
                    translation: tg,
                },
            ) => {
                let dot = qp.coords.dot(&qg.coords);
                let rms = ((tp - tg).norm_squared() / 3.0).sqrt();
                total += (1.0 - dot.abs()) + rms;
            }
            (JointState::Revolute { angle: a }, JointState::Revolute { angle: b }) => {
                total += (a - b) * (a - b);
            }
            (
                JointState::Prismatic { displacement: a },
                JointState::Prismatic { displacement: b },
            ) => {
                total += (a - b) * (a - b);
            }
            _ => {
                return Err(Error::contract(format!(
                    "joint {j}: state tags do not match"
                )));
            }
        }
    }
    Ok(total)
}
