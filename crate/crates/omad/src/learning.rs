//! Prior learning: shape basis by truncated singular value decomposition,
//! joint function by full-batch gradient descent on the joint loss.

use nalgebra::{DMatrix, DVector, Point3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{JointParams, JointType, KinematicTree};
use crate::model::{mlp_forward, JointFunctionWeights, ShapeBasis, ShapeParams};

/// One canonical-space training example: aligned keypoints plus the
/// ground-truth axis geometry of every 1-DoF joint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub keypoints: Vec<Point3<f64>>,
    /// Per-joint ground truth, `None` exactly at the free joint.
    pub joint_params: Vec<Option<JointParams>>,
}

/// A set of aligned canonical instances sharing one kinematic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    tree: KinematicTree,
    instances: Vec<TrainingInstance>,
}

/// Centroid tolerance for canonical instances (zero-centered by
/// construction of the canonical space).
const CENTER_TOL: f64 = 1e-8;

impl TrainingSet {
    pub fn new(tree: KinematicTree, instances: Vec<TrainingInstance>) -> Result<Self> {
        let m = tree.keypoint_count();
        for (n, inst) in instances.iter().enumerate() {
            if inst.keypoints.len() != m {
                return Err(Error::contract(format!(
                    "instance {n} has {} keypoints, tree expects {m}",
                    inst.keypoints.len()
                )));
            }
            let centroid = inst
                .keypoints
                .iter()
                .fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords)
                / m as f64;
            if centroid.norm() > CENTER_TOL {
                return Err(Error::contract(format!(
                    "instance {n} is not zero-centered (centroid norm {})",
                    centroid.norm()
                )));
            }
            if inst.joint_params.len() != tree.joint_count() {
                return Err(Error::contract(format!(
                    "instance {n} carries {} joint params, tree has {} joints",
                    inst.joint_params.len(),
                    tree.joint_count()
                )));
            }
            for (j, (params, joint)) in
                inst.joint_params.iter().zip(tree.joints()).enumerate()
            {
                match (params, joint.joint_type.is_one_dof()) {
                    (Some(p), true) => {
                        let norm = p.direction.norm();
                        if (norm - 1.0).abs() > 1e-9 {
                            return Err(Error::contract(format!(
                                "instance {n} joint {j} direction is not unit norm ({norm})"
                            )));
                        }
                    }
                    (None, false) => {}
                    (Some(_), false) => {
                        return Err(Error::contract(format!(
                            "instance {n} carries params for the free joint {j}"
                        )));
                    }
                    (None, true) => {
                        return Err(Error::contract(format!(
                            "instance {n} is missing params for 1-DoF joint {j}"
                        )));
                    }
                }
            }
        }
        Ok(TrainingSet { tree, instances })
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn instances(&self) -> &[TrainingInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Largest pairwise keypoint distance over all instances.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for inst in &self.instances {
            for i in 0..inst.keypoints.len() {
                for j in (i + 1)..inst.keypoints.len() {
                    d = d.max((inst.keypoints[i] - inst.keypoints[j]).norm());
                }
            }
        }
        d
    }
}

/// Hyperparameters for prior learning.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    /// Shape basis count K_b.
    pub k_b: usize,
    /// Hidden width of the joint-function MLP.
    pub hidden: usize,
    /// Pivot weight λ in the joint loss.
    pub lambda: f64,
    /// β L2 regularization weight (constant during Γ fitting; diagnostic).
    pub reg_weight: f64,
    /// Separation-loss margin in length units.
    pub sep_margin: f64,
    /// Base learning rate.
    pub lr: f64,
    /// Training epochs (full-batch steps).
    pub epochs: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl LearnConfig {
    /// Defaults: hidden 64, λ 1.0, reg 1e-4, margin 0.05 × data diameter,
    /// lr 1e-2, 2000 epochs.
    pub fn defaults(train: &TrainingSet, k_b: usize, seed: u64) -> Self {
        LearnConfig {
            k_b,
            hidden: 64,
            lambda: 1.0,
            reg_weight: 1e-4,
            sep_margin: 0.05 * train.diameter().max(f64::MIN_POSITIVE),
            lr: 1e-2,
            epochs: 2000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_b == 0 {
            return Err(Error::contract("K_b must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::contract("hidden width must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(self.sep_margin > 0.0) {
            return Err(Error::contract("separation margin must be positive"));
        }
        if self.lambda < 0.0 || self.reg_weight < 0.0 {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Learn a rank-`k_b` shape basis: stack the instances as a 3M×N matrix,
/// take the top-`k_b` singular triplets, return `B = U_K` and per-instance
/// coefficients `β_n = Σ_K V_Kᵀ eₙ`. The reconstruction `B·[β]` is optimal
/// in Frobenius norm among all rank-`k_b` factorizations (Eckart–Young).
///
/// Sign convention (SVD leaves each column's sign free): each basis column
/// is flipped so that the largest-magnitude coefficient in its β row
/// (ties → lowest instance index) is positive.
pub fn learn_basis(
    train: &TrainingSet,
    k_b: usize,
) -> Result<(ShapeBasis, Vec<ShapeParams>)> {
    let n = train.len();
    let m3 = 3 * train.tree().keypoint_count();
    if k_b == 0 {
        return Err(Error::contract("K_b must be at least 1"));
    }
    if k_b > m3 {
        return Err(Error::contract(format!(
            "K_b {k_b} exceeds keypoint dimension {m3}"
        )));
    }
    if n < k_b {
        return Err(Error::InsufficientData {
            needed: k_b,
            got: n,
        });
    }

    let x = DMatrix::from_fn(m3, n, |r, c| {
        let p = &train.instances()[c].keypoints[r / 3];
        p[r % 3]
    });
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;

    // Sort singular triplets by descending value (defensive; the library
    // already orders them, but the contract here must not depend on it).
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());

    let mut b = DMatrix::zeros(m3, k_b);
    let mut betas = vec![DVector::zeros(k_b); n];
    for (k, &src) in order.iter().take(k_b).enumerate() {
        b.column_mut(k).copy_from(&u.column(src));
        for (inst, beta) in betas.iter_mut().enumerate() {
            beta[k] = sigma[src] * v_t[(src, inst)];
        }
    }

    for k in 0..k_b {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (inst, beta) in betas.iter().enumerate() {
            if beta[k].abs() > best_abs {
                best_abs = beta[k].abs();
                best = inst;
            }
        }
        if best_abs > 0.0 && betas[best][k] < 0.0 {
            b.column_mut(k).neg_mut();
            for beta in &mut betas {
                beta[k] = -beta[k];
            }
        }
    }

    Ok((ShapeBasis::new(b)?, betas))
}

/// The joint loss `L_joint = L_μ + λ·L_q`: `L_μ` is the mean over 1-DoF
/// joints of `1 − cos∠(u_pred, u_gt)`, `L_q` the mean over revolute
/// joints of `‖q_pred − q_gt‖₂`. Means over empty sets are zero.
pub fn joint_loss(
    pred: &[Option<JointParams>],
    gt: &[Option<JointParams>],
    lambda: f64,
    tree: &KinematicTree,
) -> Result<f64> {
    if pred.len() != tree.joint_count() || gt.len() != tree.joint_count() {
        return Err(Error::contract(format!(
            "joint params must cover all {} joints (got {} and {})",
            tree.joint_count(),
            pred.len(),
            gt.len()
        )));
    }
    let mut dir_sum = 0.0;
    let mut dir_count = 0usize;
    let mut piv_sum = 0.0;
    let mut piv_count = 0usize;
    for (j, joint) in tree.joints().iter().enumerate() {
        if !joint.joint_type.is_one_dof() {
            continue;
        }
        let (p, g) = match (&pred[j], &gt[j]) {
            (Some(p), Some(g)) => (p, g),
            _ => {
                return Err(Error::contract(format!(
                    "1-DoF joint {j} is missing params in pred or gt"
                )))
            }
        };
        let cosine = p.direction.dot(&g.direction)
            / (p.direction.norm() * g.direction.norm());
        dir_sum += 1.0 - cosine;
        dir_count += 1;
        if joint.joint_type == JointType::Revolute {
            piv_sum += (p.pivot - g.pivot).norm();
            piv_count += 1;
        }
    }
    let l_mu = if dir_count > 0 {
        dir_sum / dir_count as f64
    } else {
        0.0
    };
    let l_q = if piv_count > 0 {
        piv_sum / piv_count as f64
    } else {
        0.0
    };
    Ok(l_mu + lambda * l_q)
}

/// Squared-hinge keypoint separation: mean over unordered pairs of
/// `max(0, margin − ‖p_i − p_j‖)²`.
pub fn separation_loss(keypoints: &[Point3<f64>], margin: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(Error::contract("separation margin must be positive"));
    }
    let m = keypoints.len();
    if m < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let gap = margin - (keypoints[i] - keypoints[j]).norm();
            if gap > 0.0 {
                sum += gap * gap;
            }
        }
    }
    Ok(sum / (m * (m - 1) / 2) as f64)
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_mu: f64,
    pub l_q: f64,
    /// `l_mu + λ·l_q + reg_weight · mean‖β‖²` (the optimized objective
    /// plus the constant β regularizer, reported for diagnostics).
    pub total: f64,
}

/// Fitted joint function plus its training history (one record per epoch
/// plus the initial state, so `history.len() == epochs + 1`).
#[derive(Debug, Clone)]
pub struct JointFitOutput {
    pub gamma: JointFunctionWeights,
    pub history: Vec<LossRecord>,
}

impl JointFitOutput {
    /// Final `L_joint = L_μ + λ·L_q` (without the constant regularizer).
    pub fn final_joint_loss(&self, lambda: f64) -> f64 {
        let last = self.history.last().expect("history is never empty");
        last.l_mu + lambda * last.l_q
    }
}

/// Guard against division by a vanishing norm in loss gradients.
const NORM_EPS: f64 = 1e-12;

struct BatchGrad {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    l_mu: f64,
    l_q: f64,
}

/// Forward + backward pass over the whole training set. Returns the mean
/// losses and parameter gradients of `L_μ + λ·L_q`.
fn joint_batch(
    gamma: &JointFunctionWeights,
    train: &TrainingSet,
    betas: &[ShapeParams],
    lambda: f64,
) -> BatchGrad {
    let tree = train.tree();
    let n = train.len();
    let one_dof = tree.one_dof_joints();
    let n_rev = one_dof
        .iter()
        .filter(|&&j| tree.joints()[j].joint_type == JointType::Revolute)
        .count();
    let w_dir = if one_dof.is_empty() {
        0.0
    } else {
        1.0 / (n as f64 * one_dof.len() as f64)
    };
    let w_piv = if n_rev == 0 {
        0.0
    } else {
        lambda / (n as f64 * n_rev as f64)
    };

    let mut grad = BatchGrad {
        w1: DMatrix::zeros(gamma.hidden_width(), gamma.input_dim()),
        b1: DVector::zeros(gamma.hidden_width()),
        w2: DMatrix::zeros(gamma.w2().nrows(), gamma.hidden_width()),
        b2: DVector::zeros(gamma.w2().nrows()),
        l_mu: 0.0,
        l_q: 0.0,
    };

    for (inst, beta) in train.instances().iter().zip(betas) {
        let fwd = mlp_forward(gamma, beta);
        let mut g_raw = DVector::zeros(fwd.raw.len());
        for (slot, &j) in one_dof.iter().enumerate() {
            let target = inst.joint_params[j].as_ref().expect("validated 1-DoF");
            let raw_dir = fwd.raw.fixed_rows::<3>(6 * slot).into_owned();
            let norm = raw_dir.norm().max(NORM_EPS);
            let unit = raw_dir / norm;
            let cosine = unit.dot(&target.direction);
            grad.l_mu += (1.0 - cosine) / (n as f64 * one_dof.len() as f64);
            // d(1 − û·g)/d(raw) = ((û·g)·û − g)/‖raw‖.
            let g_dir = (cosine * unit - target.direction) / norm;
            for d in 0..3 {
                g_raw[6 * slot + d] += w_dir * g_dir[d];
            }
            if tree.joints()[j].joint_type == JointType::Revolute {
                let pivot = fwd.raw.fixed_rows::<3>(6 * slot + 3).into_owned();
                let diff = pivot - target.pivot;
                let dist = diff.norm();
                grad.l_q += dist / (n as f64 * n_rev as f64);
                if dist > NORM_EPS {
                    let g_piv = diff / dist;
                    for d in 0..3 {
                        g_raw[6 * slot + 3 + d] += w_piv * g_piv[d];
                    }
                }
            }
        }
        // Backprop through raw = W2·h + b2, h = relu(W1·β + b1).
        grad.b2 += &g_raw;
        grad.w2 += &g_raw * fwd.hidden.transpose();
        let mut g_pre = gamma.w2().transpose() * &g_raw;
        for (h, &pre) in fwd.pre.iter().enumerate() {
            if pre <= 0.0 {
                g_pre[h] = 0.0;
            }
        }
        grad.b1 += &g_pre;
        grad.w1 += &g_pre * beta.transpose();
    }
    grad
}

/// Fit the joint function to the training set's ground-truth axis
/// geometry by full-batch gradient descent with momentum 0.9 from a
/// seeded uniform `±1/√fan_in` initialization. The step size follows a
/// cosine schedule from `cfg.lr` down to zero: the pivot term of the
/// joint loss is a plain norm, so a constant step stalls in a
/// step-size-sized limit cycle around the optimum instead of converging.
pub fn fit_joint_function(
    train: &TrainingSet,
    betas: &[ShapeParams],
    cfg: &LearnConfig,
) -> Result<JointFitOutput> {
    cfg.validate()?;
    if betas.len() != train.len() {
        return Err(Error::contract(format!(
            "betas ({}) must align with training instances ({})",
            betas.len(),
            train.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let k_b = betas[0].len();
    if betas.iter().any(|b| b.len() != k_b) {
        return Err(Error::contract("betas must share one length"));
    }

    let tree = train.tree();
    let out_dim = 6 * tree.one_dof_count();
    let h = cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s1 = 1.0 / (k_b as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    // Sampling order is part of the determinism contract: W1, b1, W2, b2,
    // each filled column-major.
    let mut w1 = DMatrix::from_fn(h, k_b, |_, _| rng.random_range(-s1..s1));
    let mut b1 = DVector::from_fn(h, |_, _| rng.random_range(-s1..s1));
    let mut w2 = DMatrix::from_fn(out_dim, h, |_, _| rng.random_range(-s2..s2));
    let mut b2 = DVector::from_fn(out_dim, |_, _| rng.random_range(-s2..s2));

    let reg_const = cfg.reg_weight
        * betas.iter().map(|b| b.norm_squared()).sum::<f64>()
        / betas.len() as f64;

    let mut v_w1 = DMatrix::zeros(h, k_b);
    let mut v_b1 = DVector::zeros(h);
    let mut v_w2 = DMatrix::zeros(out_dim, h);
    let mut v_b2 = DVector::zeros(out_dim);
    const MOMENTUM: f64 = 0.9;

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let gamma = JointFunctionWeights::new(w1.clone(), b1.clone(), w2.clone(), b2.clone())
            .map_err(|_| Error::Divergence { epoch })?;
        let grad = joint_batch(&gamma, train, betas, cfg.lambda);
        let total = grad.l_mu + cfg.lambda * grad.l_q + reg_const;
        if !total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(LossRecord {
            epoch,
            l_mu: grad.l_mu,
            l_q: grad.l_q,
            total,
        });
        if epoch == cfg.epochs {
            return Ok(JointFitOutput { gamma, history });
        }
        let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        v_w1 = MOMENTUM * v_w1 - lr * grad.w1;
        v_b1 = MOMENTUM * v_b1 - lr * grad.b1;
        v_w2 = MOMENTUM * v_w2 - lr * grad.w2;
        v_b2 = MOMENTUM * v_b2 - lr * grad.b2;
        w1 += &v_w1;
        b1 += &v_b1;
        w2 += &v_w2;
        b2 += &v_b2;
    }
    unreachable!("loop returns at the final epoch")
}
