//! Synthetic category and scene generation: ground-truth priors built
//! from box-corner part templates, seeded instance sampling, and
//! camera-space scenes with controllable keypoint noise.

use nalgebra::{DMatrix, DVector, Point3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::kinematics::{deform, JointSpec, JointState, JointType, KinematicTree};
use crate::learning::{TrainingInstance, TrainingSet};
use crate::model::{
    flatten_keypoints, joint_apply, shape_apply, JointFunctionWeights, OmadPrior, ShapeBasis,
    ShapeParams,
};

/// Hidden-layer bias of generated joint functions. Every hidden unit
/// stays active while `‖β‖∞ < ACTIVE_BIAS`, making the generated joint
/// function exactly affine over the sampling envelope.
const ACTIVE_BIAS: f64 = 10.0;

/// Built-in articulated-category templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// 2 parts, 1 revolute joint — laptop-like clamshell.
    Hinge2,
    /// 3 parts, 2 revolute joints — eyeglasses-like frame with temples.
    Hinge3,
    /// 2 parts, 1 revolute joint — dishwasher-like bottom-hinged door.
    Door2,
    /// 2 parts, 1 revolute joint — scissors-like center pivot.
    Pivot2,
    /// 4 parts, 3 prismatic joints — cabinet with sliding drawers.
    Slider4,
}

impl Template {
    pub fn all() -> [Template; 5] {
        [
            Template::Hinge2,
            Template::Hinge3,
            Template::Door2,
            Template::Pivot2,
            Template::Slider4,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Template::Hinge2 => "hinge2",
            Template::Hinge3 => "hinge3",
            Template::Door2 => "door2",
            Template::Pivot2 => "pivot2",
            Template::Slider4 => "slider4",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Template::all()
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown template '{name}' (expected one of hinge2, hinge3, door2, pivot2, slider4)"
                ))
            })
    }
}

/// A generated category: template choice plus generative knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub template: Template,
    /// Keypoints sampled per part (box corners, cycling with a radial
    /// factor past 8). At least 4 so every part is observed in general
    /// position.
    pub keypoints_per_part: usize,
    /// Generative basis rank.
    pub k_b_true: usize,
    /// Relative per-dimension size interval (x, y, z); instance shapes
    /// vary within roughly these scale factors.
    pub size_ranges: [(f64, f64); 3],
}

impl CategorySpec {
    pub fn new(template: Template) -> Self {
        CategorySpec {
            template,
            keypoints_per_part: 4,
            k_b_true: 3,
            size_ranges: [(0.8, 1.2); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints_per_part < 4 {
            return Err(Error::contract(
                "keypoints_per_part must be at least 4 (parts must be observed in general position)",
            ));
        }
        let def = self.template.def();
        let m = def.parts.len() * self.keypoints_per_part;
        if self.k_b_true == 0 {
            return Err(Error::contract("generative rank must be at least 1"));
        }
        if self.k_b_true > 3 * m {
            return Err(Error::contract(format!(
                "generative rank {} exceeds keypoint dimension {}",
                self.k_b_true,
                3 * m
            )));
        }
        for (d, &(lo, hi)) in self.size_ranges.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || lo >= hi {
                return Err(Error::contract(format!(
                    "size range for dimension {d} must satisfy 0 < lo < hi (got {lo}..{hi})"
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic observation: ground-truth parameters plus clean and
/// noisy camera-space keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub beta_star: ShapeParams,
    pub states_star: Vec<JointState>,
    pub targets_clean: Vec<Point3<f64>>,
    pub targets_noisy: Vec<Point3<f64>>,
    pub noise_sigma: f64,
    pub instance_id: usize,
}

/// Sampling ranges for scene generation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRanges {
    /// (lo, hi) per 1-DoF joint in 1-DoF joint order; radians for
    /// revolute joints, length units for prismatic ones. A degenerate
    /// range (lo == hi) pins the state.
    pub one_dof: Vec<(f64, f64)>,
    /// Per-coordinate uniform range of the free-joint translation.
    pub translation: (f64, f64),
}

impl StateRanges {
    /// Revolute joints open 15°–165°, prismatic joints slide up to a
    /// quarter of the data diameter, translations stay within half a
    /// diameter per coordinate.
    pub fn defaults(tree: &KinematicTree, diameter: f64) -> Self {
        let one_dof = tree
            .one_dof_joints()
            .iter()
            .map(|&j| match tree.joints()[j].joint_type {
                JointType::Revolute => (15f64.to_radians(), 165f64.to_radians()),
                JointType::Prismatic => (0.0, 0.25 * diameter),
                JointType::Free => unreachable!("1-DoF joints only"),
            })
            .collect();
        StateRanges {
            one_dof,
            translation: (-0.5 * diameter, 0.5 * diameter),
        }
    }

    pub fn validate(&self, tree: &KinematicTree) -> Result<()> {
        if self.one_dof.len() != tree.one_dof_count() {
            return Err(Error::contract(format!(
                "state ranges cover {} joints, tree has {} 1-DoF joints",
                self.one_dof.len(),
                tree.one_dof_count()
            )));
        }
        for (slot, (&(lo, hi), &j)) in self
            .one_dof
            .iter()
            .zip(tree.one_dof_joints())
            .enumerate()
        {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::contract(format!(
                    "state range {slot} must satisfy lo ≤ hi (got {lo}..{hi})"
                )));
            }
            if tree.joints()[j].joint_type == JointType::Revolute
                && (lo <= -std::f64::consts::PI || hi >= std::f64::consts::PI)
            {
                return Err(Error::contract(format!(
                    "revolute range {slot} must lie within (−π, π) (got {lo}..{hi})"
                )));
            }
        }
        let (lo, hi) = self.translation;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::contract(format!(
                "translation range must satisfy lo ≤ hi (got {lo}..{hi})"
            )));
        }
        Ok(())
    }
}

/// An axis-aligned box part of a template.
struct PartBox {
    center: Vector3<f64>,
    half: Vector3<f64>,
}

/// A 1-DoF joint of a template: tree edge plus nominal axis geometry.
struct OneDofDef {
    joint_type: JointType,
    parent: usize,
    child: usize,
    axis: Vector3<f64>,
    line_point: Vector3<f64>,
}

struct TemplateDef {
    parts: Vec<PartBox>,
    joints: Vec<OneDofDef>,
}

impl Template {
    fn def(&self) -> TemplateDef {
        let part = |c: [f64; 3], h: [f64; 3]| PartBox {
            center: Vector3::new(c[0], c[1], c[2]),
            half: Vector3::new(h[0], h[1], h[2]),
        };
        let rev = |parent: usize, child: usize, axis: Vector3<f64>, p: [f64; 3]| OneDofDef {
            joint_type: JointType::Revolute,
            parent,
            child,
            axis,
            line_point: Vector3::new(p[0], p[1], p[2]),
        };
        let pri = |parent: usize, child: usize, axis: Vector3<f64>, p: [f64; 3]| OneDofDef {
            joint_type: JointType::Prismatic,
            parent,
            child,
            axis,
            line_point: Vector3::new(p[0], p[1], p[2]),
        };
        match self {
            Template::Hinge2 => TemplateDef {
                parts: vec![
                    part([0.0, 0.0, -0.03], [0.30, 0.20, 0.03]),
                    part([0.0, 0.17, 0.20], [0.30, 0.03, 0.20]),
                ],
                joints: vec![rev(0, 1, Vector3::x(), [0.0, 0.17, 0.0])],
            },
            Template::Hinge3 => TemplateDef {
                parts: vec![
                    part([0.0, -0.10, 0.0], [0.35, 0.02, 0.10]),
                    part([-0.33, 0.10, 0.02], [0.02, 0.18, 0.02]),
                    part([0.33, 0.10, 0.02], [0.02, 0.18, 0.02]),
                ],
                joints: vec![
                    rev(0, 1, Vector3::z(), [-0.33, -0.08, 0.02]),
                    rev(0, 2, Vector3::z(), [0.33, -0.08, 0.02]),
                ],
            },
            Template::Door2 => TemplateDef {
                parts: vec![
                    part([0.0, 0.02, 0.05], [0.30, 0.26, 0.30]),
                    part([0.0, -0.27, 0.02], [0.28, 0.02, 0.26]),
                ],
                joints: vec![rev(0, 1, Vector3::x(), [0.0, -0.27, -0.24])],
            },
            Template::Pivot2 => TemplateDef {
                parts: vec![
                    part([-0.08, 0.03, 0.006], [0.30, 0.03, 0.006]),
                    part([0.08, -0.03, -0.006], [0.30, 0.03, 0.006]),
                ],
                joints: vec![rev(0, 1, Vector3::z(), [0.0, 0.0, 0.0])],
            },
            Template::Slider4 => TemplateDef {
                parts: vec![
                    part([0.0, -0.02, 0.0], [0.30, 0.25, 0.45]),
                    part([0.0, 0.04, 0.30], [0.26, 0.21, 0.12]),
                    part([0.0, 0.04, 0.0], [0.26, 0.21, 0.12]),
                    part([0.0, 0.04, -0.30], [0.26, 0.21, 0.12]),
                ],
                joints: vec![
                    pri(0, 1, Vector3::y(), [0.0, 0.04, 0.30]),
                    pri(0, 2, Vector3::y(), [0.0, 0.04, 0.0]),
                    pri(0, 3, Vector3::y(), [0.0, 0.04, -0.30]),
                ],
            },
        }
    }
}

/// Box corners in parity order: the first four form a tetrahedron (never
/// coplanar); past eight points the corners repeat at a growing radial
/// factor.
const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
];

fn box_keypoints(center: &Vector3<f64>, half: &Vector3<f64>, count: usize) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|i| {
            let s = CORNER_SIGNS[i % 8];
            let f = 1.0 + 0.15 * (i / 8) as f64;
            Vector3::new(
                center.x + f * half.x * s[0],
                center.y + f * half.y * s[1],
                center.z + f * half.z * s[2],
            )
        })
        .collect()
}

fn template_tree(def: &TemplateDef, keypoints_per_part: usize) -> Result<KinematicTree> {
    let mut joints = vec![JointSpec::new(JointType::Free, None, 0)];
    for jd in &def.joints {
        joints.push(JointSpec::new(jd.joint_type, Some(jd.parent), jd.child));
    }
    let keypoint_part: Vec<usize> = (0..def.parts.len())
        .flat_map(|p| std::iter::repeat(p).take(keypoints_per_part))
        .collect();
    KinematicTree::new(def.parts.len(), joints, keypoint_part)
}

/// Smoothly varying structural pattern for variation column `k`, part
/// `p`, dimension `d` (fixed, deterministic).
fn scale_pattern(k: usize, p: usize, d: usize) -> f64 {
    (1.3 * k as f64 + 0.7 * p as f64 + 2.1 * d as f64 + 0.4).sin()
}

fn shift_pattern(k: usize, p: usize, d: usize) -> f64 {
    (0.9 * k as f64 + 1.7 * p as f64 + 1.1 * d as f64 + 0.8).cos()
}

/// Generate a ground-truth category: an exactly-representable prior (the
/// joint function is affine over the sampling envelope) plus a seeded
/// training set of `n_instances` canonical instances.
///
/// The basis columns are built from the template's box corners — column
/// one is the zero-centered base shape, later columns are zero-centered
/// per-part scale/offset variations — then orthonormalized. Pivots track
/// the two child-part keypoints nearest the nominal hinge line, so the
/// joint geometry is a fixed linear function of β.
pub fn gen_category(
    spec: &CategorySpec,
    n_instances: usize,
    seed: u64,
) -> Result<(OmadPrior, TrainingSet)> {
    spec.validate()?;
    if n_instances < spec.k_b_true {
        return Err(Error::InsufficientData {
            needed: spec.k_b_true,
            got: n_instances,
        });
    }
    let def = spec.template.def();
    let kpp = spec.keypoints_per_part;
    let tree = template_tree(&def, kpp)?;
    let m = tree.keypoint_count();
    let k = spec.k_b_true;

    // Base keypoints, uncentered template coordinates.
    let base_raw: Vec<Vector3<f64>> = def
        .parts
        .iter()
        .flat_map(|p| box_keypoints(&p.center, &p.half, kpp))
        .collect();

    // Raw columns: base first, then exact linear variation directions
    // (box keypoints are linear in centers and half-extents).
    let amp = Vector3::new(
        (spec.size_ranges[0].1 - spec.size_ranges[0].0) / 2.0,
        (spec.size_ranges[1].1 - spec.size_ranges[1].0) / 2.0,
        (spec.size_ranges[2].1 - spec.size_ranges[2].0) / 2.0,
    );
    let mut raw = DMatrix::zeros(3 * m, k);
    for (i, p) in base_raw.iter().enumerate() {
        raw.fixed_view_mut::<3, 1>(3 * i, 0).copy_from(p);
    }
    for col in 1..k {
        let mut i = 0usize;
        for (pid, part) in def.parts.iter().enumerate() {
            let half_mean = (part.half.x + part.half.y + part.half.z) / 3.0;
            let dhalf = Vector3::new(
                amp.x * part.half.x * scale_pattern(col, pid, 0),
                amp.y * part.half.y * scale_pattern(col, pid, 1),
                amp.z * part.half.z * scale_pattern(col, pid, 2),
            );
            let dcenter = Vector3::new(
                0.25 * amp.x * half_mean * shift_pattern(col, pid, 0),
                0.25 * amp.y * half_mean * shift_pattern(col, pid, 1),
                0.25 * amp.z * half_mean * shift_pattern(col, pid, 2),
            );
            for kp in box_keypoints(&dcenter, &dhalf, kpp) {
                raw.fixed_view_mut::<3, 1>(3 * i, col).copy_from(&kp);
                i += 1;
            }
        }
        debug_assert_eq!(i, m);
    }

    // Zero-center every column (canonical space is zero-centered).
    for col in 0..k {
        let mut centroid = Vector3::zeros();
        for i in 0..m {
            centroid += raw.fixed_view::<3, 1>(3 * i, col).into_owned();
        }
        centroid /= m as f64;
        for i in 0..m {
            let mut block = raw.fixed_view_mut::<3, 1>(3 * i, col);
            block -= centroid;
        }
    }
    let centered_base = raw.column(0).into_owned();

    // Orthonormalize; a vanishing R diagonal means the requested rank is
    // not realizable from this template's variation family.
    let qr = raw.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let scale_ref = raw.column(0).norm().max(1e-6);
    for col in 0..k {
        let d = r[(col, col)];
        if d.abs() < 1e-10 * scale_ref {
            return Err(Error::contract(format!(
                "generative rank {k} is not realizable for template {} (variation column {col} is degenerate)",
                spec.template.name()
            )));
        }
        if d < 0.0 {
            let mut c = q.column_mut(col);
            c.neg_mut();
        }
    }
    let basis = ShapeBasis::new(q.clone())?;

    // Coefficients of the base shape in the orthonormal basis.
    let beta0: DVector<f64> = q.transpose() * &centered_base;

    // Pivot anchors: for each 1-DoF joint, the two child keypoints
    // nearest the nominal axis line of the base template.
    let anchors: Vec<(usize, usize)> = def
        .joints
        .iter()
        .map(|jd| {
            let mut scored: Vec<(f64, usize)> = (0..m)
                .filter(|&i| tree.keypoint_part()[i] == jd.child)
                .map(|i| {
                    let rel = base_raw[i] - jd.line_point;
                    let perp = rel - rel.dot(&jd.axis) * jd.axis;
                    (perp.norm(), i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            (scored[0].1, scored[1].1)
        })
        .collect();

    // Joint function: exactly affine in β while every hidden unit stays
    // active. hidden = [β + C; C − β], and ± weight pairs make the
    // constant parts cancel: w·hidden = aᵀβ for W2 rows (a/2, −a/2).
    let k1 = tree.one_dof_count();
    let mut w1 = DMatrix::zeros(2 * k, k);
    for i in 0..k {
        w1[(i, i)] = 1.0;
        w1[(k + i, i)] = -1.0;
    }
    let b1 = DVector::from_element(2 * k, ACTIVE_BIAS);
    let mut w2 = DMatrix::zeros(6 * k1, 2 * k);
    let mut b2 = DVector::zeros(6 * k1);
    for (slot, jd) in def.joints.iter().enumerate() {
        // Direction: constant (axis directions are rest-aligned).
        for d in 0..3 {
            b2[6 * slot + d] = jd.axis[d];
        }
        // Pivot: mean of the two anchor keypoints, linear in β.
        let (i0, i1) = anchors[slot];
        for row in 0..3 {
            for c in 0..k {
                let a = 0.5 * (q[(3 * i0 + row, c)] + q[(3 * i1 + row, c)]);
                w2[(6 * slot + 3 + row, c)] = a / 2.0;
                w2[(6 * slot + 3 + row, k + c)] = -a / 2.0;
            }
        }
    }
    let gamma = JointFunctionWeights::new(w1, b1, w2, b2)?;

    // Instance β: base coefficients plus a seeded isotropic spread.
    let spread = 0.2 * beta0.norm() / (k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let betas: Vec<ShapeParams> = (0..n_instances)
        .map(|_| {
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            &beta0 + spread * z
        })
        .collect();
    for (n, beta) in betas.iter().enumerate() {
        if beta.amax() >= 0.8 * ACTIVE_BIAS {
            return Err(Error::contract(format!(
                "instance {n} leaves the affine envelope of the generated joint function (‖β‖∞ = {})",
                beta.amax()
            )));
        }
    }

    let instances: Vec<TrainingInstance> = betas
        .iter()
        .map(|beta| {
            let keypoints = shape_apply(&basis, beta)?;
            let joint_params = joint_apply(&gamma, beta, &tree)?;
            Ok(TrainingInstance {
                keypoints,
                joint_params,
            })
        })
        .collect::<Result<_>>()?;
    let train = TrainingSet::new(tree.clone(), instances)?;

    let mut mean_beta = DVector::zeros(k);
    for beta in &betas {
        mean_beta += beta;
    }
    mean_beta /= n_instances as f64;

    let prior = OmadPrior::new(
        tree.clone(),
        basis,
        gamma,
        tree.rest_states(),
        spec.template.name().to_string(),
        mean_beta,
        train.diameter(),
    )?;
    Ok((prior, train))
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let q = Quaternion::new(w, x, y, z);
        if q.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

/// Generate `n_scenes` camera-space observations from a category. Each
/// scene draws — on its own seed stream, so scene `i` is reproducible in
/// isolation — an instance, a uniform free-joint pose, per-joint states
/// uniform in `ranges`, and isotropic Gaussian keypoint noise.
pub fn gen_scenes(
    prior: &OmadPrior,
    instances: &TrainingSet,
    n_scenes: usize,
    noise_sigma: f64,
    ranges: &StateRanges,
    seed: u64,
) -> Result<Vec<Scene>> {
    ranges.validate(prior.tree())?;
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::contract(format!(
            "noise sigma must be finite and nonnegative (got {noise_sigma})"
        )));
    }
    if instances.is_empty() {
        return Err(Error::contract(
            "at least one instance is required to sample scenes",
        ));
    }
    if instances.tree().keypoint_count() != prior.m() {
        return Err(Error::contract(format!(
            "instance keypoint count {} does not match prior ({})",
            instances.tree().keypoint_count(),
            prior.m()
        )));
    }
    // β of each instance by projection onto the (orthonormal) basis.
    let basis_t = prior.basis().matrix().transpose();
    let betas: Vec<ShapeParams> = instances
        .instances()
        .iter()
        .map(|inst| &basis_t * flatten_keypoints(&inst.keypoints))
        .collect();
    let tree = prior.tree();
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::contract(e.to_string()))?)
    } else {
        None
    };

    let mut scenes = Vec::with_capacity(n_scenes);
    for idx in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64 + 1);
        let instance_id = rng.random_range(0..betas.len());
        let beta = betas[instance_id].clone();

        let rotation = sample_rotation(&mut rng);
        let translation = Vector3::new(
            sample_range(&mut rng, ranges.translation.0, ranges.translation.1),
            sample_range(&mut rng, ranges.translation.0, ranges.translation.1),
            sample_range(&mut rng, ranges.translation.0, ranges.translation.1),
        );
        let mut states = tree.rest_states();
        states[tree.reference_joint(tree.root_part())] = JointState::Free {
            rotation,
            translation,
        };
        for (slot, &j) in tree.one_dof_joints().iter().enumerate() {
            let (lo, hi) = ranges.one_dof[slot];
            let value = sample_range(&mut rng, lo, hi);
            states[j] = match tree.joints()[j].joint_type {
                JointType::Revolute => JointState::Revolute { angle: value },
                JointType::Prismatic => JointState::Prismatic {
                    displacement: value,
                },
                JointType::Free => unreachable!("1-DoF joints only"),
            };
        }

        let canonical = prior.canonical_keypoints(&beta)?;
        let params = prior.joint_params(&beta)?;
        let targets_clean = deform(tree, &canonical, &params, &states)?;
        let targets_noisy = match &noise {
            Some(normal) => targets_clean
                .iter()
                .map(|p| {
                    Point3::new(
                        p.x + rng.sample(normal),
                        p.y + rng.sample(normal),
                        p.z + rng.sample(normal),
                    )
                })
                .collect(),
            None => targets_clean.clone(),
        };
        scenes.push(Scene {
            beta_star: beta,
            states_star: states,
            targets_clean,
            targets_noisy,
            noise_sigma,
            instance_id,
        });
    }
    Ok(scenes)
}
