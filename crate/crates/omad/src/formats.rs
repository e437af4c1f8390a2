//! Versioned JSON interchange: priors, training sets, scenes, and fit
//! results. Every document self-describes with `format_version`, rejects
//! unknown fields, and round-trips floats losslessly.

use std::path::Path;

use nalgebra::{DVector, Point3, Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::evalkit::{axis_to_camera, JointAxisLine};
use crate::kinematics::{JointParams, JointSpec, JointState, JointType, KinematicTree};
use crate::learning::{TrainingInstance, TrainingSet};
use crate::model::{JointFunctionWeights, OmadPrior, ShapeBasis, ShapeParams};

/// Current (and only) on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------
// shared pieces

/// First-pass parse: reads only the version, tolerating unknown fields,
/// so that documents from future versions fail with a version error
/// rather than a schema error.
#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
enum JointStateDto {
    /// Rotation stored as [w, x, y, z].
    Free {
        rotation: [f64; 4],
        translation: [f64; 3],
    },
    Revolute {
        angle: f64,
    },
    Prismatic {
        displacement: f64,
    },
}

impl JointStateDto {
    fn from_state(state: &JointState) -> Self {
        match state {
            JointState::Free {
                rotation,
                translation,
            } => JointStateDto::Free {
                rotation: [rotation.w, rotation.i, rotation.j, rotation.k],
                translation: [translation.x, translation.y, translation.z],
            },
            JointState::Revolute { angle } => JointStateDto::Revolute { angle: *angle },
            JointState::Prismatic { displacement } => JointStateDto::Prismatic {
                displacement: *displacement,
            },
        }
    }

    fn into_state(self) -> Result<JointState> {
        match self {
            JointStateDto::Free {
                rotation: [w, x, y, z],
                translation,
            } => {
                let q = Quaternion::new(w, x, y, z);
                if !q.coords.iter().all(|v| v.is_finite()) {
                    return Err(Error::schema("free-joint rotation must be finite"));
                }
                if (q.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::schema(format!(
                        "free-joint rotation must be a unit quaternion (norm {})",
                        q.norm()
                    )));
                }
                Ok(JointState::Free {
                    // Unchecked keeps the stored coordinates bit-exact.
                    rotation: UnitQuaternion::new_unchecked(q),
                    translation: Vector3::from(translation),
                })
            }
            JointStateDto::Revolute { angle } => Ok(JointState::Revolute { angle }),
            JointStateDto::Prismatic { displacement } => {
                Ok(JointState::Prismatic { displacement })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointParamsDto {
    direction: [f64; 3],
    pivot: [f64; 3],
}

impl JointParamsDto {
    fn from_params(p: &JointParams) -> Self {
        JointParamsDto {
            direction: [p.direction.x, p.direction.y, p.direction.z],
            pivot: [p.pivot.x, p.pivot.y, p.pivot.z],
        }
    }

    fn into_params(self) -> JointParams {
        JointParams::new(Vector3::from(self.direction), Vector3::from(self.pivot))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDto {
    #[serde(rename = "type")]
    joint_type: String,
    parent: Option<usize>,
    child: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDto {
    parts: usize,
    joints: Vec<JointDto>,
    keypoint_part: Vec<usize>,
}

fn joint_type_name(jt: JointType) -> &'static str {
    match jt {
        JointType::Free => "free",
        JointType::Revolute => "revolute",
        JointType::Prismatic => "prismatic",
    }
}

fn joint_type_from_name(name: &str) -> Result<JointType> {
    match name {
        "free" => Ok(JointType::Free),
        "revolute" => Ok(JointType::Revolute),
        "prismatic" => Ok(JointType::Prismatic),
        other => Err(Error::schema(format!(
            "unknown joint type '{other}' (expected free, revolute or prismatic)"
        ))),
    }
}

fn tree_to_dto(tree: &KinematicTree) -> TreeDto {
    TreeDto {
        parts: tree.part_count(),
        joints: tree
            .joints()
            .iter()
            .map(|j| JointDto {
                joint_type: joint_type_name(j.joint_type).to_string(),
                parent: j.parent,
                child: j.child,
            })
            .collect(),
        keypoint_part: tree.keypoint_part().to_vec(),
    }
}

fn tree_from_dto(dto: TreeDto) -> Result<KinematicTree> {
    let joints = dto
        .joints
        .into_iter()
        .map(|j| Ok(JointSpec::new(joint_type_from_name(&j.joint_type)?, j.parent, j.child)))
        .collect::<Result<Vec<_>>>()?;
    KinematicTree::new(dto.parts, joints, dto.keypoint_part)
}

fn points_to_rows(points: &[Point3<f64>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn rows_to_points(rows: Vec<[f64; 3]>) -> Vec<Point3<f64>> {
    rows.into_iter()
        .map(|[x, y, z]| Point3::new(x, y, z))
        .collect()
}

// ---------------------------------------------------------------------
// generic load/save

/// Translate serde-json's line/column into a byte offset into `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut remaining = line - 1;
    let mut line_start = 0usize;
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, err: &serde_json::Error) -> Error {
    let offset = byte_offset(text, err.line(), err.column());
    Error::Parse {
        offset,
        message: err.to_string(),
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Parse a versioned document: probe the version first, then parse
/// strictly (unknown fields rejected).
fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let probe: VersionProbe =
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_str(text).map_err(|e| parse_error(text, &e))
}

fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_versioned(&read_file(path)?)
}

fn save_versioned<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::schema(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_file(path, &text)
}

// ---------------------------------------------------------------------
// prior files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GammaDto {
    /// Row-major H×K_b.
    #[serde(rename = "W1")]
    w1: Vec<f64>,
    #[serde(rename = "b1")]
    b1: Vec<f64>,
    /// Row-major 6K₁×H.
    #[serde(rename = "W2")]
    w2: Vec<f64>,
    #[serde(rename = "b2")]
    b2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorMetadataDto {
    mean_beta: Vec<f64>,
    data_diameter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFileDto {
    format_version: u32,
    category_name: String,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K_b")]
    k_b: usize,
    #[serde(rename = "H")]
    hidden: usize,
    tree: TreeDto,
    /// Row-major 3M×K_b.
    basis: Vec<f64>,
    gamma: GammaDto,
    rest_states: Vec<JointStateDto>,
    metadata: PriorMetadataDto,
}

fn matrix_to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn matrix_from_rows(data: &[f64], nrows: usize, ncols: usize, what: &str) -> Result<nalgebra::DMatrix<f64>> {
    if data.len() != nrows * ncols {
        return Err(Error::schema(format!(
            "{what} has {} entries, expected {nrows}×{ncols} = {}",
            data.len(),
            nrows * ncols
        )));
    }
    Ok(nalgebra::DMatrix::from_row_slice(nrows, ncols, data))
}

pub fn save_prior(path: impl AsRef<Path>, prior: &OmadPrior) -> Result<()> {
    let gamma = prior.gamma();
    let dto = PriorFileDto {
        format_version: FORMAT_VERSION,
        category_name: prior.category_name().to_string(),
        m: prior.m(),
        k_b: prior.k_b(),
        hidden: gamma.hidden_width(),
        tree: tree_to_dto(prior.tree()),
        basis: matrix_to_rows(prior.basis().matrix()),
        gamma: GammaDto {
            w1: matrix_to_rows(gamma.w1()),
            b1: gamma.b1().iter().copied().collect(),
            w2: matrix_to_rows(gamma.w2()),
            b2: gamma.b2().iter().copied().collect(),
        },
        rest_states: prior.rest_states().iter().map(JointStateDto::from_state).collect(),
        metadata: PriorMetadataDto {
            mean_beta: prior.mean_beta().iter().copied().collect(),
            data_diameter: prior.data_diameter(),
        },
    };
    save_versioned(path.as_ref(), &dto)
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<OmadPrior> {
    let dto: PriorFileDto = load_versioned(path.as_ref())?;
    let tree = tree_from_dto(dto.tree)?;
    if tree.keypoint_count() != dto.m {
        return Err(Error::schema(format!(
            "M = {} does not match the tree's {} keypoints",
            dto.m,
            tree.keypoint_count()
        )));
    }
    let basis_matrix = matrix_from_rows(&dto.basis, 3 * dto.m, dto.k_b, "basis")?;
    let basis = ShapeBasis::new(basis_matrix)?;
    let k1 = tree.one_dof_count();
    let w1 = matrix_from_rows(&dto.gamma.w1, dto.hidden, dto.k_b, "gamma.W1")?;
    let w2 = matrix_from_rows(&dto.gamma.w2, 6 * k1, dto.hidden, "gamma.W2")?;
    let b1 = DVector::from_vec(dto.gamma.b1);
    let b2 = DVector::from_vec(dto.gamma.b2);
    let gamma = JointFunctionWeights::new(w1, b1, w2, b2)?;
    let rest_states = dto
        .rest_states
        .into_iter()
        .map(JointStateDto::into_state)
        .collect::<Result<Vec<_>>>()?;
    OmadPrior::new(
        tree,
        basis,
        gamma,
        rest_states,
        dto.category_name,
        DVector::from_vec(dto.metadata.mean_beta),
        dto.metadata.data_diameter,
    )
}

// ---------------------------------------------------------------------
// training-set files

/// Generator settings embedded for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenProvenance {
    pub template: String,
    pub keypoints_per_part: usize,
    pub k_b_true: usize,
    pub size_ranges: [[f64; 2]; 3],
    pub n_instances: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDto {
    keypoints: Vec<[f64; 3]>,
    /// Per-joint params, `null` at the free joint.
    joint_params: Vec<Option<JointParamsDto>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSetFileDto {
    format_version: u32,
    tree: TreeDto,
    instances: Vec<InstanceDto>,
    provenance: Option<GenProvenance>,
}

#[derive(Debug)]
pub struct LoadedTrainingSet {
    pub train: TrainingSet,
    pub provenance: Option<GenProvenance>,
}

pub fn save_training_set(
    path: impl AsRef<Path>,
    train: &TrainingSet,
    provenance: Option<&GenProvenance>,
) -> Result<()> {
    let dto = TrainingSetFileDto {
        format_version: FORMAT_VERSION,
        tree: tree_to_dto(train.tree()),
        instances: train
            .instances()
            .iter()
            .map(|inst| InstanceDto {
                keypoints: points_to_rows(&inst.keypoints),
                joint_params: inst
                    .joint_params
                    .iter()
                    .map(|p| p.as_ref().map(JointParamsDto::from_params))
                    .collect(),
            })
            .collect(),
        provenance: provenance.cloned(),
    };
    save_versioned(path.as_ref(), &dto)
}

pub fn load_training_set(path: impl AsRef<Path>) -> Result<LoadedTrainingSet> {
    let dto: TrainingSetFileDto = load_versioned(path.as_ref())?;
    let tree = tree_from_dto(dto.tree)?;
    let instances = dto
        .instances
        .into_iter()
        .map(|inst| TrainingInstance {
            keypoints: rows_to_points(inst.keypoints),
            joint_params: inst
                .joint_params
                .into_iter()
                .map(|p| p.map(JointParamsDto::into_params))
                .collect(),
        })
        .collect();
    Ok(LoadedTrainingSet {
        train: TrainingSet::new(tree, instances)?,
        provenance: dto.provenance,
    })
}

// ---------------------------------------------------------------------
// scene files

/// Scene-generation settings embedded for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneProvenance {
    pub seed: u64,
    pub noise_sigma: f64,
    pub one_dof_ranges: Vec<[f64; 2]>,
    pub translation_range: [f64; 2],
    pub n_scenes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisDto {
    direction: [f64; 3],
    point: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDto {
    instance_id: usize,
    beta_star: Vec<f64>,
    states_star: Vec<JointStateDto>,
    targets_clean: Vec<[f64; 3]>,
    targets_noisy: Vec<[f64; 3]>,
    noise_sigma: f64,
    /// Ground-truth camera-space axes, one per 1-DoF joint in 1-DoF
    /// order, frozen at generation time.
    gt_axes: Vec<AxisDto>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFileDto {
    format_version: u32,
    category_name: String,
    scenes: Vec<SceneDto>,
    provenance: Option<SceneProvenance>,
}

#[derive(Debug)]
pub struct LoadedScenes {
    pub category_name: String,
    pub scenes: Vec<Scene>,
    /// Per scene, per 1-DoF joint (in 1-DoF order): the ground-truth
    /// camera-space axis recorded at generation time.
    pub gt_axes: Vec<Vec<JointAxisLine>>,
    pub provenance: Option<SceneProvenance>,
}

/// Save scenes, freezing each scene's ground-truth camera-space axes
/// (computed through `prior`, the generator's ground truth).
pub fn save_scenes(
    path: impl AsRef<Path>,
    prior: &OmadPrior,
    scenes: &[Scene],
    provenance: Option<&SceneProvenance>,
) -> Result<()> {
    let scene_dtos = scenes
        .iter()
        .map(|scene| {
            let gt_axes = prior
                .tree()
                .one_dof_joints()
                .iter()
                .map(|&j| {
                    let line = axis_to_camera(prior, &scene.beta_star, &scene.states_star, j)?;
                    Ok(AxisDto {
                        direction: [line.direction.x, line.direction.y, line.direction.z],
                        point: [line.point.x, line.point.y, line.point.z],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneDto {
                instance_id: scene.instance_id,
                beta_star: scene.beta_star.iter().copied().collect(),
                states_star: scene.states_star.iter().map(JointStateDto::from_state).collect(),
                targets_clean: points_to_rows(&scene.targets_clean),
                targets_noisy: points_to_rows(&scene.targets_noisy),
                noise_sigma: scene.noise_sigma,
                gt_axes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dto = SceneFileDto {
        format_version: FORMAT_VERSION,
        category_name: prior.category_name().to_string(),
        scenes: scene_dtos,
        provenance: provenance.cloned(),
    };
    save_versioned(path.as_ref(), &dto)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<LoadedScenes> {
    let dto: SceneFileDto = load_versioned(path.as_ref())?;
    let mut scenes = Vec::with_capacity(dto.scenes.len());
    let mut gt_axes = Vec::with_capacity(dto.scenes.len());
    for (i, s) in dto.scenes.into_iter().enumerate() {
        if s.targets_clean.len() != s.targets_noisy.len() {
            return Err(Error::schema(format!(
                "scene {i}: clean and noisy target counts differ ({} vs {})",
                s.targets_clean.len(),
                s.targets_noisy.len()
            )));
        }
        let axes = s
            .gt_axes
            .into_iter()
            .map(|a| {
                JointAxisLine::new(Vector3::from(a.direction), Vector3::from(a.point))
                    .map_err(|e| Error::schema(format!("scene {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let states = s
            .states_star
            .into_iter()
            .map(JointStateDto::into_state)
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene {
            beta_star: DVector::from_vec(s.beta_star),
            states_star: states,
            targets_clean: rows_to_points(s.targets_clean),
            targets_noisy: rows_to_points(s.targets_noisy),
            noise_sigma: s.noise_sigma,
            instance_id: s.instance_id,
        });
        gt_axes.push(axes);
    }
    Ok(LoadedScenes {
        category_name: dto.category_name,
        scenes,
        gt_axes,
        provenance: dto.provenance,
    })
}

// ---------------------------------------------------------------------
// results files

/// One scene's fit outcome as stored on disk. `states` entries are
/// nullable so downstream consumers can represent joints a method failed
/// to produce (charged the missing-joint penalties during evaluation).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFitRecord {
    pub scene_id: usize,
    pub instance_id: usize,
    pub beta: ShapeParams,
    pub states: Vec<Option<JointState>>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultDto {
    scene_id: usize,
    instance_id: usize,
    beta: Vec<f64>,
    states: Vec<Option<JointStateDto>>,
    residual: f64,
    iterations: usize,
    converged: bool,
    restarts_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultsFileDto {
    format_version: u32,
    category_name: String,
    used_noisy: bool,
    results: Vec<ResultDto>,
}

#[derive(Debug)]
pub struct LoadedResults {
    pub category_name: String,
    pub used_noisy: bool,
    pub records: Vec<SceneFitRecord>,
}

pub fn save_results(
    path: impl AsRef<Path>,
    category_name: &str,
    used_noisy: bool,
    records: &[SceneFitRecord],
) -> Result<()> {
    let dto = ResultsFileDto {
        format_version: FORMAT_VERSION,
        category_name: category_name.to_string(),
        used_noisy,
        results: records
            .iter()
            .map(|r| ResultDto {
                scene_id: r.scene_id,
                instance_id: r.instance_id,
                beta: r.beta.iter().copied().collect(),
                states: r
                    .states
                    .iter()
                    .map(|s| s.as_ref().map(JointStateDto::from_state))
                    .collect(),
                residual: r.residual,
                iterations: r.iterations,
                converged: r.converged,
                restarts_used: r.restarts_used,
            })
            .collect(),
    };
    save_versioned(path.as_ref(), &dto)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<LoadedResults> {
    let dto: ResultsFileDto = load_versioned(path.as_ref())?;
    let records = dto
        .results
        .into_iter()
        .map(|r| {
            let states = r
                .states
                .into_iter()
                .map(|s| s.map(JointStateDto::into_state).transpose())
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneFitRecord {
                scene_id: r.scene_id,
                instance_id: r.instance_id,
                beta: DVector::from_vec(r.beta),
                states,
                residual: r.residual,
                iterations: r.iterations,
                converged: r.converged,
                restarts_used: r.restarts_used,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedResults {
        category_name: dto.category_name,
        used_noisy: dto.used_noisy,
        records,
    })
}
