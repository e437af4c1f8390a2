//! OMAD: a parametric representation of articulated objects.
//!
//! An articulated object is modeled by a low-rank shape function
//! (canonical keypoints as a linear combination of basis shapes), a
//! learned joint function (a small ReLU network mapping shape parameters
//! to per-joint axis geometry), and a kinematic deformation that poses
//! the canonical keypoints in camera space. The crate provides:
//!
//! - [`kinematics`]: joint taxonomy, kinematic tree, per-joint rigid
//!   transforms, and the deformation function;
//! - [`model`]: the shape basis, the joint-function network, and the
//!   frozen category prior;
//! - [`learning`]: prior learning — truncated-SVD shape basis and
//!   gradient-trained joint function;
//! - [`estimator`]: Levenberg–Marquardt recovery of shape parameters and
//!   joint states from observed keypoints, with multi-start;
//! - [`evalkit`]: joint-state/axis metrics and retrieval mAP;
//! - [`datagen`]: synthetic categories and scenes for end-to-end tests;
//! - [`formats`]: versioned JSON interchange for all of the above.

pub mod datagen;
pub mod error;
pub mod estimator;
pub mod evalkit;
pub mod formats;
pub mod kinematics;
pub mod learning;
pub mod model;

pub use error::{Error, Result};

pub use kinematics::{
    all_part_transforms, deform, joint_transform, part_transform, JointParams, JointSpec,
    JointState, JointType, KinematicTree,
};

pub use model::{
    flatten_keypoints, joint_apply, shape_apply, unflatten_keypoints, JointFunctionWeights,
    OmadPrior, ShapeBasis, ShapeParams,
};

pub use learning::{
    fit_joint_function, joint_loss, learn_basis, separation_loss, JointFitOutput, LearnConfig,
    LossRecord, TrainingInstance, TrainingSet,
};

pub use estimator::{
    energy, energy_jacobian, fit, keypoint_vote, loss_beta, loss_joint_state, loss_kp,
    EnergyJacobian, FitProblem, FitResult, SolverConfig,
};

pub use evalkit::{
    axis_to_camera, joint_axis_angle_error, joint_axis_distance_error, joint_state_error,
    retrieval_map, rotate_about_line, JointAxisLine, RetrievalRecord,
};

pub use datagen::{gen_category, gen_scenes, CategorySpec, Scene, StateRanges, Template};
