//! Rigid-body kinematics and dynamics of revolute serial chains.

mod dynamics;
mod kinematics;
mod model;

pub use dynamics::{
    bias_forces, forward_dynamics, forward_dynamics_derivatives, gravity_torques, inverse_dynamics, kinetic_energy,
    load_torque, mass_matrix, potential_energy, DerivativeMode, DynamicsDerivatives, JointState, PointLoad,
};
pub use kinematics::{forward_kinematics, point_jacobian, BodyPoint, FrameCache};
pub use model::{Joint, JointLimits, Link, RobotModel, MODEL_FORMAT_VERSION};
