//! Batched projective-dynamics simulation of cloth and volumetric soft bodies
//! with frictional contact, bilateral grasps and depth rendering.

pub mod assembly;
pub mod bench;
pub mod contact;
pub mod grasp;
pub mod material;
pub mod mesh;
pub mod render;
pub mod scenario;
pub mod scene;
pub mod solver;
pub mod sparse;
