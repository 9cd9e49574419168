//! Virtual end-effectors that attach vertices with bilateral constraints.

use log::warn;
use thiserror::Error;

use crate::mesh::Vec3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraspError {
    #[error("end-effector '{0}' already exists")]
    DuplicateName(String),
    #[error("unknown end-effector '{0}'")]
    UnknownEffector(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndEffector {
    pub name: String,
    pub pose: Vec3,
    /// Box half-extents used for the containment test.
    pub size: Vec3,
    pub closed: bool,
    /// Grasped vertices in ascending order.
    pub grasp_set: Vec<usize>,
    /// Offset of each grasped vertex from the pose at grasp time.
    pub offsets: Vec<Vec3>,
}

impl EndEffector {
    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.pose).abs().iter().zip(self.size.iter()).all(|(d, s)| *d <= *s)
    }
}

/// Attachment of one vertex to an effector target.
#[derive(Debug, Clone, PartialEq)]
pub struct BilateralConstraint {
    pub effector: usize,
    pub vertex: usize,
    pub target: Vec3,
    pub lambda: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectorRegistry {
    pub effectors: Vec<EndEffector>,
    /// Attach at the grasp-time offset; when false every grasped vertex is
    /// pulled onto the effector pose itself.
    pub use_offsets: bool,
    pub warnings: Vec<String>,
}

impl Default for EffectorRegistry {
    fn default() -> Self {
        Self { effectors: Vec::new(), use_offsets: true, warnings: Vec::new() }
    }
}

impl EffectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, GraspError> {
        self.effectors.iter().position(|e| e.name == name).ok_or_else(|| GraspError::UnknownEffector(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&EndEffector, GraspError> {
        Ok(&self.effectors[self.index_of(name)?])
    }

    pub fn add_ee(&mut self, name: &str, pose: Vec3, size: Vec3) -> Result<&EndEffector, GraspError> {
        if self.effectors.iter().any(|e| e.name == name) {
            return Err(GraspError::DuplicateName(name.to_string()));
        }
        self.effectors.push(EndEffector {
            name: name.to_string(),
            pose,
            size,
            closed: false,
            grasp_set: Vec::new(),
            offsets: Vec::new(),
        });
        Ok(self.effectors.last().unwrap())
    }

    /// Closes or opens an effector. Closing an open effector collects every
    /// vertex inside its box that no other effector holds; closing an already
    /// closed effector keeps its grasp set. Returns the grasp-set size.
    pub fn grasp_ee(&mut self, name: &str, close: bool, positions: &[Vec3]) -> Result<usize, GraspError> {
        let idx = self.index_of(name)?;
        if !close {
            let e = &mut self.effectors[idx];
            e.closed = false;
            e.grasp_set.clear();
            e.offsets.clear();
            return Ok(0);
        }
        if self.effectors[idx].closed {
            return Ok(self.effectors[idx].grasp_set.len());
        }
        let mut set = Vec::new();
        let mut offsets = Vec::new();
        let pose = self.effectors[idx].pose;
        for (v, p) in positions.iter().enumerate() {
            if !self.effectors[idx].contains(p) {
                continue;
            }
            if let Some(other) = self.effectors.iter().find(|e| e.grasp_set.contains(&v)) {
                let msg = format!("vertex {v} already held by '{}', skipped for '{name}'", other.name);
                warn!("{msg}");
                self.warnings.push(msg);
                continue;
            }
            set.push(v);
            offsets.push(p - pose);
        }
        let e = &mut self.effectors[idx];
        e.closed = true;
        e.grasp_set = set;
        e.offsets = offsets;
        Ok(e.grasp_set.len())
    }

    pub fn move_ee(&mut self, name: &str, pose: Vec3) -> Result<(), GraspError> {
        let idx = self.index_of(name)?;
        self.effectors[idx].pose = pose;
        Ok(())
    }

    /// Mask of vertices held by any effector.
    pub fn grasped_mask(&self, n_vertices: usize) -> Vec<bool> {
        let mut mask = vec![false; n_vertices];
        for e in &self.effectors {
            for &v in &e.grasp_set {
                mask[v] = true;
            }
        }
        mask
    }

    /// One attachment per grasped vertex, ordered by effector then vertex.
    pub fn emit_bilateral_rows(&self) -> Vec<BilateralConstraint> {
        let mut out = Vec::new();
        for (i, e) in self.effectors.iter().enumerate() {
            if !e.closed {
                continue;
            }
            for (&v, off) in e.grasp_set.iter().zip(&e.offsets) {
                let target = if self.use_offsets { e.pose + off } else { e.pose };
                out.push(BilateralConstraint { effector: i, vertex: v, target, lambda: [0.0; 3] });
            }
        }
        out
    }
}
