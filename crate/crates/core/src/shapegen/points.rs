//! Correspondence point models and the shared template connectivity.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mesh::{cross, dot, sub, SurfaceMesh, Vec3};
use super::superformula::{fibonacci_parameters, supershape_point, SupershapeParams};
use crate::error::{Error, Result};

/// Ordered correspondence points; index i marks the same (θᵢ, φᵢ) location
/// on every shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointModel {
    pub points: Vec<Vec3>,
}

impl PointModel {
    /// Evaluates the supershape at the fixed Fibonacci parameter locations.
    pub fn on_supershape(p: &SupershapeParams, count: usize) -> Result<Self> {
        let points = fibonacci_parameters(count)
            .into_iter()
            .map(|(t, f)| supershape_point(t, f, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "flat point vector of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `.particles` text: one "x y z" line per point.
    pub fn to_particles(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn write_particles(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_particles()).map_err(|e| Error::io(path, e))
    }

    pub fn read_particles(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, format!("line {}: expected x y z", n + 1)));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        Ok(Self { points })
    }
}

/// Triangulation of the Fibonacci lattice on the unit sphere (its convex
/// hull), used as fixed connectivity for meshes built from point models.
pub fn template_mesh(count: usize) -> Result<SurfaceMesh> {
    if count < 4 {
        return Err(Error::Config(format!("template needs >= 4 points, got {count}")));
    }
    let vertices: Vec<Vec3> = fibonacci_parameters(count)
        .into_iter()
        .map(|(t, f)| [t.cos() * f.cos(), t.sin() * f.cos(), f.sin()])
        .collect();
    let faces = convex_hull_faces(&vertices);
    let mesh = SurfaceMesh { vertices, faces };
    // a triangulated sphere has F = 2V - 4
    if mesh.faces.len() != 2 * count - 4 {
        return Err(Error::Mesh(format!(
            "template hull has {} faces, expected {}",
            mesh.faces.len(),
            2 * count - 4
        )));
    }
    mesh.check_closed()?;
    Ok(mesh)
}

// Brute force over triples; fine for the few hundred points a PDM carries.
// Points all lie on the unit sphere, so a triple is a hull face iff every
// other point is strictly behind its plane.
fn convex_hull_faces(v: &[Vec3]) -> Vec<[usize; 3]> {
    let n = v.len();
    let mut faces = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let normal = cross(sub(v[j], v[i]), sub(v[k], v[i]));
                let mut sign = 0.0;
                let mut ok = true;
                for (q, p) in v.iter().enumerate() {
                    if q == i || q == j || q == k {
                        continue;
                    }
                    let d = dot(normal, sub(*p, v[i]));
                    if d.abs() < 1e-12 {
                        ok = false;
                        break;
                    }
                    if sign == 0.0 {
                        sign = d.signum();
                    } else if d.signum() != sign {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    // all others on the `sign` side; orient the normal away from them
                    if sign > 0.0 {
                        faces.push([i, k, j]);
                    } else {
                        faces.push([i, j, k]);
                    }
                }
            }
        }
    }
    faces
}
