//! Inside/outside voxelization of closed triangle meshes.
//!
//! Rays are cast along the first axis through each (j, k) column of voxel
//! centers and crossings counted by parity. A ray that grazes an edge or
//! vertex is ambiguous under parity; voxels on such a column are classified
//! with the generalized winding number instead.

use super::mesh::{cross, dot, norm, sub, SurfaceMesh, Vec3};
use super::volume::Volume;
use crate::error::{Error, Result};

const EDGE_EPS: f64 = 1e-9;

/// Binary occupancy of `mesh` (already in voxel coordinates) on a grid of
/// `dims`. A voxel is 1 iff its center lies inside the closed surface.
pub fn voxelize(mesh: &SurfaceMesh, dims: [usize; 3]) -> Result<Volume> {
    mesh.check_closed()?;
    let vol = mesh.signed_volume();
    if vol.abs() < 1e-9 {
        return Err(Error::Mesh(format!("mesh encloses no volume ({vol:e})")));
    }
    check_fits(mesh, dims)?;

    let [nx, ny, nz] = dims;
    let cols = ny * nz;
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); cols];
    let mut ambiguous = vec![false; cols];

    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let (ylo, yhi) = span(a[1], b[1], c[1], ny);
        let (zlo, zhi) = span(a[2], b[2], c[2], nz);
        // twice the signed area projected onto the (y, z) plane
        let area = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
        let edge_scale = EDGE_EPS * (1.0 + area.abs());
        for j in ylo..yhi {
            for k in zlo..zhi {
                let (y, z) = (j as f64, k as f64);
                let w0 = edge(b, c, y, z);
                let w1 = edge(c, a, y, z);
                let w2 = edge(a, b, y, z);
                let col = j * nz + k;
                let near = w0.abs().min(w1.abs()).min(w2.abs()) < edge_scale;
                let touches = (w0 > -edge_scale && w1 > -edge_scale && w2 > -edge_scale)
                    || (w0 < edge_scale && w1 < edge_scale && w2 < edge_scale);
                if near {
                    if touches {
                        ambiguous[col] = true;
                    }
                    continue;
                }
                let inside =
                    (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
                if inside {
                    let s = w0 + w1 + w2;
                    let x = (w0 * a[0] + w1 * b[0] + w2 * c[0]) / s;
                    crossings[col].push(x);
                }
            }
        }
    }

    let mut out = Volume::zeros(dims);
    for j in 0..ny {
        for k in 0..nz {
            let col = j * nz + k;
            if ambiguous[col] {
                for i in 0..nx {
                    let p = [i as f64, j as f64, k as f64];
                    if winding_number(mesh, p).abs() > 0.5 {
                        let idx = out.index(i, j, k);
                        out.data[idx] = 1.0;
                    }
                }
                continue;
            }
            let xs = &mut crossings[col];
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            let mut passed = 0;
            for i in 0..nx {
                let x = i as f64;
                while passed < xs.len() && xs[passed] < x {
                    passed += 1;
                }
                if passed % 2 == 1 {
                    let idx = out.index(i, j, k);
                    out.data[idx] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Generalized winding number of `mesh` about `p`: sum of signed solid
/// angles over 4π. ±1 inside a closed surface, 0 outside.
pub fn winding_number(mesh: &SurfaceMesh, p: Vec3) -> f64 {
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let (a, b, c) = (sub(a, p), sub(b, p), sub(c, p));
        let (la, lb, lc) = (norm(a), norm(b), norm(c));
        let num = dot(a, cross(b, c));
        let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

fn edge(p: Vec3, q: Vec3, y: f64, z: f64) -> f64 {
    (q[1] - p[1]) * (z - p[2]) - (q[2] - p[2]) * (y - p[1])
}

fn span(a: f64, b: f64, c: f64, n: usize) -> (usize, usize) {
    let lo = a.min(b).min(c).ceil().max(0.0);
    let hi = a.max(b).max(c).floor();
    if hi < 0.0 || lo > hi {
        return (0, 0);
    }
    (lo as usize, ((hi as usize) + 1).min(n))
}

fn check_fits(mesh: &SurfaceMesh, dims: [usize; 3]) -> Result<()> {
    for v in &mesh.vertices {
        for k in 0..3 {
            if v[k] < -0.5 || v[k] > dims[k] as f64 - 0.5 {
                return Err(Error::Mesh(format!(
                    "vertex {v:?} lies outside the {dims:?} grid; normalize first"
                )));
            }
        }
    }
    Ok(())
}
