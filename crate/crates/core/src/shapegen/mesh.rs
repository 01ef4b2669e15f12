//! Triangle meshes: construction on the (θ, φ) grid, OFF I/O, and the
//! normalization into voxel space.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::superformula::{supershape_point, SupershapeParams};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Affine map x ↦ scale·(x − source_center) + target_center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTransform {
    pub source_center: Vec3,
    pub scale: f64,
    pub target_center: Vec3,
}

impl GridTransform {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(scale(sub(p, self.source_center), self.scale), self.target_center)
    }
}

/// Fraction of the smallest grid extent the normalized shape spans.
pub const GRID_FILL: f64 = 0.7;

impl SurfaceMesh {
    /// Builds the closed mesh of a supershape on a regular (θ, φ) grid with
    /// `n_theta` longitudes and `n_phi` interior latitude rings; the poles are
    /// single vertices joined by triangle fans.
    pub fn supershape(p: &SupershapeParams, n_theta: usize, n_phi: usize) -> Result<Self> {
        use std::f64::consts::{FRAC_PI_2, PI, TAU};
        if n_theta < 8 || n_phi < 8 {
            return Err(Error::Config(format!(
                "grid resolution {n_theta}x{n_phi} below 8 in some direction"
            )));
        }
        p.validate()?;
        let mut vertices = Vec::with_capacity(n_theta * n_phi + 2);
        for j in 0..n_phi {
            let phi = -FRAC_PI_2 + (j + 1) as f64 * PI / (n_phi + 1) as f64;
            for i in 0..n_theta {
                let theta = -PI + i as f64 * TAU / n_theta as f64;
                vertices.push(supershape_point(theta, phi, p)?);
            }
        }
        let south = vertices.len();
        let r_south = super::superformula::superformula_radius(-FRAC_PI_2, p)?;
        vertices.push([0.0, 0.0, -r_south]);
        let north = vertices.len();
        let r_north = super::superformula::superformula_radius(FRAC_PI_2, p)?;
        vertices.push([0.0, 0.0, r_north]);

        let idx = |i: usize, j: usize| j * n_theta + (i % n_theta);
        let mut faces = Vec::with_capacity(2 * n_theta * n_phi);
        for j in 0..n_phi - 1 {
            for i in 0..n_theta {
                let a = idx(i, j);
                let b = idx(i + 1, j);
                let c = idx(i + 1, j + 1);
                let d = idx(i, j + 1);
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
        for i in 0..n_theta {
            faces.push([south, idx(i + 1, 0), idx(i, 0)]);
            faces.push([north, idx(i, n_phi - 1), idx(i + 1, n_phi - 1)]);
        }
        let mesh = Self { vertices, faces };
        mesh.validate_indices()?;
        Ok(mesh)
    }

    /// UV sphere of the given radius centered at the origin.
    pub fn sphere(radius: f64, n_theta: usize, n_phi: usize) -> Result<Self> {
        let mut m = Self::supershape(&SupershapeParams::sphere(), n_theta, n_phi)?;
        for v in &mut m.vertices {
            *v = scale(*v, radius);
        }
        Ok(m)
    }

    pub fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        for (k, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Mesh(format!(
                    "face {k} references vertex out of range (n = {n})"
                )));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn check_closed(&self) -> Result<()> {
        self.validate_indices()?;
        if self.faces.is_empty() {
            return Err(Error::Mesh("mesh has no faces".into()));
        }
        let mut edges: HashMap<(usize, usize), u32> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, c)) = edges.iter().find(|(_, &c)| c != 2) {
            return Err(Error::Mesh(format!(
                "mesh is not closed: edge {e:?} used by {c} faces"
            )));
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for outward-oriented faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Volumetric center of mass of the enclosed solid.
    pub fn centroid(&self) -> Result<Vec3> {
        let mut acc = [0.0; 3];
        let mut vol = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let v = dot(a, cross(b, c)) / 6.0;
            vol += v;
            acc = add(acc, scale(add(add(a, b), c), v / 4.0));
        }
        if vol.abs() < 1e-12 {
            return Err(Error::Mesh("enclosed volume is zero".into()));
        }
        Ok(scale(acc, 1.0 / vol))
    }

    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    pub fn transformed(&self, t: &GridTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| t.apply(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Transform that puts the center of mass at the grid center and scales
    /// the shape so its largest excursion from the center spans
    /// [`GRID_FILL`] of the smallest grid extent. Voxel (i, j, k) has its
    /// center at coordinates (i, j, k).
    pub fn grid_transform(&self, dims: [usize; 3]) -> Result<GridTransform> {
        let c = self.centroid()?;
        let reach = self
            .vertices
            .iter()
            .flat_map(|v| (0..3).map(move |k| (v[k] - c[k]).abs()))
            .fold(0.0f64, f64::max);
        if reach <= 0.0 {
            return Err(Error::Mesh("mesh has zero extent".into()));
        }
        let min_dim = *dims.iter().min().expect("three dims") as f64;
        Ok(GridTransform {
            source_center: c,
            scale: 0.5 * GRID_FILL * min_dim / reach,
            target_center: [
                (dims[0] as f64 - 1.0) / 2.0,
                (dims[1] as f64 - 1.0) / 2.0,
                (dims[2] as f64 - 1.0) / 2.0,
            ],
        })
    }

    pub fn to_off(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "OFF");
        let _ = writeln!(s, "{} {} 0", self.vertices.len(), self.faces.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn write_off(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_off()).map_err(|e| Error::io(path, e))
    }

    pub fn read_off(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_off(&text).map_err(|msg| Error::format(path, msg))
    }

    pub fn parse_off(text: &str) -> std::result::Result<Self, String> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("OFF") {
            return Err("missing OFF header".into());
        }
        let mut num = |what: &str| -> std::result::Result<&str, String> {
            tokens.next().ok_or_else(|| format!("unexpected end reading {what}"))
        };
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
        let nv = parse_usize(num("vertex count")?)?;
        let nf = parse_usize(num("face count")?)?;
        let _ne = num("edge count")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            vertices.push([
                parse_f64(num("vertex")?)?,
                parse_f64(num("vertex")?)?,
                parse_f64(num("vertex")?)?,
            ]);
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let k = parse_usize(num("face size")?)?;
            if k != 3 {
                return Err(format!("only triangle faces supported, got {k}-gon"));
            }
            faces.push([
                parse_usize(num("face")?)?,
                parse_usize(num("face")?)?,
                parse_usize(num("face")?)?,
            ]);
        }
        let mesh = Self { vertices, faces };
        mesh.validate_indices().map_err(|e| e.to_string())?;
        Ok(mesh)
    }
}

/// Closest distance from `p` to triangle (a, b, c).
pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let q = closest_point_on_triangle(p, a, b, c);
    norm(sub(p, q))
}

// Region-based closest point (Ericson, Real-Time Collision Detection 5.1.5).
fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}
