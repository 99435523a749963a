//! Triangle meshes with per-vertex normals and texture coordinates, Wavefront OBJ I/O,
//! and a few procedural generators used by the synthetic scenes.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug)]
pub struct MeshLoadOptions {
    /// Reject files without `vt` records.
    pub require_uvs: bool,
}

impl Default for MeshLoadOptions {
    fn default() -> Self {
        MeshLoadOptions { require_uvs: true }
    }
}

impl TriangleMesh {
    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn triangle_positions(&self, tri: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[tri];
        [self.positions[a as usize], self.positions[b as usize], self.positions[c as usize]]
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        for &p in &self.positions {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.normals.len() != n || self.uvs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "mesh attribute counts differ: {} positions, {} normals, {} uvs",
                n,
                self.normals.len(),
                self.uvs.len()
            )));
        }
        for (i, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidArgument(format!("triangle {i} references a missing vertex")));
            }
        }
        for (i, nrm) in self.normals.iter().enumerate() {
            if (nrm.length() - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("normal {i} is not unit length")));
            }
        }
        if self.uvs.iter().any(|uv| !uv[0].is_finite() || !uv[1].is_finite()) {
            return Err(Error::InvalidArgument("mesh has non-finite uvs".into()));
        }
        Ok(())
    }

    /// Area-weighted vertex normals, shared between vertices that occupy the same position
    /// so UV seams do not produce shading creases.
    pub fn compute_normals(&mut self) {
        let mut by_position: HashMap<[u64; 3], Vec3> = HashMap::new();
        let key = |p: Vec3| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|v| self.positions[v as usize]);
            // Cross product length is twice the area, so this is area weighting.
            let n = (b - a).cross(c - a);
            for p in [a, b, c] {
                *by_position.entry(key(p)).or_insert(Vec3::ZERO) += n;
            }
        }
        self.normals = self
            .positions
            .iter()
            .map(|&p| {
                let n = by_position.get(&key(p)).copied().unwrap_or(Vec3::ZERO);
                if n.length() > 0.0 { n.normalized() } else { Vec3::Y }
            })
            .collect();
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
        }
        for uv in &self.uvs {
            let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
        }
        for n in &self.normals {
            let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            let _ = writeln!(s, "f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}");
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    load_mesh_with(path, MeshLoadOptions::default())
}

pub fn load_mesh_with(path: &Path, options: MeshLoadOptions) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path, options)
}

pub fn parse_obj(text: &str, path: &Path, options: MeshLoadOptions) -> Result<TriangleMesh> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

    let mut positions = Vec::new();
    let mut texcoords = Vec::new();
    let mut normals = Vec::new();
    // (position, texcoord, normal) index triples per face corner, 0-based, with None for absent.
    let mut faces: Vec<[(usize, Option<usize>, Option<usize>); 3]> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let tag = fields.next().unwrap_or("");
        let floats = |fields: std::str::SplitWhitespace<'_>, want: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = fields
                .take(want)
                .map(|f| f.parse::<f64>().map_err(|_| parse_err(line, format!("bad number '{f}'"))))
                .collect::<Result<_>>()?;
            if vals.len() < want.min(2) {
                return Err(parse_err(line, format!("expected {want} numbers")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let v = floats(fields, 3)?;
                if v.len() < 3 {
                    return Err(parse_err(line, "vertex needs three coordinates".into()));
                }
                positions.push(Vec3::new(v[0], v[1], v[2]));
            }
            "vt" => {
                let v = floats(fields, 2)?;
                texcoords.push([v[0], v[1]]);
            }
            "vn" => {
                let v = floats(fields, 3)?;
                if v.len() < 3 {
                    return Err(parse_err(line, "normal needs three coordinates".into()));
                }
                normals.push(Vec3::new(v[0], v[1], v[2]));
            }
            "f" => {
                let corners: Vec<_> = fields
                    .map(|f| parse_corner(f, positions.len(), texcoords.len(), normals.len()))
                    .collect::<std::result::Result<_, String>>()
                    .map_err(|m| parse_err(line, m))?;
                if corners.len() < 3 {
                    return Err(parse_err(line, "face needs at least three vertices".into()));
                }
                for k in 1..corners.len() - 1 {
                    faces.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            // Groups, materials and smoothing directives carry nothing we use.
            _ => {}
        }
    }

    let has_uvs = faces.iter().all(|f| f.iter().all(|c| c.1.is_some())) && !faces.is_empty();
    if options.require_uvs && !has_uvs {
        return Err(Error::MissingUvs(path.to_path_buf()));
    }
    let has_normals = faces.iter().all(|f| f.iter().all(|c| c.2.is_some()));

    let mut mesh = TriangleMesh::default();
    let mut remap: HashMap<(usize, Option<usize>, Option<usize>), u32> = HashMap::new();
    for face in &faces {
        let mut tri = [0u32; 3];
        for (slot, &corner) in tri.iter_mut().zip(face.iter()) {
            *slot = *remap.entry(corner).or_insert_with(|| {
                mesh.positions.push(positions[corner.0]);
                mesh.uvs.push(corner.1.map(|t| texcoords[t]).unwrap_or([0.0, 0.0]));
                mesh.normals.push(corner.2.map(|n| normals[n].normalized()).unwrap_or(Vec3::ZERO));
                (mesh.positions.len() - 1) as u32
            });
        }
        mesh.triangles.push(tri);
    }
    if !has_normals {
        mesh.compute_normals();
    }
    Ok(mesh)
}

fn parse_corner(
    field: &str,
    npos: usize,
    ntex: usize,
    nnorm: usize,
) -> std::result::Result<(usize, Option<usize>, Option<usize>), String> {
    let resolve = |s: &str, count: usize| -> std::result::Result<usize, String> {
        let i: i64 = s.parse().map_err(|_| format!("bad index '{s}'"))?;
        let idx = if i < 0 { count as i64 + i } else { i - 1 };
        if idx < 0 || idx as usize >= count {
            return Err(format!("index {i} out of range"));
        }
        Ok(idx as usize)
    };
    let mut parts = field.split('/');
    let p = resolve(parts.next().unwrap_or(""), npos)?;
    let t = match parts.next() {
        Some("") | None => None,
        Some(s) => Some(resolve(s, ntex)?),
    };
    let n = match parts.next() {
        Some("") | None => None,
        Some(s) => Some(resolve(s, nnorm)?),
    };
    Ok((p, t, n))
}

/// Latitude-longitude sphere. `u` follows longitude and `v` runs from the north pole (0)
/// to the south pole (1); the seam column is duplicated so UVs stay in [0,1].
pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    displaced_sphere(rings, segments, |_, _| radius)
}

/// Sphere with a smooth radial displacement `radius(theta, phi)`; normals come from geometry.
pub fn displaced_sphere(rings: usize, segments: usize, radius: impl Fn(f64, f64) -> f64) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    for i in 0..=rings {
        let v = i as f64 / rings as f64;
        let theta = v * PI;
        for j in 0..=segments {
            let u = j as f64 / segments as f64;
            let phi = (u - 0.5) * 2.0 * PI;
            let dir = Vec3::new(theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos());
            mesh.positions.push(dir * radius(theta, phi));
            mesh.uvs.push([u, v]);
            mesh.normals.push(dir);
        }
    }
    let stride = (segments + 1) as u32;
    for i in 0..rings as u32 {
        for j in 0..segments as u32 {
            let a = i * stride + j;
            let b = a + stride;
            if i != 0 {
                mesh.triangles.push([a, a + 1, b]);
            }
            if i + 1 != rings as u32 {
                mesh.triangles.push([a + 1, b + 1, b]);
            }
        }
    }
    let pole_north = 0..=segments;
    let pole_south = rings * (segments + 1)..(rings + 1) * (segments + 1);
    mesh.compute_normals();
    // Pole vertices are duplicated along the seam; give them the exact axis normal.
    for k in pole_north {
        mesh.normals[k] = Vec3::Y;
    }
    for k in pole_south {
        mesh.normals[k] = -Vec3::Y;
    }
    mesh
}

/// Axis-aligned cube with half extent `h`. Faces tile a 3x2 atlas in UV space.
pub fn cube(h: f64) -> TriangleMesh {
    let faces: [(Vec3, Vec3, Vec3); 6] = [
        (Vec3::X, Vec3::new(0.0, 0.0, -1.0), Vec3::Y),
        (-Vec3::X, Vec3::Z, Vec3::Y),
        (Vec3::Y, Vec3::X, Vec3::new(0.0, 0.0, -1.0)),
        (-Vec3::Y, Vec3::X, Vec3::Z),
        (Vec3::Z, Vec3::X, Vec3::Y),
        (-Vec3::Z, -Vec3::X, Vec3::Y),
    ];
    let mut mesh = TriangleMesh::default();
    let inset = 0.01;
    for (f, (n, right, up)) in faces.iter().enumerate() {
        let (tile_x, tile_y) = ((f % 3) as f64, (f / 3) as f64);
        let base = mesh.positions.len() as u32;
        for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            mesh.positions.push((*n + *right * sx + *up * sy) * h);
            mesh.normals.push(*n);
            let lu = inset + (1.0 - 2.0 * inset) * (sx + 1.0) * 0.5;
            let lv = inset + (1.0 - 2.0 * inset) * (1.0 - sy) * 0.5;
            mesh.uvs.push([(tile_x + lu) / 3.0, (tile_y + lv) / 2.0]);
        }
        mesh.triangles.push([base, base + 1, base + 2]);
        mesh.triangles.push([base, base + 2, base + 3]);
    }
    mesh
}

/// Square in the y = 0 plane facing +y, spanning [-h, h] in x and z.
pub fn ground_plane(h: f64) -> TriangleMesh {
    TriangleMesh {
        positions: vec![
            Vec3::new(-h, 0.0, -h),
            Vec3::new(-h, 0.0, h),
            Vec3::new(h, 0.0, h),
            Vec3::new(h, 0.0, -h),
        ],
        normals: vec![Vec3::Y; 4],
        uvs: vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
    }
}

/// Subdivided icosahedron projected onto the unit sphere, with spherical UVs and analytic
/// normals. Triangles straddling the longitude seam share vertices, so UVs wrap across them.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalized());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in tris {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    let uvs = verts
        .iter()
        .map(|d| {
            let u = d.x.atan2(-d.z) / (2.0 * PI) + 0.5;
            let v = d.y.clamp(-1.0, 1.0).acos() / PI;
            [u, v]
        })
        .collect();
    TriangleMesh { normals: verts.clone(), positions: verts, uvs, triangles: tris }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_OBJ: &str = "\
v -1 -1 -1\nv 1 -1 -1\nv 1 1 -1\nv -1 1 -1\nv -1 -1 1\nv 1 -1 1\nv 1 1 1\nv -1 1 1
vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1
vn 0 0 -1\nvn 0 0 1\nvn 0 -1 0\nvn 0 1 0\nvn -1 0 0\nvn 1 0 0
f 1/1/1 4/4/1 3/3/1 2/2/1
f 5/1/2 6/2/2 7/3/2 8/4/2
f 1/1/3 2/2/3 6/3/3 5/4/3
f 4/1/4 8/2/4 7/3/4 3/4/4
f 1/1/5 5/2/5 8/3/5 4/4/5
f 2/1/6 3/2/6 7/3/6 6/4/6
";

    #[test]
    fn unit_cube_obj() {
        let mesh = parse_obj(CUBE_OBJ, Path::new("cube.obj"), MeshLoadOptions::default()).unwrap();
        assert_eq!(mesh.triangle_count(), 12);
        mesh.validate().unwrap();
        for n in &mesh.normals {
            let axis_aligned = [n.x.abs(), n.y.abs(), n.z.abs()].iter().filter(|&&c| c == 1.0).count() == 1;
            assert!(axis_aligned, "{n:?}");
        }
    }

    #[test]
    fn missing_uvs_is_an_error() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        let err = parse_obj(text, Path::new("t.obj"), MeshLoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingUvs(_)));
    }

    #[test]
    fn bad_index_is_parse_error() {
        let text = "v 0 0 0\nvt 0 0\nf 1/1 2/1 3/1\n";
        let err = parse_obj(text, Path::new("t.obj"), MeshLoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn negative_indices_and_quads() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf -4/-1 -3/-1 -2/-1 -1/-1\n";
        let mesh = parse_obj(text, Path::new("q.obj"), MeshLoadOptions::default()).unwrap();
        assert_eq!(mesh.triangle_count(), 2);
        assert!((mesh.normals[0] - Vec3::Z).length() < 1e-12);
    }

    #[test]
    fn non_manifold_input_is_accepted() {
        // Three triangles sharing one edge.
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 -1 0\nv 0 0 1\nvt 0 0\nf 1/1 2/1 3/1\nf 1/1 2/1 4/1\nf 1/1 2/1 5/1\n";
        let mesh = parse_obj(text, Path::new("nm.obj"), MeshLoadOptions::default()).unwrap();
        assert_eq!(mesh.triangle_count(), 3);
    }

    #[test]
    fn generators_are_valid() {
        for mesh in [uv_sphere(1.0, 16, 32), cube(0.5), ground_plane(2.0), icosphere(2)] {
            mesh.validate().unwrap();
            assert!(mesh.uvs.iter().all(|uv| (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1])));
        }
    }

    #[test]
    fn obj_round_trip_preserves_topology() {
        let mesh = uv_sphere(1.0, 8, 12);
        let back = parse_obj(&mesh.to_obj_string(), Path::new("s.obj"), MeshLoadOptions::default()).unwrap();
        assert_eq!(back.triangle_count(), mesh.triangle_count());
        for t in 0..mesh.triangle_count() {
            let (a, b) = (mesh.triangle_positions(t), back.triangle_positions(t));
            assert!((0..3).all(|k| (a[k] - b[k]).length() < 1e-12));
        }
    }
}
