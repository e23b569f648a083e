//! Marching-cubes surface extraction from label masks, mesh measurements,
//! and STL/OBJ export.
//!
//! The 256-case table is built at first use from the cube's face geometry:
//! every face whose corners disagree contributes one or two segments between
//! edge midpoints, ambiguous faces separate their inside corners, segments
//! are oriented with the inside on the right seen from outside the cube,
//! and the resulting closed loops are triangulated. Adjacent cubes see
//! the same segments on their shared face, so surfaces of padded masks are
//! closed and consistently wound with normals pointing out of the label.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

use crate::data_io::{voxel_index, LabelMask};
use crate::numfmt::sig6;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Triangle mesh in millimeters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

/// Corner `i` of the unit cube sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
fn corner(i: usize) -> [i32; 3] {
    [(i & 1) as i32, ((i >> 1) & 1) as i32, ((i >> 2) & 1) as i32]
}

/// The 12 cube edges as (lower corner, axis), lower corner having a 0 bit on
/// that axis.
fn cube_edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut k = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                out[k] = (c, axis);
                k += 1;
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    cube_edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("adjacent corners")
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (c, axis) = cube_edges()[e];
    let p = corner(c);
    let mut m = [p[0] as f64, p[1] as f64, p[2] as f64];
    m[axis] += 0.5;
    m
}

/// Surface loops for one corner configuration.
fn build_case(case: usize) -> Vec<Loop> {
    let inside = |c: usize| case & (1 << c) != 0;
    // directed segments: start edge → end edge
    let mut next: HashMap<usize, usize> = HashMap::new();
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            // face corners in cyclic order
            let base = side << axis;
            let ring = [
                base,
                base | (1 << u),
                base | (1 << u) | (1 << v),
                base | (1 << v),
            ];
            let mut normal = [0.0; 3];
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let crossings: Vec<usize> = (0..4)
                .filter(|&k| inside(ring[k]) != inside(ring[(k + 1) % 4]))
                .collect();
            let mut segments: Vec<(usize, usize, usize)> = Vec::new();
            match crossings.len() {
                0 => {}
                2 => {
                    let e0 = edge_between(ring[crossings[0]], ring[(crossings[0] + 1) % 4]);
                    let e1 = edge_between(ring[crossings[1]], ring[(crossings[1] + 1) % 4]);
                    let c = *ring.iter().find(|&&c| inside(c)).expect("an inside corner");
                    segments.push((e0, e1, c));
                }
                4 => {
                    for (k, &c) in ring.iter().enumerate() {
                        if inside(c) {
                            let e0 = edge_between(c, ring[(k + 3) % 4]);
                            let e1 = edge_between(c, ring[(k + 1) % 4]);
                            segments.push((e0, e1, c));
                        }
                    }
                }
                _ => unreachable!("a face has an even number of sign changes"),
            }
            for (e0, e1, c) in segments {
                let (p, q) = (edge_midpoint(e0), edge_midpoint(e1));
                let cp = corner(c);
                let to_c = sub([cp[0] as f64, cp[1] as f64, cp[2] as f64], p);
                let right = cross(sub(q, p), normal);
                let (s, t) = if dot(to_c, right) > 0.0 {
                    (e0, e1)
                } else {
                    (e1, e0)
                };
                let prev = next.insert(s, t);
                debug_assert!(prev.is_none(), "edge starts two segments");
            }
        }
    }
    let mut loops = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    for start in starts {
        if !next.contains_key(&start) {
            continue;
        }
        let mut ring = vec![start as u8];
        let mut cur = next.remove(&start).expect("segment");
        while cur != start {
            ring.push(cur as u8);
            cur = next.remove(&cur).expect("loops close");
        }
        let apex = (0..ring.len()).find(|&a| {
            (2..ring.len() - 1)
                .all(|k| !share_face(ring[a] as usize, ring[(a + k) % ring.len()] as usize))
        });
        loops.push(Loop { edges: ring, apex });
    }
    loops
}

/// Both edges lie on a common cube face.
fn share_face(a: usize, b: usize) -> bool {
    let edges = cube_edges();
    let (ca, aa) = edges[a];
    let (cb, ab) = edges[b];
    let corners = |c: usize, axis: usize| [c, c | (1 << axis)];
    // a face is fixed by one axis bit; both edges must keep that bit constant
    (0..3).any(|f| {
        [0, 1].iter().any(|&side| {
            corners(ca, aa)
                .iter()
                .chain(&corners(cb, ab))
                .all(|&c| (c >> f) & 1 == side)
        })
    })
}

/// Closed loop of crossing edges, oriented outward. Loops whose fan
/// diagonals would run along a cube face (and could coincide with an edge
/// of the neighboring cube) are triangulated around their centroid.
#[derive(Debug, Clone)]
struct Loop {
    edges: Vec<u8>,
    apex: Option<usize>,
}

fn case_table() -> &'static [Vec<Loop>] {
    static TABLE: OnceLock<Vec<Vec<Loop>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

/// Isosurface at level 0.5 of the indicator `mask == label`, padded by one
/// background voxel on every face so the surface is closed. Vertices are
/// edge midpoints (the linear interpolant of a binary field) in millimeters,
/// numbered in order of first use while scanning cubes x-fastest.
pub fn marching_cubes(mask: &LabelMask, label: u8) -> Mesh {
    let dims = mask.dims();
    let spacing = mask.header.spacing_mm;
    let pd = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
    let mut ind = vec![false; pd.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                ind[voxel_index(pd, x + 1, y + 1, z + 1)] =
                    mask.labels[voxel_index(dims, x, y, z)] == label;
            }
        }
    }
    let table = case_table();
    let edges = cube_edges();
    let mut vertex_of = vec![u32::MAX; 3 * ind.len()];
    let mut mesh = Mesh::default();
    for z in 0..pd[2] - 1 {
        for y in 0..pd[1] - 1 {
            for x in 0..pd[0] - 1 {
                let mut case = 0;
                for c in 0..8 {
                    let o = corner(c);
                    if ind[voxel_index(pd, x + o[0] as usize, y + o[1] as usize, z + o[2] as usize)]
                    {
                        case |= 1 << c;
                    }
                }
                for lp in &table[case] {
                    let ids: Vec<u32> = lp
                        .edges
                        .iter()
                        .map(|&e| {
                            let (c, axis) = edges[e as usize];
                            let o = corner(c);
                            let g = [x + o[0] as usize, y + o[1] as usize, z + o[2] as usize];
                            let key = 3 * voxel_index(pd, g[0], g[1], g[2]) + axis;
                            if vertex_of[key] == u32::MAX {
                                vertex_of[key] = mesh.vertices.len() as u32;
                                // padded index p is original index p − 1
                                let pos = std::array::from_fn(|i| {
                                    let half = if i == axis { 0.5 } else { 0.0 };
                                    ((g[i] as f64 - 1.0 + half) * spacing[i] as f64) as f32
                                });
                                mesh.vertices.push(pos);
                            }
                            vertex_of[key]
                        })
                        .collect();
                    let n = ids.len();
                    match lp.apex {
                        Some(a) => {
                            for k in 1..n - 1 {
                                mesh.triangles.push([
                                    ids[a],
                                    ids[(a + k) % n],
                                    ids[(a + k + 1) % n],
                                ]);
                            }
                        }
                        None => {
                            let centroid = mesh.vertices.len() as u32;
                            let mut sum = [0.0f64; 3];
                            for &i in &ids {
                                for (s, v) in sum.iter_mut().zip(mesh.vertices[i as usize]) {
                                    *s += v as f64;
                                }
                            }
                            mesh.vertices.push(sum.map(|v| (v / n as f64) as f32));
                            for k in 0..n {
                                mesh.triangles.push([centroid, ids[k], ids[(k + 1) % n]]);
                            }
                        }
                    }
                }
            }
        }
    }
    mesh
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: &[u32; 3]) -> [[f64; 3]; 3] {
        t.map(|i| self.vertices[i as usize].map(f64::from))
    }

    /// Signed volume by the divergence theorem; positive for outward winding.
    pub fn enclosed_volume_mm3(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// `V − E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_counts().values().all(|&n| n == 2)
    }

    /// Every directed edge appears once, so neighbors agree on orientation.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.triangles
            .iter()
            .all(|t| (0..3).all(|k| seen.insert((t[k], t[(k + 1) % 3]))))
    }

    /// Unit normal from the winding, zero for degenerate triangles.
    pub fn normal(&self, t: &[u32; 3]) -> [f32; 3] {
        let [a, b, c] = self.corners(t);
        let n = cross(sub(b, a), sub(c, a));
        let len = dot(n, n).sqrt();
        if len == 0.0 {
            [0.0; 3]
        } else {
            n.map(|v| (v / len) as f32)
        }
    }

    /// Binary STL: 80-byte header, triangle count, 50 bytes per triangle.
    pub fn write_stl(&self, mut out: impl Write, label: &str) -> std::io::Result<()> {
        let mut header = [0u8; 80];
        let bytes = label.as_bytes();
        let n = bytes.len().min(80);
        header[..n].copy_from_slice(&bytes[..n]);
        out.write_all(&header)?;
        out.write_u32::<LittleEndian>(self.triangles.len() as u32)?;
        for t in &self.triangles {
            for v in self.normal(t) {
                out.write_f32::<LittleEndian>(v)?;
            }
            for &i in t {
                for v in self.vertices[i as usize] {
                    out.write_f32::<LittleEndian>(v)?;
                }
            }
            out.write_u16::<LittleEndian>(0)?;
        }
        Ok(())
    }

    /// ASCII OBJ with six significant digits and 1-based faces.
    pub fn write_obj(&self, mut out: impl Write) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(
                out,
                "v {} {} {}",
                sig6(v[0] as f64),
                sig6(v[1] as f64),
                sig6(v[2] as f64)
            )?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), MeshError> {
    let io = |source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn export_stl(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let label = path
        .file_stem()
        .map_or(String::new(), |s| s.to_string_lossy().into_owned());
    write_file(path, |w| mesh.write_stl(w, &label))
}

pub fn export_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    write_file(path.as_ref(), |w| mesh.write_obj(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::VolumeHeader;
    use proptest::prelude::*;

    fn mask_from(
        dims: [usize; 3],
        spacing: [f32; 3],
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> LabelMask {
        let mut labels = vec![0; dims.iter().product()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    labels[voxel_index(dims, x, y, z)] = f(x, y, z) as u8;
                }
            }
        }
        LabelMask::new(VolumeHeader::new(dims, spacing), labels)
    }

    #[test]
    fn table_cases_are_closed_surfaces() {
        assert!(case_table()[0].is_empty() && case_table()[255].is_empty());
        assert_eq!(case_table()[1][0].edges.len(), 3);
        // each crossing edge appears in exactly one loop of a case
        for (case, tris) in case_table().iter().enumerate() {
            let crossing = cube_edges()
                .iter()
                .filter(|&&(c, axis)| ((case >> c) & 1) != ((case >> (c | (1 << axis))) & 1))
                .count();
            let used: Vec<u8> = tris.iter().flat_map(|l| l.edges.iter().copied()).collect();
            let unique: std::collections::HashSet<u8> = used.iter().copied().collect();
            assert_eq!(
                (used.len(), unique.len()),
                (crossing, crossing),
                "case {case}"
            );
        }
    }

    #[test]
    fn empty_mask_gives_empty_mesh() {
        let m = mask_from([4, 4, 4], [1.0; 3], |_, _, _| false);
        let mesh = marching_cubes(&m, 1);
        assert!(mesh.vertices.is_empty() && mesh.triangles.is_empty());
    }

    #[test]
    fn single_voxel_is_an_outward_octahedron() {
        let m = mask_from([1, 1, 1], [1.0; 3], |_, _, _| true);
        let mesh = marching_cubes(&m, 1);
        assert_eq!((mesh.vertices.len(), mesh.triangles.len()), (6, 8));
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight() && mesh.is_consistently_oriented());
        assert!((mesh.enclosed_volume_mm3() - 1.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_voxels_stay_closed() {
        // two voxels sharing only a corner exercise the ambiguous cases
        let m = mask_from([2, 2, 2], [1.0; 3], |x, y, z| {
            (x, y, z) == (0, 0, 0) || (x, y, z) == (1, 1, 1)
        });
        let mesh = marching_cubes(&m, 1);
        assert!(mesh.is_watertight() && mesh.is_consistently_oriented());
        assert!(mesh.enclosed_volume_mm3() > 0.0);
    }

    #[test]
    fn stl_and_obj_layouts() {
        let mut buf = Vec::new();
        Mesh::default().write_stl(&mut buf, "empty").unwrap();
        assert_eq!(buf.len(), 84);
        assert_eq!(&buf[80..84], &[0, 0, 0, 0]);

        let m = mask_from([1, 1, 1], [1.0; 3], |_, _, _| true);
        let mesh = marching_cubes(&m, 1);
        let mut stl = Vec::new();
        mesh.write_stl(&mut stl, "voxel").unwrap();
        assert_eq!(stl.len(), 84 + 50 * 8);
        assert_eq!(u32::from_le_bytes(stl[80..84].try_into().unwrap()), 8);
        assert_eq!((stl.len() - 84) / 50, 8);

        let tri = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 2.25, 1.0 / 3.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut obj = Vec::new();
        tri.write_obj(&mut obj).unwrap();
        let text = String::from_utf8(obj).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(
            text.lines()
                .filter(|l| l.starts_with("f "))
                .collect::<Vec<_>>(),
            vec!["f 1 2 3"]
        );
        let last: Vec<f64> = text.lines().nth(2).unwrap()[2..]
            .split(' ')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(last, vec![0.0, 2.25, 0.333333]);
    }

    proptest! {
        #[test]
        fn random_masks_give_closed_oriented_surfaces(bits in prop::collection::vec(any::<bool>(), 64)) {
            let m = mask_from([4, 4, 4], [1.0, 1.5, 2.0], |x, y, z| bits[voxel_index([4, 4, 4], x, y, z)]);
            let mesh = marching_cubes(&m, 1);
            prop_assert!(mesh.is_watertight());
            prop_assert!(mesh.is_consistently_oriented());
            if !mesh.is_empty() {
                prop_assert!(mesh.enclosed_volume_mm3() > 0.0);
            }
            let mut a = Vec::new();
            let mut b = Vec::new();
            mesh.write_stl(&mut a, "x").unwrap();
            marching_cubes(&m, 1).write_stl(&mut b, "x").unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
