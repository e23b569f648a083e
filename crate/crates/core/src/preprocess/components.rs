//! Connected-component labeling on voxel grids.

use crate::data_io::voxel_index;

/// Neighborhood used for connectivity and for 1-voxel dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// 8-connectivity within each axial slice; components never span slices.
    #[default]
    Slice8,
    /// Full 26-connectivity in 3-D.
    Volume26,
}

impl Connectivity {
    pub(crate) fn offsets(self) -> Vec<[isize; 3]> {
        let dz: &[isize] = match self {
            Connectivity::Slice8 => &[0],
            Connectivity::Volume26 => &[-1, 0, 1],
        };
        let mut out = Vec::with_capacity(26);
        for &z in dz {
            for y in -1..=1 {
                for x in -1..=1 {
                    if (x, y, z) != (0, 0, 0) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Labeled components. `labels[i]` is the component id of voxel `i` (ids in
/// order of each component's first voxel in x-fastest scan order) or
/// `u32::MAX` for voxels outside the foreground.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Flat index of the first voxel of each component.
    pub seeds: Vec<usize>,
}

pub const UNLABELED: u32 = u32::MAX;

#[inline]
pub(crate) fn neighbor(dims: [usize; 3], p: [usize; 3], o: [isize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for i in 0..3 {
        let v = p[i] as isize + o[i];
        if v < 0 || v as usize >= dims[i] {
            return None;
        }
        q[i] = v as usize;
    }
    Some(voxel_index(dims, q[0], q[1], q[2]))
}

#[inline]
pub(crate) fn coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    [
        i % dims[0],
        (i / dims[0]) % dims[1],
        i / (dims[0] * dims[1]),
    ]
}

pub fn label_components(foreground: &[bool], dims: [usize; 3], conn: Connectivity) -> Components {
    let offsets = conn.offsets();
    let mut labels = vec![UNLABELED; foreground.len()];
    let mut sizes = Vec::new();
    let mut seeds = Vec::new();
    let mut stack = Vec::new();
    for start in 0..foreground.len() {
        if !foreground[start] || labels[start] != UNLABELED {
            continue;
        }
        let id = sizes.len() as u32;
        labels[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let p = coords(dims, i);
            for &o in &offsets {
                if let Some(j) = neighbor(dims, p, o) {
                    if foreground[j] && labels[j] == UNLABELED {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
        seeds.push(start);
    }
    Components {
        labels,
        sizes,
        seeds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_voxels_join_only_with_full_neighborhood() {
        // (0,0,0) and (1,1,1) touch only by a corner
        let dims = [2, 2, 2];
        let mut fg = vec![false; 8];
        fg[voxel_index(dims, 0, 0, 0)] = true;
        fg[voxel_index(dims, 1, 1, 1)] = true;
        assert_eq!(
            label_components(&fg, dims, Connectivity::Slice8).sizes,
            vec![1, 1]
        );
        assert_eq!(
            label_components(&fg, dims, Connectivity::Volume26).sizes,
            vec![2]
        );
    }

    #[test]
    fn in_slice_diagonal_is_connected() {
        let dims = [3, 3, 1];
        let mut fg = vec![false; 9];
        fg[0] = true;
        fg[4] = true;
        fg[8] = true;
        let c = label_components(&fg, dims, Connectivity::Slice8);
        assert_eq!(c.sizes, vec![3]);
        assert_eq!(c.seeds, vec![0]);
    }
}
