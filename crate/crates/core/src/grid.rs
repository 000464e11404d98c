//! Vertex-aligned grid addressing shared by volumes and dense feature grids.
//!
//! Along an axis with `n` vertices, vertex `i` sits at `-1 + 2i/(n-1)`.
//! Linear indices are x-fastest: `x + nx * (y + ny * z)`.

use crate::{Error, Result};

/// The 8 corners of the cell enclosing a point, with their trilinear weights.
/// Corner `c` has offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCorners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn unravel(dims: [usize; 3], idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

#[inline]
pub fn vertex_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

pub fn vertex_position(dims: [usize; 3], idx: usize) -> [f64; 3] {
    let [x, y, z] = unravel(dims, idx);
    [
        vertex_coord(x, dims[0]),
        vertex_coord(y, dims[1]),
        vertex_coord(z, dims[2]),
    ]
}

pub fn check_domain(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|c| (-1.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(Error::OutOfDomain(p))
    }
}

/// Splits a normalized coordinate into a cell index and fractional offset
/// along an axis of `n >= 2` vertices.
#[inline]
fn axis_cell(c: f64, n: usize) -> (usize, f64) {
    let g = (c + 1.0) * 0.5 * (n - 1) as f64;
    let i = (g.floor() as usize).min(n - 2);
    (i, g - i as f64)
}

/// Trilinear corners of `p` on a vertex grid with `dims`. `p` must be in the domain.
pub fn cell_corners(dims: [usize; 3], p: [f64; 3]) -> CellCorners {
    let (ix, tx) = axis_cell(p[0], dims[0]);
    let (iy, ty) = axis_cell(p[1], dims[1]);
    let (iz, tz) = axis_cell(p[2], dims[2]);
    let mut out = CellCorners {
        index: [0; 8],
        weight: [0.0; 8],
    };
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let wx = if dx == 1 { tx } else { 1.0 - tx };
        let wy = if dy == 1 { ty } else { 1.0 - ty };
        let wz = if dz == 1 { tz } else { 1.0 - tz };
        out.index[c] = linear_index(dims, ix + dx, iy + dy, iz + dz);
        out.weight[c] = wx * wy * wz;
    }
    out
}

/// Index of the vertex nearest to `p`.
pub fn nearest_vertex(dims: [usize; 3], p: [f64; 3]) -> usize {
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let g = (p[a] + 1.0) * 0.5 * (dims[a] - 1) as f64;
        ijk[a] = (g.round().max(0.0) as usize).min(dims[a] - 1);
    }
    linear_index(dims, ijk[0], ijk[1], ijk[2])
}
