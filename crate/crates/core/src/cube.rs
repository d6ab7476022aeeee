//! Non-overlapping cube partitions of the token grid.
//!
//! Cubes are numbered in raster order over the cube grid, and tokens inside a
//! cube are listed in raster order of their local offset. Each cube has one
//! destination token at local offset `(s_t/2, s_h/2, s_w/2)` (floored); all
//! other tokens are sources.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayoutKind {
    /// 3D blocks over a `(T, H, W)` grid.
    Grid { grid: [usize; 3], cube: [usize; 3] },
    /// Contiguous runs over a 1D token sequence. The last chunk may be short.
    Chunked { len: usize, chunk: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubeLayout {
    kind: LayoutKind,
    token_to_cube: Vec<usize>,
    cube_to_tokens: Vec<Vec<usize>>,
    destination_of_cube: Vec<usize>,
}

impl CubeLayout {
    pub fn build(grid: [usize; 3], cube: [usize; 3]) -> Result<Self> {
        if grid.contains(&0) || cube.contains(&0) {
            return Err(Error::Layout(format!(
                "grid {grid:?} and cube {cube:?} must be >= 1 on every axis"
            )));
        }
        for axis in 0..3 {
            if !grid[axis].is_multiple_of(cube[axis]) {
                return Err(Error::Layout(format!(
                    "axis {axis}: grid extent {} is not divisible by cube size {}",
                    grid[axis], cube[axis]
                )));
            }
        }
        let [t, h, w] = grid;
        let [st, sh, sw] = cube;
        let (nt, nh, nw) = (t / st, h / sh, w / sw);
        let n_cubes = nt * nh * nw;
        let flat = |tau: usize, x: usize, y: usize| tau * h * w + x * w + y;

        let mut token_to_cube = vec![0; t * h * w];
        let mut cube_to_tokens = Vec::with_capacity(n_cubes);
        let mut destination_of_cube = Vec::with_capacity(n_cubes);
        for ct in 0..nt {
            for ch in 0..nh {
                for cw in 0..nw {
                    let c = cube_to_tokens.len();
                    let mut tokens = Vec::with_capacity(st * sh * sw);
                    for a in 0..st {
                        for b in 0..sh {
                            for e in 0..sw {
                                let i = flat(ct * st + a, ch * sh + b, cw * sw + e);
                                token_to_cube[i] = c;
                                tokens.push(i);
                            }
                        }
                    }
                    destination_of_cube.push(flat(
                        ct * st + st / 2,
                        ch * sh + sh / 2,
                        cw * sw + sw / 2,
                    ));
                    cube_to_tokens.push(tokens);
                }
            }
        }
        Ok(Self {
            kind: LayoutKind::Grid { grid, cube },
            token_to_cube,
            cube_to_tokens,
            destination_of_cube,
        })
    }

    /// Contiguous chunks of `chunk` tokens over a sequence of length `len`.
    /// Destinations sit at offset `size/2` within each chunk.
    pub fn chunked(len: usize, chunk: usize) -> Result<Self> {
        if len == 0 || chunk == 0 {
            return Err(Error::Layout(format!(
                "chunked layout needs len >= 1 and chunk >= 1, got {len} and {chunk}"
            )));
        }
        let n_cubes = len.div_ceil(chunk);
        let mut token_to_cube = Vec::with_capacity(len);
        let mut cube_to_tokens = Vec::with_capacity(n_cubes);
        let mut destination_of_cube = Vec::with_capacity(n_cubes);
        for c in 0..n_cubes {
            let start = c * chunk;
            let end = (start + chunk).min(len);
            token_to_cube.extend(std::iter::repeat_n(c, end - start));
            cube_to_tokens.push((start..end).collect());
            destination_of_cube.push(start + (end - start) / 2);
        }
        Ok(Self {
            kind: LayoutKind::Chunked { len, chunk },
            token_to_cube,
            cube_to_tokens,
            destination_of_cube,
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn n_tokens(&self) -> usize {
        self.token_to_cube.len()
    }

    pub fn n_cubes(&self) -> usize {
        self.cube_to_tokens.len()
    }

    /// Nominal tokens per cube; short tail chunks excepted.
    pub fn cube_size(&self) -> usize {
        match self.kind {
            LayoutKind::Grid { cube, .. } => cube.iter().product(),
            LayoutKind::Chunked { chunk, .. } => chunk,
        }
    }

    pub fn cube_of(&self, token: usize) -> usize {
        self.token_to_cube[token]
    }

    pub fn token_to_cube(&self) -> &[usize] {
        &self.token_to_cube
    }

    pub fn tokens(&self, cube: usize) -> &[usize] {
        &self.cube_to_tokens[cube]
    }

    pub fn destination(&self, cube: usize) -> usize {
        self.destination_of_cube[cube]
    }

    pub fn destinations(&self) -> &[usize] {
        &self.destination_of_cube
    }

    pub fn is_destination(&self, token: usize) -> bool {
        self.destination_of_cube[self.token_to_cube[token]] == token
    }

    /// Source tokens (every non-destination), ascending.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.n_tokens()).filter(|&i| !self.is_destination(i)).collect()
    }
}

/// Row `c` of the result is the mean of the rows belonging to cube `c`,
/// summed in the cube's raster order.
pub fn pool_cubes<S: Scalar>(rows: &Matrix<S>, layout: &CubeLayout) -> Result<Matrix<S>> {
    if rows.rows() != layout.n_tokens() {
        return Err(Error::Shape(format!(
            "pooling {} rows with a layout over {} tokens",
            rows.rows(),
            layout.n_tokens()
        )));
    }
    let d = rows.cols();
    let mut pooled = Matrix::zeros(layout.n_cubes(), d);
    for c in 0..layout.n_cubes() {
        let tokens = layout.tokens(c);
        let out = pooled.row_mut(c);
        for &i in tokens {
            for (o, &v) in out.iter_mut().zip(rows.row(i)) {
                *o = *o + v;
            }
        }
        let count = S::from_usize_lossy(tokens.len());
        out.iter_mut().for_each(|o| *o = *o / count);
    }
    Ok(pooled)
}
