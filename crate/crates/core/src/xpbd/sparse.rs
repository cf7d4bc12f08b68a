//! 3x3-block compressed sparse rows and a block-Jacobi preconditioned CG.

use nalgebra::Matrix3;

use crate::Vec3;

#[derive(Clone, Debug)]
pub struct BlockCsr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<Matrix3<f64>>,
    diag: Vec<usize>,
}

impl BlockCsr {
    /// Pattern with one block per vertex pair sharing a tet (diagonal included).
    pub fn from_tets(n: usize, tets: &[[usize; 4]]) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for t in tets {
            for &a in t {
                for &b in t {
                    adj[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut diag = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, row) in adj.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            diag.push(cols.len() + row.binary_search(&i).unwrap());
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        let blocks = vec![Matrix3::zeros(); cols.len()];
        Self {
            row_ptr,
            cols,
            blocks,
            diag,
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn clear(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = Matrix3::zeros());
    }

    pub fn add(&mut self, i: usize, j: usize, block: &Matrix3<f64>) {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        let k = row
            .binary_search(&j)
            .expect("block outside the sparsity pattern");
        self.blocks[self.row_ptr[i] + k] += block;
    }

    pub fn add_diag(&mut self, i: usize, block: &Matrix3<f64>) {
        self.blocks[self.diag[i]] += block;
    }

    pub fn diag_block(&self, i: usize) -> &Matrix3<f64> {
        &self.blocks[self.diag[i]]
    }

    /// `y = H x` restricted to rows and columns where `free` is set.
    pub fn mul_masked(&self, x: &[Vec3], free: &[bool], y: &mut [Vec3]) {
        for i in 0..self.dim() {
            if !free[i] {
                y[i] = Vec3::zeros();
                continue;
            }
            let mut acc = Vec3::zeros();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                if free[j] {
                    acc += self.blocks[k] * x[j];
                }
            }
            y[i] = acc;
        }
    }
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `H x = b` on the free vertices with block-Jacobi preconditioning.
/// `x` holds the initial guess and receives the solution.
pub fn pcg(
    h: &BlockCsr,
    b: &[Vec3],
    free: &[bool],
    x: &mut [Vec3],
    rel_tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = h.dim();
    let precond: Vec<Matrix3<f64>> = (0..n)
        .map(|i| {
            if !free[i] {
                return Matrix3::zeros();
            }
            let d = h.diag_block(i);
            d.try_inverse().unwrap_or_else(|| {
                let s = d.trace() / 3.0;
                if s > 0.0 {
                    Matrix3::identity() / s
                } else {
                    Matrix3::identity()
                }
            })
        })
        .collect();
    for i in 0..n {
        if !free[i] {
            x[i] = Vec3::zeros();
        }
    }
    let mut hx = vec![Vec3::zeros(); n];
    h.mul_masked(x, free, &mut hx);
    let mut r: Vec<Vec3> = (0..n)
        .map(|i| if free[i] { b[i] - hx[i] } else { Vec3::zeros() })
        .collect();
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut z: Vec<Vec3> = (0..n).map(|i| precond[i] * r[i]).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut hp = vec![Vec3::zeros(); n];
    let mut iterations = 0;
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    while iterations < max_iter && rel > rel_tol {
        h.mul_masked(&p, free, &mut hp);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            break;
        }
        let alpha = rz / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        iterations += 1;
        rel = dot(&r, &r).sqrt() / b_norm;
        for i in 0..n {
            z[i] = precond[i] * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome {
        iterations,
        relative_residual: rel,
    }
}
