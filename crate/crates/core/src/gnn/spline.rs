use std::rc::Rc;

use crate::diffengine::KernelEntry;
use crate::error::{invalid, Result};
use crate::graph_build::GraphBatch;

/// B-spline kernel over 2-d pseudo-coordinates: `kernel_size[d]` open uniform
/// basis functions of degree `degree` per axis on `[0, 1]`, with one
/// `c_in x c_out` weight matrix per basis-index tuple.
///
/// An axis with a single basis function is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineKernel {
    pub degree: usize,
    pub kernel_size: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
}

impl SplineKernel {
    pub fn new(degree: usize, kernel_size: Vec<usize>, c_in: usize, c_out: usize) -> Result<Self> {
        if degree == 0 {
            return Err(invalid!("spline degree must be at least 1"));
        }
        if kernel_size.is_empty() {
            return Err(invalid!("kernel needs at least one pseudo-dimension"));
        }
        for &k in &kernel_size {
            if k == 0 || (k > 1 && k <= degree) {
                return Err(invalid!(
                    "kernel size {k} needs to be 1 or exceed the degree {degree}"
                ));
            }
        }
        if c_in == 0 || c_out == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        Ok(SplineKernel {
            degree,
            kernel_size,
            c_in,
            c_out,
        })
    }

    pub fn dims(&self) -> usize {
        self.kernel_size.len()
    }

    /// Number of weight matrices, the product of the kernel sizes.
    pub fn num_kernels(&self) -> usize {
        self.kernel_size.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.num_kernels(), self.c_in, self.c_out]
    }

    pub fn weight_count(&self) -> usize {
        self.num_kernels() * self.c_in * self.c_out
    }

    /// Upper bound on nonzero basis products, `(m + 1)^d`.
    pub fn max_entries(&self) -> usize {
        (self.degree + 1).pow(self.dims() as u32)
    }

    /// Nonzero basis products at `u` as `(flat kernel index, value)`; the
    /// flat index is row-major over the per-axis basis indices.
    pub fn basis(&self, u: &[f64]) -> Result<Vec<(usize, f64)>> {
        if u.len() != self.dims() {
            return Err(invalid!(
                "pseudo-coordinate has {} dims, kernel has {}",
                u.len(),
                self.dims()
            ));
        }
        let mut out = vec![(0usize, 1.0f64)];
        for (&ud, &k) in u.iter().zip(&self.kernel_size) {
            let axis = axis_basis(ud, k, self.degree);
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for &(flat, v) in &out {
                for &(z, b) in &axis {
                    next.push((flat * k + z, v * b));
                }
            }
            out = next;
        }
        Ok(out)
    }

    pub(crate) fn entries(&self, graph: &GraphBatch) -> Result<Rc<[KernelEntry]>> {
        super::spline_entries(self, graph)
    }
}

/// Nonzero basis products at `u` as `(index tuple, value)`. Values are
/// non-negative and sum to one.
pub fn spline_basis(u: &[f64], kernel: &SplineKernel) -> Result<Vec<(Vec<usize>, f64)>> {
    let flat = kernel.basis(u)?;
    Ok(flat
        .into_iter()
        .map(|(mut f, v)| {
            let mut z = vec![0; kernel.dims()];
            for d in (0..kernel.dims()).rev() {
                z[d] = f % kernel.kernel_size[d];
                f /= kernel.kernel_size[d];
            }
            (z, v)
        })
        .collect())
}

/// Knot `i` of the clamped uniform knot vector with `k` basis functions of degree `m`.
fn knot(i: usize, k: usize, m: usize) -> f64 {
    if i <= m {
        0.0
    } else if i >= k {
        1.0
    } else {
        (i - m) as f64 / (k - m) as f64
    }
}

/// Nonzero degree-`m` basis values at `u` (clamped to `[0, 1]`) via Cox-de Boor.
fn axis_basis(u: f64, k: usize, m: usize) -> Vec<(usize, f64)> {
    if k == 1 {
        return vec![(0, 1.0)];
    }
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
    let mut span = if u >= 1.0 {
        k - 1
    } else {
        (m + (u * (k - m) as f64) as usize).min(k - 1)
    };
    while span > m && knot(span, k, m) > u {
        span -= 1;
    }
    while span < k - 1 && knot(span + 1, k, m) <= u {
        span += 1;
    }
    let mut n = vec![0.0; m + 1];
    let mut left = vec![0.0; m + 1];
    let mut right = vec![0.0; m + 1];
    n[0] = 1.0;
    for j in 1..=m {
        left[j] = u - knot(span + 1 - j, k, m);
        right[j] = knot(span + j, k, m) - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n.into_iter()
        .enumerate()
        .filter(|&(_, v)| v > 0.0)
        .map(|(r, v)| (span - m + r, v))
        .collect()
}
