//! Plain loop kernels shared by the graph's forward and backward passes.

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided(m, k, n, a, (1, m), b, (n, 1), c);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided(m, k, n, a, (k, 1), b, (1, k), c);
}

#[allow(clippy::too_many_arguments)]
fn strided(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), sa.0 as isize, sa.1 as isize,
            b.as_ptr(), sb.0 as isize, sb.1 as isize,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Geometry of a stride-1, zero "same"-padded square convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H·W)` column matrix.
pub(crate) fn im2col(g: ConvGeom, img: &[f64], cols: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let hw = g.plane();
    for c in 0..g.c_in {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let (x0, x1) = valid_span(g.w, dx);
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    if x0 < x1 {
                        out[x0..x1].copy_from_slice(&src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
                    }
                }
            }
        }
    }
}

/// Output columns `x` whose source `x + dx` lies inside `0..w`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).clamp(0, w as isize) as usize;
    let x1 = (w as isize - dx).clamp(x0 as isize, w as isize) as usize;
    (x0, x1)
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(g: ConvGeom, cols: &[f64], img: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let hw = g.plane();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let (x0, x1) = valid_span(g.w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let base = c * hw + sy as usize * g.w;
                    let dst = &mut img[(base as isize + x0 as isize + dx) as usize..(base as isize + x1 as isize + dx) as usize];
                    for (d, v) in dst.iter_mut().zip(&src[y * g.w + x0..y * g.w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_plain_gemm() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut plain = [0.0; 4];
        gemm(2, 3, 2, &a, &b, &mut plain);
        assert_eq!(plain, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut tn);
        assert_eq!(tn, plain);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut nt);
        assert_eq!(nt, plain);
    }
}
