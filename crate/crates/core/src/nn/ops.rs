//! Dense kernels on planar `[C, H, W]` feature maps: im2col convolution
//! with its adjoints, nearest-neighbor resampling and pointwise activations.

use serde::{Deserialize, Serialize};

use super::Scalar;

/// `c = a · b + beta · c` with row-major operands; `ta`/`tb` read the stored
/// matrix as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Convolution geometry with "same" padding (`k / 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `x` into a `[cin·k·k, ho·wo]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &Geom, out: &mut Vec<T>) {
    out.clear();
    out.resize(g.rows() * g.cols(), T::zero());
    if g.k == 1 && g.stride == 1 {
        out.copy_from_slice(&x[..g.cin * g.h * g.w]);
        return;
    }
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut out[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back, accumulating into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    let src = &row[oy * g.wo..][..g.wo];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `y[cout, ho·wo] += W · im2col(x)`; `w` is `[cout, cin·k·k]`.
pub fn conv_acc<T: Scalar>(
    w: &[T],
    cout: usize,
    x: &[T],
    g: &Geom,
    y: &mut [T],
    scratch: &mut Vec<T>,
) {
    im2col(x, g, scratch);
    gemm(
        cout,
        g.rows(),
        g.cols(),
        w,
        false,
        scratch,
        false,
        y,
        T::one(),
    );
}

/// Accumulates the weight gradient and, when `dx` is given, the input
/// gradient of [`conv_acc`].
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    w: &[T],
    cout: usize,
    x: &[T],
    g: &Geom,
    dy: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    im2col(x, g, scratch);
    gemm(
        cout,
        g.cols(),
        g.rows(),
        dy,
        false,
        scratch,
        true,
        dw,
        T::one(),
    );
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        gemm(
            g.rows(),
            cout,
            g.cols(),
            w,
            true,
            dy,
            false,
            &mut dcols,
            T::zero(),
        );
        col2im(&dcols, g, dx);
    }
}

/// Adds a per-channel bias.
pub fn add_bias<T: Scalar>(y: &mut [T], b: &[T], hw: usize) {
    for (plane, &bc) in y.chunks_mut(hw).zip(b) {
        for v in plane {
            *v += bc;
        }
    }
}

/// Accumulates per-channel sums of `dy` into `db`.
pub fn bias_grad<T: Scalar>(dy: &[T], db: &mut [T], hw: usize) {
    for (plane, d) in dy.chunks(hw).zip(db.iter_mut()) {
        let mut s = 0.0f64;
        for &v in plane {
            s += v.to_f64();
        }
        *d += T::of(s);
    }
}

/// Nearest-neighbor 2× upsampling of a `[c, h, w]` map.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            let src = &x[(ci * h + y / 2) * w..][..w];
            let dst = &mut out[(ci * h2 + y) * w2..][..w2];
            for (x2, d) in dst.iter_mut().enumerate() {
                *d = src[x2 / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block; `h`, `w` are the low-res dims.
pub fn upsample2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            let src = &dy[(ci * h2 + y) * w2..][..w2];
            let dst = &mut out[(ci * h + y / 2) * w..][..w];
            for (x2, &s) in src.iter().enumerate() {
                dst[x2 / 2] += s;
            }
        }
    }
    out
}

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, y: &mut [T]) {
        let slope = T::of(LEAKY_SLOPE);
        for v in y {
            if *v <= T::zero() {
                *v = match self {
                    Activation::LeakyRelu => *v * slope,
                    Activation::Relu => T::zero(),
                    Activation::Elu => v.exp() - T::one(),
                };
            }
        }
    }

    /// Multiplies `dy` by the derivative, expressed through the activation
    /// output `y` (all three are monotone, so the output determines it).
    pub fn backward<T: Scalar>(self, y: &[T], dy: &mut [T]) {
        let slope = T::of(LEAKY_SLOPE);
        for (d, &o) in dy.iter_mut().zip(y) {
            if o <= T::zero() {
                *d *= match self {
                    Activation::LeakyRelu => slope,
                    Activation::Relu => T::zero(),
                    Activation::Elu => o + T::one(),
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_conv(w: &[f64], cout: usize, x: &[f64], g: &Geom) -> Vec<f64> {
        let mut y = vec![0.0; cout * g.ho * g.wo];
        for co in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let wv = w[co * g.rows() + (ci * g.k + ky) * g.k + kx];
                                s += wv * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    y[(co * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        y
    }

    fn values(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_add(0x9e37);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn conv_matches_direct_sum(cin in 1usize..4, cout in 1usize..4, h in 2usize..9, w in 2usize..9, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in 0u64..1000) {
            let g = Geom::new(cin, h, w, k, stride);
            let x = values(cin * h * w, seed);
            let wt = values(cout * g.rows(), seed + 1);
            let mut y = vec![0.0; cout * g.cols()];
            conv_acc(&wt, cout, &x, &g, &mut y, &mut Vec::new());
            let oracle = naive_conv(&wt, cout, &x, &g);
            for (a, b) in y.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn conv_backward_is_adjoint(cin in 1usize..4, cout in 1usize..4, h in 2usize..8, w in 2usize..8, stride in 1usize..3, seed in 0u64..1000) {
            let g = Geom::new(cin, h, w, 3, stride);
            let x = values(cin * h * w, seed);
            let wt = values(cout * g.rows(), seed + 1);
            let dy = values(cout * g.cols(), seed + 2);
            let mut y = vec![0.0; cout * g.cols()];
            conv_acc(&wt, cout, &x, &g, &mut y, &mut Vec::new());
            let mut dw = vec![0.0; wt.len()];
            let mut dx = vec![0.0; x.len()];
            conv_backward(&wt, cout, &x, &g, &dy, &mut dw, Some(&mut dx), &mut Vec::new());
            // y is bilinear in (w, x): <dy, y> = <dw, w> = <dx, x>.
            let lhs = dot(&dy, &y);
            prop_assert!((lhs - dot(&dw, &wt)).abs() < 1e-9);
            prop_assert!((lhs - dot(&dx, &x)).abs() < 1e-9);
        }

        #[test]
        fn upsample_backward_is_adjoint(c in 1usize..3, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let x = values(c * h * w, seed);
            let dy = values(c * 4 * h * w, seed + 3);
            let up = upsample2(&x, c, h, w);
            let back = upsample2_backward(&dy, c, h, w);
            prop_assert!((dot(&up, &dy) - dot(&x, &back)).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn stride_two_halves_even_sides() {
        let g = Geom::new(1, 64, 64, 3, 2);
        assert_eq!((g.ho, g.wo), (32, 32));
    }

    #[test]
    fn activation_derivatives_from_outputs() {
        for act in [Activation::LeakyRelu, Activation::Relu, Activation::Elu] {
            for &x in &[-1.3f64, -0.2, 0.4, 2.0] {
                let eps = 1e-6;
                let f = |v: f64| {
                    let mut a = [v];
                    act.apply(&mut a);
                    a[0]
                };
                let num = (f(x + eps) - f(x - eps)) / (2.0 * eps);
                let mut d = [1.0];
                act.backward(&[f(x)], &mut d);
                assert!((d[0] - num).abs() < 1e-6, "{act:?} at {x}");
            }
        }
    }
}
