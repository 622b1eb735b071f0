//! Layer primitives with their backward passes.
//!
//! Sequence activations are token-major `[L, C]`; image maps are
//! channel-major `[C, H, W]`. Backward functions accumulate into parameter
//! gradients and, unless stated otherwise, into the input gradient.

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W^T + b` for `x: [n, din]`, `w: [dout, din]`.
pub fn linear_fwd<T: Scalar>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize, y: &mut [T]) {
    for row in y.chunks_exact_mut(dout).take(n) {
        row.copy_from_slice(&b[..dout]);
    }
    T::gemm(n, din, dout, T::one(), x, din as isize, 1, w, 1, din as isize, T::one(), y, dout as isize, 1);
}

/// Accumulates `dw += dy^T x`, `db += colsum(dy)` and, when given,
/// `dx += dy W`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    if let Some(dx) = dx {
        T::gemm(n, dout, din, T::one(), dy, dout as isize, 1, w, din as isize, 1, T::one(), dx, din as isize, 1);
    }
    T::gemm(dout, n, din, T::one(), dy, 1, dout as isize, x, din as isize, 1, T::one(), dw, din as isize, 1);
    for row in dy.chunks_exact(dout).take(n) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// Per-token normalization statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm_fwd<T: Scalar>(x: &[T], c: usize, g: &[T], b: &[T], y: &mut [T]) -> LnCache<T> {
    let n = x.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut cache = LnCache {
        xhat: vec![T::zero(); x.len()],
        rstd: vec![T::zero(); n],
    };
    for t in 0..n {
        let row = &x[t * c..(t + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
        cache.rstd[t] = rstd;
        for k in 0..c {
            let xh = (row[k] - mean) * rstd;
            cache.xhat[t * c + k] = xh;
            y[t * c + k] = xh * g[k] + b[k];
        }
    }
    cache
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd<T: Scalar>(
    dy: &[T],
    c: usize,
    cache: &LnCache<T>,
    g: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_c = T::one() / T::of(c as f64);
    for (t, &rstd) in cache.rstd.iter().enumerate() {
        let dyr = &dy[t * c..(t + 1) * c];
        let xh = &cache.xhat[t * c..(t + 1) * c];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for k in 0..c {
            let d = dyr[k] * g[k];
            m1 += d;
            m2 += d * xh[k];
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for k in 0..c {
            dx[t * c + k] += rstd * (dyr[k] * g[k] - m1 - xh[k] * m2);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let a = T::of(GELU_A);
    let t = (k * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub fn leaky<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_grad<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Width-3 convolution along tokens with zero padding at both ends.
/// `w: [cout, cin, 3]`, tap `k` reads token `l + k - 1`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d3_fwd<T: Scalar>(x: &[T], l: usize, cin: usize, w: &[T], b: &[T], cout: usize, y: &mut [T]) {
    for row in y.chunks_exact_mut(cout).take(l) {
        row.copy_from_slice(&b[..cout]);
    }
    if l < 2 {
        conv_tap(x, 0, y, 0, l, cin, w, 1, cout);
        return;
    }
    conv_tap(x, 0, y, 1, l - 1, cin, w, 0, cout);
    conv_tap(x, 0, y, 0, l, cin, w, 1, cout);
    conv_tap(x, 1, y, 0, l - 1, cin, w, 2, cout);
}

#[allow(clippy::too_many_arguments)]
fn conv_tap<T: Scalar>(x: &[T], xrow: usize, y: &mut [T], yrow: usize, rows: usize, cin: usize, w: &[T], k: usize, cout: usize) {
    T::gemm(
        rows,
        cin,
        cout,
        T::one(),
        &x[xrow * cin..],
        cin as isize,
        1,
        &w[k..],
        3,
        (cin * 3) as isize,
        T::one(),
        &mut y[yrow * cout..],
        cout as isize,
        1,
    );
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d3_bwd<T: Scalar>(
    x: &[T],
    l: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for row in dy.chunks_exact(cout).take(l) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    // (tap, first input row, first output row, rows)
    let taps: Vec<(usize, usize, usize, usize)> = if l < 2 {
        vec![(1, 0, 0, l)]
    } else {
        vec![(0, 0, 1, l - 1), (1, 0, 0, l), (2, 1, 0, l - 1)]
    };
    for (k, xr, yr, rows) in taps {
        T::gemm(
            rows,
            cout,
            cin,
            T::one(),
            &dy[yr * cout..],
            cout as isize,
            1,
            &w[k..],
            (cin * 3) as isize,
            3,
            T::one(),
            &mut dx[xr * cin..],
            cin as isize,
            1,
        );
        T::gemm(
            cout,
            rows,
            cin,
            T::one(),
            &dy[yr * cout..],
            1,
            cout as isize,
            &x[xr * cin..],
            cin as isize,
            1,
            T::one(),
            &mut dw[k..],
            (cin * 3) as isize,
            3,
        );
    }
}

/// Geometry of a square transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvT {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Input side length.
    pub size: usize,
}

impl ConvT {
    pub fn out_size(&self) -> usize {
        (self.size - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn cols_rows(&self) -> usize {
        self.cout * self.kernel * self.kernel
    }

    /// `x: [cin, s, s]`, `w: [cin, cout, k, k]`, output `[cout, o, o]`.
    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
        let hw = self.size * self.size;
        let r = self.cols_rows();
        let mut cols = vec![T::zero(); r * hw];
        T::gemm(r, self.cin, hw, T::one(), w, 1, r as isize, x, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
        let o = self.out_size();
        for (co, plane) in y.chunks_exact_mut(o * o).enumerate().take(self.cout) {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        self.scatter(|row, idx, out| y[out] += cols[row * hw + idx]);
    }

    /// Visits every (column row, input pixel, output index) triple that lands inside the output.
    fn scatter(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p, n) = (self.kernel, self.stride, self.pad as isize, self.size);
        let o = self.out_size() as isize;
        for co in 0..self.cout {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (co * k + ki) * k + kj;
                    for yy in 0..n {
                        let oy = (yy * s + ki) as isize - p;
                        if oy < 0 || oy >= o {
                            continue;
                        }
                        for xx in 0..n {
                            let ox = (xx * s + kj) as isize - p;
                            if ox < 0 || ox >= o {
                                continue;
                            }
                            let out = (co as isize * o + oy) * o + ox;
                            f(row, yy * n + xx, out as usize);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(&self, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: &mut [T], db: &mut [T]) {
        let hw = self.size * self.size;
        let r = self.cols_rows();
        let o = self.out_size();
        for (co, plane) in dy.chunks_exact(o * o).enumerate().take(self.cout) {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); r * hw];
        self.scatter(|row, idx, out| dcols[row * hw + idx] = dy[out]);
        T::gemm(self.cin, hw, r, T::one(), x, hw as isize, 1, &dcols, 1, hw as isize, T::one(), dw, r as isize, 1);
        if let Some(dx) = dx {
            T::gemm(self.cin, r, hw, T::one(), w, r as isize, 1, &dcols, hw as isize, 1, T::one(), dx, hw as isize, 1);
        }
    }
}

/// 3x3 same-padded convolution, `x: [cin, n, n]`, `w: [cout, cin, 3, 3]`.
pub fn conv3x3_fwd<T: Scalar>(x: &[T], cin: usize, n: usize, w: &[T], b: &[T], cout: usize, y: &mut [T]) {
    let nn = n * n;
    for co in 0..cout {
        let out = &mut y[co * nn..(co + 1) * nn];
        out.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let plane = &x[ci * nn..(ci + 1) * nn];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    for_each_tap(n, ky, kx, |o, i| out[o] += wv * plane[i]);
                }
            }
        }
    }
}

#[inline]
fn for_each_tap(n: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let (y0, y1) = (1usize.saturating_sub(ky), (n + 1 - ky).min(n));
    let (x0, x1) = (1usize.saturating_sub(kx), (n + 1 - kx).min(n));
    for yy in y0..y1 {
        let iy = yy + ky - 1;
        for xx in x0..x1 {
            f(yy * n + xx, iy * n + xx + kx - 1);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_bwd<T: Scalar>(
    x: &[T],
    cin: usize,
    n: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let nn = n * n;
    for co in 0..cout {
        let g = &dy[co * nn..(co + 1) * nn];
        db[co] += g.iter().copied().sum::<T>();
        for ci in 0..cin {
            let plane = &x[ci * nn..(ci + 1) * nn];
            let dplane = &mut dx[ci * nn..(ci + 1) * nn];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for_each_tap(n, ky, kx, |o, i| {
                        acc += g[o] * plane[i];
                        dplane[i] += g[o] * wv;
                    });
                    dw[wi] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                (fp - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 101) as f64 / 101.0 - 0.45) * scale).collect()
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-7 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn linear_matches_loops_and_gradients() {
        let (n, din, dout) = (3, 4, 5);
        let x = seq(n * din, 1.0);
        let w = seq(dout * din, 0.7);
        let b = seq(dout, 0.3);
        let mut y = vec![0.0; n * dout];
        linear_fwd(&x, n, din, &w, &b, dout, &mut y);
        for t in 0..n {
            for o in 0..dout {
                let want: f64 = b[o] + (0..din).map(|i| x[t * din + i] * w[o * din + i]).sum::<f64>();
                assert!((y[t * dout + o] - want).abs() < 1e-12);
            }
        }
        let dy = seq(n * dout, 1.3);
        let loss = |x: &[f64], w: &[f64]| {
            let mut y = vec![0.0; n * dout];
            linear_fwd(x, n, din, w, &b, dout, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dx = vec![0.0; n * din];
        let mut dw = vec![0.0; dout * din];
        let mut db = vec![0.0; dout];
        linear_bwd(&x, n, din, &w, dout, &dy, Some(&mut dx), &mut dw, &mut db);
        close(&dx, &numeric(|p| loss(p, &w), &x));
        close(&dw, &numeric(|p| loss(&x, p), &w));
    }

    #[test]
    fn layernorm_statistics_and_gradient() {
        let c = 6;
        let x = seq(2 * c, 3.0);
        let g = seq(c, 1.0).iter().map(|v| v + 1.0).collect::<Vec<_>>();
        let b = seq(c, 0.5);
        let mut y = vec![0.0; x.len()];
        let cache = layernorm_fwd(&x, c, &g, &b, &mut y);
        for row in cache.xhat.chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / c as f64;
            // eps shrinks the variance slightly below 1
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }
        let dy = seq(x.len(), 1.1);
        let loss = |x: &[f64], g: &[f64]| {
            let mut y = vec![0.0; x.len()];
            layernorm_fwd(x, c, g, &b, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        layernorm_bwd(&dy, c, &cache, &g, &mut dx, &mut dg, &mut db);
        close(&dx, &numeric(|p| loss(p, &g), &x));
        close(&dg, &numeric(|p| loss(&x, p), &g));
    }

    #[test]
    fn gelu_values_and_derivative() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0f64] {
            let h = 1e-6;
            let n = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - n).abs() < 1e-8);
        }
    }

    #[test]
    fn conv1d3_matches_loops_and_gradients() {
        let (l, cin, cout) = (5, 3, 2);
        let x = seq(l * cin, 1.0);
        let w = seq(cout * cin * 3, 0.8);
        let b = seq(cout, 0.2);
        let mut y = vec![0.0; l * cout];
        conv1d3_fwd(&x, l, cin, &w, &b, cout, &mut y);
        for t in 0..l {
            for o in 0..cout {
                let mut want = b[o];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < l {
                        for i in 0..cin {
                            want += w[(o * cin + i) * 3 + k] * x[src as usize * cin + i];
                        }
                    }
                }
                assert!((y[t * cout + o] - want).abs() < 1e-12);
            }
        }
        let dy = seq(l * cout, 1.2);
        let loss = |x: &[f64], w: &[f64]| {
            let mut y = vec![0.0; l * cout];
            conv1d3_fwd(x, l, cin, w, &b, cout, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        conv1d3_bwd(&x, l, cin, &w, cout, &dy, &mut dx, &mut dw, &mut db);
        close(&dx, &numeric(|p| loss(p, &w), &x));
        close(&dw, &numeric(|p| loss(&x, p), &w));
    }

    #[test]
    fn conv_transpose_shapes_and_gradients() {
        for (stride, pad, size) in [(4, 0, 1), (2, 1, 3)] {
            let c = ConvT {
                cin: 2,
                cout: 3,
                kernel: 4,
                stride,
                pad,
                size,
            };
            let o = c.out_size();
            assert_eq!(o, if stride == 4 { 4 } else { 6 });
            let x = seq(c.cin * size * size, 1.0);
            let w = seq(c.cin * c.cout * 16, 0.5);
            let b = seq(c.cout, 0.1);
            let dy = seq(c.cout * o * o, 0.9);
            let loss = |x: &[f64], w: &[f64]| {
                let mut y = vec![0.0; c.cout * o * o];
                c.forward(x, w, &b, &mut y);
                y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; c.cout];
            c.backward(&x, &w, &dy, Some(&mut dx), &mut dw, &mut db);
            close(&dx, &numeric(|p| loss(p, &w), &x));
            close(&dw, &numeric(|p| loss(&x, p), &w));
        }
    }

    #[test]
    fn conv_transpose_stride_two_direct_sum() {
        // one input pixel at (1, 1) of a 3x3 map hits outputs 2*1 - 1 + k
        let c = ConvT {
            cin: 1,
            cout: 1,
            kernel: 4,
            stride: 2,
            pad: 1,
            size: 3,
        };
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let w: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut y = vec![0.0; 36];
        c.forward(&x, &w, &[0.0], &mut y);
        for ki in 0..4 {
            for kj in 0..4 {
                assert_eq!(y[(1 + ki) * 6 + 1 + kj], (ki * 4 + kj) as f64);
            }
        }
        assert_eq!(y.iter().sum::<f64>(), (0..16).sum::<usize>() as f64);
    }

    #[test]
    fn conv3x3_gradients() {
        let (cin, cout, n) = (2, 2, 4);
        let x = seq(cin * n * n, 1.0);
        let w = seq(cout * cin * 9, 0.6);
        let b = seq(cout, 0.1);
        let dy = seq(cout * n * n, 1.0);
        let loss = |x: &[f64], w: &[f64]| {
            let mut y = vec![0.0; cout * n * n];
            conv3x3_fwd(x, cin, n, w, &b, cout, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        conv3x3_bwd(&x, cin, n, &w, cout, &dy, &mut dx, &mut dw, &mut db);
        close(&dx, &numeric(|p| loss(p, &w), &x));
        close(&dw, &numeric(|p| loss(&x, p), &w));
        // centre tap only: identity
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x = seq(16, 1.0);
        let mut y = vec![0.0; 16];
        conv3x3_fwd(&x, 1, 4, &w, &[0.0], 1, &mut y);
        assert_eq!(x, y);
    }
}
