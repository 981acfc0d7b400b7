//! Numeric kernels over NHWC tensors, forward and adjoint.
//!
//! These are plain functions of their inputs; the autodiff graph in
//! [`crate::autodiff`] stitches them together.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn nhwc(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.dims() {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref d => Err(Error::shape(op, format!("expected [B,H,W,C], got {d:?}"))),
    }
}

/// Geometry of a stride-1, same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn check<T: Real>(x: &Tensor<T>, k: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let (b, h, w, cin) = nhwc(x, "conv2d")?;
        let [kh, kw, kcin, cout] = *k.dims() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel dims {:?}", k.dims()),
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} must have odd extents"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if bias.dims() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias dims {:?} for {cout} outputs", bias.dims()),
            ));
        }
        Ok(Self {
            b,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Writes the zero-padded patch matrix `[H*W, kh*kw*Cin]` of one sample.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ph, pw) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
    let k = g.patch();
    col.fill(T::zero());
    for i in 0..g.h {
        for j in 0..g.w {
            let row = &mut col[(i * g.w + j) * k..(i * g.w + j + 1) * k];
            for di in 0..g.kh {
                let si = i as isize + di as isize - ph as isize;
                if si < 0 || si >= g.h as isize {
                    continue;
                }
                for dj in 0..g.kw {
                    let sj = j as isize + dj as isize - pw as isize;
                    if sj < 0 || sj >= g.w as isize {
                        continue;
                    }
                    let src = (si as usize * g.w + sj as usize) * g.cin;
                    let dst = (di * g.kw + dj) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one sample's input gradient.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ph, pw) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
    let k = g.patch();
    for i in 0..g.h {
        for j in 0..g.w {
            let row = &col[(i * g.w + j) * k..(i * g.w + j + 1) * k];
            for di in 0..g.kh {
                let si = i as isize + di as isize - ph as isize;
                if si < 0 || si >= g.h as isize {
                    continue;
                }
                for dj in 0..g.kw {
                    let sj = j as isize + dj as isize - pw as isize;
                    if sj < 0 || sj >= g.w as isize {
                        continue;
                    }
                    let dst = (si as usize * g.w + sj as usize) * g.cin;
                    let src = (di * g.kw + dj) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] = dx[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

/// Upper bound on the floats in one patch-matrix block, so a block stays in cache.
const PATCH_BLOCK: usize = 1 << 16;

/// Samples per patch-matrix block.
fn block_samples(g: &ConvGeom) -> usize {
    (PATCH_BLOCK / (g.h * g.w * g.patch().max(g.cout))).clamp(1, g.b.max(1))
}

/// Patch matrix `[n*H*W, kh*kw*Cin]` of `n` consecutive samples; a pointwise
/// convolution uses the input as is.
fn patches<'a, T: Real>(g: &ConvGeom, x: &'a [T], col: &'a mut Vec<T>) -> &'a [T] {
    if g.pointwise() {
        return x;
    }
    let (hw, k) = (g.h * g.w, g.patch());
    let n = x.len() / (hw * g.cin);
    col.resize(n * hw * k, T::zero());
    for (xs, cs) in x.chunks_exact(hw * g.cin).zip(col.chunks_exact_mut(hw * k)) {
        im2col(g, xs, cs);
    }
    col
}

pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::check(x, kernel, bias)?;
    let hw = g.h * g.w;
    let k = g.patch();
    let mut out = vec![T::zero(); g.b * hw * g.cout];
    for row in out.chunks_exact_mut(g.cout) {
        row.copy_from_slice(bias.data());
    }
    let n = block_samples(&g);
    let mut col = Vec::new();
    for (xs, ys) in x
        .data()
        .chunks(n * hw * g.cin)
        .zip(out.chunks_mut(n * hw * g.cout))
    {
        let rows = ys.len() / g.cout;
        let a = patches(&g, xs, &mut col);
        T::gemm(
            rows,
            k,
            g.cout,
            T::one(),
            a,
            (k as isize, 1),
            kernel.data(),
            (g.cout as isize, 1),
            T::one(),
            ys,
            (g.cout as isize, 1),
        );
    }
    Tensor::new(vec![g.b, g.h, g.w, g.cout], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::check(x, kernel, bias)?;
    let hw = g.h * g.w;
    let k = g.patch();
    let mut db = vec![T::zero(); g.cout];
    for row in dy.data().chunks_exact(g.cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }
    let mut dk = vec![T::zero(); k * g.cout];
    let mut dx = if need_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let n = block_samples(&g);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for (blk, (xs, dys)) in x
        .data()
        .chunks(n * hw * g.cin)
        .zip(dy.data().chunks(n * hw * g.cout))
        .enumerate()
    {
        let rows = dys.len() / g.cout;
        let a = patches(&g, xs, &mut col);
        // dK += colᵀ · dY
        T::gemm(
            k,
            rows,
            g.cout,
            T::one(),
            a,
            (1, k as isize),
            dys,
            (g.cout as isize, 1),
            T::one(),
            &mut dk,
            (g.cout as isize, 1),
        );
        if need_input {
            let dxs = &mut dx[blk * n * hw * g.cin..][..xs.len()];
            // dCol = dY · Kᵀ
            let target: &mut [T] = if g.pointwise() {
                dxs
            } else {
                dcol.resize(rows * k, T::zero());
                &mut dcol
            };
            T::gemm(
                rows,
                g.cout,
                k,
                T::one(),
                dys,
                (g.cout as isize, 1),
                kernel.data(),
                (1, g.cout as isize),
                T::zero(),
                target,
                (k as isize, 1),
            );
            if !g.pointwise() {
                for (cs, d) in dcol
                    .chunks_exact(hw * k)
                    .zip(dxs.chunks_exact_mut(hw * g.cin))
                {
                    col2im(&g, cs, d);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.dims().to_vec(), dx)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.dims().to_vec(), dk)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Depthwise 3x3 binomial low-pass, `[1,2,1]ᵀ[1,2,1] / 16`, zero padded.
///
/// The operator is self-adjoint, so the same function serves as its backward.
pub fn blur<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w, c) = nhwc(x, "gaussian_blur")?;
    let two = T::of(2.0);
    let scale = T::of(1.0 / 16.0);
    let row = w * c;
    let mut tmp = vec![T::zero(); x.len()];
    // horizontal pass, one image row at a time
    for (src, dst) in x.data().chunks_exact(row).zip(tmp.chunks_exact_mut(row)) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = two * *s;
        }
        for (d, s) in dst[c..].iter_mut().zip(&src[..row - c]) {
            *d = *d + *s;
        }
        for (d, s) in dst[..row - c].iter_mut().zip(&src[c..]) {
            *d = *d + *s;
        }
    }
    let mut out = vec![T::zero(); x.len()];
    let plane = h * row;
    for (src, dst) in tmp.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for i in 0..h {
            let o = &mut dst[i * row..(i + 1) * row];
            for (d, s) in o.iter_mut().zip(&src[i * row..(i + 1) * row]) {
                *d = two * *s;
            }
            if i > 0 {
                for (d, s) in o.iter_mut().zip(&src[(i - 1) * row..i * row]) {
                    *d = *d + *s;
                }
            }
            if i + 1 < h {
                for (d, s) in o.iter_mut().zip(&src[(i + 1) * row..(i + 2) * row]) {
                    *d = *d + *s;
                }
            }
            for d in o.iter_mut() {
                *d = *d * scale;
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Averaging window `[start, end)` of output cell `i` when pooling `n` cells into `m`.
pub fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n) / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = nhwc(x, "adaptive_avg_pool")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::shape(
            "adaptive_avg_pool",
            format!("{h}x{w} -> {oh}x{ow}"),
        ));
    }
    let src = x.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    for s in 0..b {
        for oi in 0..oh {
            let (i0, i1) = adaptive_bin(oi, h, oh);
            for oj in 0..ow {
                let (j0, j1) = adaptive_bin(oj, w, ow);
                let norm = T::of(1.0 / ((i1 - i0) * (j1 - j0)) as f64);
                let o = ((s * oh + oi) * ow + oj) * c;
                for i in i0..i1 {
                    for j in j0..j1 {
                        let p = ((s * h + i) * w + j) * c;
                        for ch in 0..c {
                            out[o + ch] = out[o + ch] + src[p + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v = *v * norm;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub fn adaptive_avg_pool_backward<T: Real>(
    input_dims: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, h, w, c] = *input_dims else {
        return Err(Error::shape("adaptive_avg_pool", format!("{input_dims:?}")));
    };
    let (_, oh, ow, _) = nhwc(dy, "adaptive_avg_pool")?;
    let g = dy.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for s in 0..b {
        for oi in 0..oh {
            let (i0, i1) = adaptive_bin(oi, h, oh);
            for oj in 0..ow {
                let (j0, j1) = adaptive_bin(oj, w, ow);
                let norm = T::of(1.0 / ((i1 - i0) * (j1 - j0)) as f64);
                let o = ((s * oh + oi) * ow + oj) * c;
                for i in i0..i1 {
                    for j in j0..j1 {
                        let p = ((s * h + i) * w + j) * c;
                        for ch in 0..c {
                            dx[p + ch] = dx[p + ch] + g[o + ch] * norm;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_dims.to_vec(), dx)
}

/// 2x2 stride-2 average pool; spatial extents must be even.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w, _) = nhwc(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2",
            format!("odd spatial dims {h}x{w}"),
        ));
    }
    adaptive_avg_pool(x, h / 2, w / 2)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v <= T::zero() {
            *v = slope * *v;
        }
    }
    out
}

/// Flushes subnormal floats to zero on the current thread while alive and
/// restores the previous floating-point mode on drop. A no-op off x86-64.
///
/// Gradients of saturated units decay into the subnormal range, where x86
/// arithmetic is many times slower.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    #[allow(deprecated)]
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: SSE is part of the x86-64 baseline; only the FTZ and DAZ bits change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | FTZ_DAZ) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the mode read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution, independent of im2col/gemm.
    fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let [b, h, w, cin] = *x.dims() else {
            unreachable!()
        };
        let [kh, kw, _, cout] = *k.dims() else {
            unreachable!()
        };
        let (ph, pw) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
        let mut out = Tensor::zeros(vec![b, h, w, cout]);
        for s in 0..b {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for co in 0..cout {
                        let mut acc = bias.data()[co];
                        for di in 0..kh as isize {
                            for dj in 0..kw as isize {
                                let (si, sj) = (i + di - ph, j + dj - pw);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()
                                        [((s * h + si as usize) * w + sj as usize) * cin + ci];
                                    let kv = k.data()
                                        [((di as usize * kw + dj as usize) * cin + ci) * cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((s * h + i as usize) * w + j as usize) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn blur_reference(x: &Tensor<f64>) -> Tensor<f64> {
        let k = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        let [b, h, w, c] = *x.dims() else {
            unreachable!()
        };
        let mut out = Tensor::zeros(x.dims().to_vec());
        for s in 0..b {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for di in -1..=1isize {
                            for dj in -1..=1isize {
                                let (si, sj) = (i + di, j + dj);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += k[(di + 1) as usize][(dj + 1) as usize]
                                    * x.data()[((s * h + si as usize) * w + sj as usize) * c + ch];
                            }
                        }
                        out.data_mut()[((s * h + i as usize) * w + j as usize) * c + ch] =
                            acc / 16.0;
                    }
                }
            }
        }
        out
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let scale = b.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        a.max_abs_diff(b) / scale
    }

    #[test]
    fn conv_matches_nested_loop_reference_5x5x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = conv2d(&x.cast::<f32>(), &k.cast(), &b.cast())
            .unwrap()
            .cast::<f64>();
        assert!(rel_err(&got, &conv_reference(&x, &k, &b)) < 1e-5);
    }

    #[test]
    fn conv_and_blur_match_references_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..120 {
            let b = rng.random_range(1..3);
            let h = rng.random_range(1..7);
            let w = rng.random_range(1..7);
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let kh = [1, 3, 5][rng.random_range(0..3)];
            let kw = [1, 3][rng.random_range(0..2)];
            let x = random(&[b, h, w, cin], &mut rng);
            let k = random(&[kh, kw, cin, cout], &mut rng);
            let bias = random(&[cout], &mut rng);
            let got = conv2d(&x.cast::<f32>(), &k.cast(), &bias.cast())
                .unwrap()
                .cast::<f64>();
            assert!(rel_err(&got, &conv_reference(&x, &k, &bias)) < 1e-5);
            let got = blur(&x.cast::<f32>()).unwrap().cast::<f64>();
            assert!(rel_err(&got, &blur_reference(&x)) < 1e-5);
        }
    }

    #[test]
    fn conv_zero_input_zero_bias_gives_zero() {
        let x = Tensor::<f32>::zeros(vec![1, 7, 7, 1]);
        let k = Tensor::from_fn(vec![3, 3, 1, 4], |i| i as f32 - 3.0);
        let out = conv2d(&x, &k, &Tensor::zeros(vec![4])).unwrap();
        assert_eq!(out.dims(), &[1, 7, 7, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_selector_copies_channel() {
        let x = Tensor::from_fn(vec![1, 3, 3, 3], |i| i as f32);
        // one-hot over Cin selecting channel 2
        let k = Tensor::new(vec![1, 1, 3, 1], vec![0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        for p in 0..9 {
            assert_eq!(out.data()[p], x.data()[p * 3 + 2]);
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4, 2]);
        assert!(conv2d(
            &x,
            &Tensor::zeros(vec![2, 2, 2, 1]),
            &Tensor::zeros(vec![1])
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(vec![3, 3, 3, 1]),
            &Tensor::zeros(vec![1])
        )
        .is_err());
    }

    #[test]
    fn blur_impulse_gives_binomial_stencil() {
        let mut x = Tensor::<f32>::zeros(vec![1, 7, 7, 1]);
        x.data_mut()[3 * 7 + 3] = 1.0;
        let y = blur(&x).unwrap();
        let at = |i: usize, j: usize| y.data()[i * 7 + j];
        assert_eq!(at(3, 3), 4.0 / 16.0);
        assert_eq!(at(2, 3), 2.0 / 16.0);
        assert_eq!(at(3, 4), 2.0 / 16.0);
        assert_eq!(at(2, 2), 1.0 / 16.0);
        assert_eq!(at(4, 4), 1.0 / 16.0);
        assert_eq!(at(1, 3), 0.0);
        let total: f32 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-7);
    }

    #[test]
    fn blur_of_constant_is_constant_in_interior() {
        let x = Tensor::<f32>::full(vec![1, 6, 6, 2], 2.5);
        let y = blur(&x).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(y.data()[(i * 6 + j) * 2], 2.5);
            }
        }
    }

    fn shift_right(x: &Tensor<f32>, k: usize) -> Tensor<f32> {
        let [b, h, w, c] = *x.dims() else {
            unreachable!()
        };
        let mut out = Tensor::zeros(x.dims().to_vec());
        for s in 0..b {
            for i in 0..h {
                for j in k..w {
                    for ch in 0..c {
                        out.data_mut()[((s * h + i) * w + j) * c + ch] =
                            x.data()[((s * h + i) * w + j - k) * c + ch];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn blur_commutes_with_translation_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Tensor::<f32>::from_fn(vec![1, 9, 9, 2], |_| rng.random_range(-1.0..1.0));
            let a = blur(&shift_right(&x, 1)).unwrap();
            let b = shift_right(&blur(&x).unwrap(), 1);
            for i in 2..7 {
                for j in 2..7 {
                    for ch in 0..2 {
                        let p = (i * 9 + j) * 2 + ch;
                        assert_eq!(a.data()[p], b.data()[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bin(0, 8, 7), (0, 2));
        assert_eq!(adaptive_bin(6, 8, 7), (6, 8));
        assert_eq!(adaptive_bin(0, 32, 7), (0, 5));
        assert_eq!(adaptive_bin(6, 32, 7), (27, 32));
        for m in 1..=8 {
            for i in 0..m {
                let (s, e) = adaptive_bin(i, 32, m);
                assert!(s < e && e <= 32);
            }
        }
    }

    #[test]
    fn avg_pool2_averages_blocks() {
        let x = Tensor::<f32>::from_fn(vec![1, 2, 2, 1], |i| i as f32);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[1.5]);
        assert!(avg_pool2(&Tensor::<f32>::zeros(vec![1, 3, 2, 1])).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 3.5]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[-0.2, 0.0, 3.5]);
    }

    #[test]
    fn flush_denormals_is_scoped() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!((tiny * half).is_subnormal());
        {
            let _guard = FlushDenormals::new();
            let v = std::hint::black_box(tiny) * std::hint::black_box(half);
            if cfg!(target_arch = "x86_64") {
                assert_eq!(v, 0.0);
            }
        }
        assert!((std::hint::black_box(tiny) * std::hint::black_box(half)).is_subnormal());
    }
}
