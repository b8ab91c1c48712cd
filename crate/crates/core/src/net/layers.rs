//! Layer primitives with hand-written backward passes.
//!
//! Every feature map is a single channels-first sample; batching happens one
//! level up by accumulating gradients over samples.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor3};
use crate::resample::{bilinear_taps, Tap};

/// Upper bound on im2col buffer elements per tile.
const IM2COL_TILE_ELEMS: usize = 1 << 21;
/// Upper bound on transformed-input elements per Winograd chunk.
const WINOGRAD_CHUNK_ELEMS: usize = 1 << 21;
/// Below this many input channels the transforms cost more than the saved
/// multiplies.
const WINOGRAD_MIN_CHANNELS: usize = 8;

/// 2-D convolution with "same" padding for stride 1 and halving for
/// stride 2. Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Fan-in variance scaling (He normal), zero bias.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut self.weight {
            *w = T::lit(normal.sample(rng));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.padding();
        (
            (rows + 2 * p - span) / self.stride + 1,
            (cols + 2 * p - span) / self.stride + 1,
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Stride-1 3x3 kernels (dilated or not) run forward as Winograd
    /// F(4x4,3x3); the backward pass is the adjoint of the plain convolution.
    fn uses_winograd(&self) -> bool {
        T::WINOGRAD && self.winograd_shape()
    }

    fn winograd_shape(&self) -> bool {
        self.kernel == 3 && self.stride == 1 && self.in_channels >= WINOGRAD_MIN_CHANNELS
    }

    fn tile_rows(&self, out_cols: usize) -> usize {
        (IM2COL_TILE_ELEMS / (self.fan_in() * out_cols).max(1)).max(1)
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Tensor3<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_dims(x.rows, x.cols);
        let plane = oh * ow;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (co, &b) in self.bias.iter().enumerate() {
            out.channel_mut(co).iter_mut().for_each(|v| *v = b);
        }
        if self.is_pointwise() {
            unsafe {
                T::gemm(
                    self.out_channels, self.in_channels, plane, T::one(),
                    self.weight.as_ptr(), self.in_channels as isize, 1,
                    x.data.as_ptr(), plane as isize, 1,
                    T::one(), out.data.as_mut_ptr(), plane as isize, 1,
                );
            }
            return out;
        }
        if self.uses_winograd() {
            winograd_forward(self, x, &mut out);
            return out;
        }
        let k = self.fan_in();
        let step = self.tile_rows(ow);
        let mut col = Vec::new();
        for oy0 in (0..oh).step_by(step) {
            let oy1 = (oy0 + step).min(oh);
            let nt = (oy1 - oy0) * ow;
            im2col(self, x, oy0, oy1, ow, &mut col);
            unsafe {
                T::gemm(
                    self.out_channels, k, nt, T::one(),
                    self.weight.as_ptr(), k as isize, 1,
                    col.as_ptr(), nt as isize, 1,
                    T::one(), out.data.as_mut_ptr().add(oy0 * ow), plane as isize, 1,
                );
            }
        }
        out
    }

    /// Accumulates weight and bias gradients into `grad` and returns the
    /// input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor3<T>,
        dy: &Tensor3<T>,
        grad: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Tensor3<T>> {
        let (oh, ow) = self.output_dims(x.rows, x.cols);
        assert!(dy.channels == self.out_channels && dy.rows == oh && dy.cols == ow, "conv output grad shape");
        let plane = oh * ow;
        for co in 0..self.out_channels {
            grad.bias[co] += dy.channel(co).iter().copied().sum::<T>();
        }
        if self.is_pointwise() {
            let cin = self.in_channels;
            unsafe {
                T::gemm(
                    self.out_channels, plane, cin, T::one(),
                    dy.data.as_ptr(), plane as isize, 1,
                    x.data.as_ptr(), 1, plane as isize,
                    T::one(), grad.weight.as_mut_ptr(), cin as isize, 1,
                );
            }
            if !need_input_grad {
                return None;
            }
            let mut dx = Tensor3::zeros(cin, x.rows, x.cols);
            unsafe {
                T::gemm(
                    cin, self.out_channels, plane, T::one(),
                    self.weight.as_ptr(), 1, cin as isize,
                    dy.data.as_ptr(), plane as isize, 1,
                    T::zero(), dx.data.as_mut_ptr(), plane as isize, 1,
                );
            }
            return Some(dx);
        }
        let k = self.fan_in();
        let step = self.tile_rows(ow);
        let mut dx = need_input_grad.then(|| Tensor3::zeros(x.channels, x.rows, x.cols));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for oy0 in (0..oh).step_by(step) {
            let oy1 = (oy0 + step).min(oh);
            let nt = (oy1 - oy0) * ow;
            im2col(self, x, oy0, oy1, ow, &mut col);
            let dy_tile = unsafe { dy.data.as_ptr().add(oy0 * ow) };
            unsafe {
                T::gemm(
                    self.out_channels, nt, k, T::one(),
                    dy_tile, plane as isize, 1,
                    col.as_ptr(), 1, nt as isize,
                    T::one(), grad.weight.as_mut_ptr(), k as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(k * nt, T::zero());
                unsafe {
                    T::gemm(
                        k, self.out_channels, nt, T::one(),
                        self.weight.as_ptr(), 1, k as isize,
                        dy_tile, plane as isize, 1,
                        T::zero(), dcol.as_mut_ptr(), nt as isize, 1,
                    );
                }
                col2im(self, dx, oy0, oy1, ow, &dcol);
            }
        }
        dx
    }
}

/// Visits every valid (input column, output column) pair of one kernel tap
/// along a row: `f(ox, ix)`.
#[inline]
fn for_each_valid_col(ow: usize, in_cols: usize, stride: usize, offset: isize, mut f: impl FnMut(usize, usize)) {
    for ox in 0..ow {
        let ix = (ox * stride) as isize + offset;
        if ix >= 0 && (ix as usize) < in_cols {
            f(ox, ix as usize);
        }
    }
}

fn im2col<T: Real>(conv: &Conv2d<T>, x: &Tensor3<T>, oy0: usize, oy1: usize, ow: usize, col: &mut Vec<T>) {
    let nt = (oy1 - oy0) * ow;
    let kk = conv.kernel;
    col.clear();
    col.resize(conv.fan_in() * nt, T::zero());
    let p = conv.padding() as isize;
    let (s, d) = (conv.stride, conv.dilation);
    for ci in 0..conv.in_channels {
        let src = x.channel(ci);
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let dst = &mut col[row * nt..(row + 1) * nt];
                let xoff = (kx * d) as isize - p;
                for oy in oy0..oy1 {
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy as usize >= x.rows {
                        continue;
                    }
                    let line = &src[iy as usize * x.cols..(iy as usize + 1) * x.cols];
                    let out = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if s == 1 {
                        let lo = (-xoff).max(0) as usize;
                        let hi = ((x.cols as isize - xoff).min(ow as isize)).max(lo as isize) as usize;
                        if hi > lo {
                            let start = (lo as isize + xoff) as usize;
                            out[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                        }
                    } else {
                        for_each_valid_col(ow, x.cols, s, xoff, |ox, ix| out[ox] = line[ix]);
                    }
                }
            }
        }
    }
}

/// Outputs per tile side.
const TILE: usize = 4;
/// Inputs per tile side.
const SPAN: usize = TILE + 2;

/// Tile origins along one axis. A tile at `y0` produces outputs
/// `y0 + i d` for `i < TILE`, so origins walk each dilation phase in steps
/// of `TILE d`.
fn tile_starts(n: usize, d: usize) -> Vec<usize> {
    let mut starts = Vec::with_capacity(n / TILE + d);
    for base in (0..n).step_by(TILE * d) {
        starts.extend((base..base + d).filter(|&y| y < n));
    }
    starts
}

/// Column tile origins grouped by dilation phase: `(phase, tiles)`, with
/// origins `phase + TILE d k` for `k < tiles`.
fn phase_runs(n: usize, d: usize) -> Vec<(usize, usize)> {
    (0..d.min(n)).map(|p| (p, (n - p).div_ceil(TILE * d))).collect()
}

/// `B^T d` for interpolation points 0, 1, -1, 2, -2 and infinity.
#[inline(always)]
fn input_transform<T: Real>(d: [T; SPAN]) -> [T; SPAN] {
    let (two, four, five) = (T::lit(2.0), T::lit(4.0), T::lit(5.0));
    [
        four * d[0] - five * d[2] + d[4],
        -four * (d[1] + d[2]) + d[3] + d[4],
        four * (d[1] - d[2]) - d[3] + d[4],
        two * (d[3] - d[1]) - d[2] + d[4],
        two * (d[1] - d[3]) - d[2] + d[4],
        four * d[1] - five * d[3] + d[5],
    ]
}

/// `G g` for one 3-tap kernel.
fn kernel_transform<T: Real>(g: [T; 3]) -> [T; SPAN] {
    let c = |v: f64| T::lit(v);
    let (even, odd) = (g[0] + g[2], g[1]);
    [
        c(0.25) * g[0],
        c(-1.0 / 6.0) * (even + odd),
        c(-1.0 / 6.0) * (even - odd),
        c(1.0 / 24.0) * g[0] + c(1.0 / 12.0) * g[1] + c(1.0 / 6.0) * g[2],
        c(1.0 / 24.0) * g[0] - c(1.0 / 12.0) * g[1] + c(1.0 / 6.0) * g[2],
        g[2],
    ]
}

/// `A^T m`.
#[inline(always)]
fn output_transform<T: Real>(m: [T; SPAN]) -> [T; TILE] {
    let (two, four, eight) = (T::lit(2.0), T::lit(4.0), T::lit(8.0));
    let (p12, m12, p34, m34) = (m[1] + m[2], m[1] - m[2], m[3] + m[4], m[3] - m[4]);
    [m[0] + p12 + p34, m12 + two * m34, p12 + four * p34, m12 + eight * m34 + m[5]]
}

/// `G g G^T` for every kernel, stored as `SPAN^2` matrices `[out][in]`.
fn winograd_weights<T: Real>(conv: &Conv2d<T>) -> Vec<T> {
    let (cout, cin) = (conv.out_channels, conv.in_channels);
    let mut u = vec![T::zero(); SPAN * SPAN * cout * cin];
    for co in 0..cout {
        for ci in 0..cin {
            let g = &conv.weight[(co * cin + ci) * 9..][..9];
            let cols: [[T; SPAN]; 3] = std::array::from_fn(|kx| kernel_transform([g[kx], g[3 + kx], g[6 + kx]]));
            for i in 0..SPAN {
                let row = kernel_transform([cols[0][i], cols[1][i], cols[2][i]]);
                for (j, &v) in row.iter().enumerate() {
                    u[((SPAN * i + j) * cout + co) * cin + ci] = v;
                }
            }
        }
    }
    u
}

/// Stride-1 3x3 convolution as Winograd F(4x4,3x3). A dilated kernel is an
/// ordinary one on each dilation phase, so tiles gather inputs `d` apart.
/// `out` must already hold the bias.
fn winograd_forward<T: Real>(conv: &Conv2d<T>, x: &Tensor3<T>, out: &mut Tensor3<T>) {
    let d = conv.dilation;
    let (rows, cols) = (x.rows, x.cols);
    let (cin, cout) = (conv.in_channels, conv.out_channels);
    debug_assert_eq!((out.rows, out.cols), (rows, cols));
    let ys = tile_starts(rows, d);
    let runs = phase_runs(cols, d);
    let xs: Vec<usize> = runs.iter().flat_map(|&(p, n)| (0..n).map(move |k| p + TILE * d * k)).collect();
    let nx = xs.len();
    let u = winograd_weights(conv);
    let n_xi = SPAN * SPAN;
    let chunk_rows = (WINOGRAD_CHUNK_ELEMS / (n_xi * cin.max(cout) * nx)).max(1);
    // Padded column c + d holds input column c; the slack covers the last
    // tile's residue reads.
    let padded = cols + 2 * TILE * d;
    let zero_line = vec![T::zero(); cols];
    let mut lines = vec![T::zero(); SPAN * padded];
    let mut residues: [Vec<T>; TILE] = Default::default();
    let (mut v, mut m) = (Vec::new(), Vec::new());
    for chunk in ys.chunks(chunk_rows) {
        let tc = chunk.len() * nx;
        let (vs, ms) = (cin * tc, cout * tc);
        v.clear();
        v.resize(n_xi * vs, T::zero());
        for ci in 0..cin {
            let src = x.channel(ci);
            for (ry, &y0) in chunk.iter().enumerate() {
                let taps: [&[T]; SPAN] = std::array::from_fn(|i| {
                    match (y0 + i * d).checked_sub(d).filter(|&r| r < rows) {
                        Some(r) => &src[r * cols..(r + 1) * cols],
                        None => &zero_line[..],
                    }
                });
                // B^T along rows, on whole lines.
                for c in 0..cols {
                    let t = input_transform(std::array::from_fn(|i| taps[i][c]));
                    for (j, &val) in t.iter().enumerate() {
                        lines[j * padded + d + c] = val;
                    }
                }
                // B along columns. Within a phase, tap i of tile k sits at
                // residue i mod TILE, index k + i / TILE.
                let mut t0 = ci * tc + ry * nx;
                for &(p, n) in &runs {
                    for r in 0..SPAN {
                        let ln = &lines[r * padded..(r + 1) * padded];
                        for (q, res) in residues.iter_mut().enumerate() {
                            res.clear();
                            res.extend((0..=n).map(|k| ln[p + d * (TILE * k + q)]));
                        }
                        let tap = |i: usize| &residues[i % TILE][i / TILE..i / TILE + n];
                        let taps: [&[T]; SPAN] = std::array::from_fn(tap);
                        let base = SPAN * r * vs + t0;
                        for k in 0..n {
                            let t = input_transform(std::array::from_fn(|i| taps[i][k]));
                            for (j, &val) in t.iter().enumerate() {
                                v[base + j * vs + k] = val;
                            }
                        }
                    }
                    t0 += n;
                }
            }
        }
        m.clear();
        m.resize(n_xi * ms, T::zero());
        for xi in 0..n_xi {
            unsafe {
                T::gemm(
                    cout, cin, tc, T::one(),
                    u.as_ptr().add(xi * cout * cin), cin as isize, 1,
                    v.as_ptr().add(xi * vs), tc as isize, 1,
                    T::zero(), m.as_mut_ptr().add(xi * ms), tc as isize, 1,
                );
            }
        }
        for co in 0..cout {
            let dst = out.channel_mut(co);
            for (ry, &y0) in chunk.iter().enumerate() {
                for (tx, &x0) in xs.iter().enumerate() {
                    let t = co * tc + ry * nx + tx;
                    // Horizontal pass per transform row, then vertical per
                    // output column: tile[b][a] is output (y0 + a d, x0 + b d).
                    let half: [[T; TILE]; SPAN] =
                        std::array::from_fn(|i| output_transform(std::array::from_fn(|j| m[(SPAN * i + j) * ms + t])));
                    let tile: [[T; TILE]; TILE] = std::array::from_fn(|b| output_transform(std::array::from_fn(|i| half[i][b])));
                    for a in 0..TILE {
                        let y = y0 + a * d;
                        if y >= rows {
                            break;
                        }
                        for (b, column) in tile.iter().enumerate() {
                            let xx = x0 + b * d;
                            if xx >= cols {
                                break;
                            }
                            dst[y * cols + xx] += column[a];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(conv: &Conv2d<T>, dx: &mut Tensor3<T>, oy0: usize, oy1: usize, ow: usize, dcol: &[T]) {
    let nt = (oy1 - oy0) * ow;
    let kk = conv.kernel;
    let p = conv.padding() as isize;
    let (s, d) = (conv.stride, conv.dilation);
    let (rows, cols) = (dx.rows, dx.cols);
    for ci in 0..conv.in_channels {
        let dst = dx.channel_mut(ci);
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let src = &dcol[row * nt..(row + 1) * nt];
                let xoff = (kx * d) as isize - p;
                for oy in oy0..oy1 {
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy as usize >= rows {
                        continue;
                    }
                    let line = &mut dst[iy as usize * cols..(iy as usize + 1) * cols];
                    let g = &src[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    for_each_valid_col(ow, cols, s, xoff, |ox, ix| line[ix] += g[ox]);
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor3<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positive part of a ReLU output.
pub fn relu_backward<T: Real>(y: &Tensor3<T>, dy: &mut Tensor3<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Precomputed separable bilinear resize between two fixed spatial sizes.
#[derive(Debug, Clone)]
pub struct Resize {
    in_rows: usize,
    in_cols: usize,
    out_rows: usize,
    out_cols: usize,
    row_taps: Vec<Tap>,
    col_taps: Vec<Tap>,
}

impl Resize {
    pub fn new(in_rows: usize, in_cols: usize, out_rows: usize, out_cols: usize) -> Self {
        Self {
            in_rows,
            in_cols,
            out_rows,
            out_cols,
            row_taps: bilinear_taps(in_rows, out_rows),
            col_taps: bilinear_taps(in_cols, out_cols),
        }
    }

    pub fn forward<T: Real>(&self, x: &Tensor3<T>) -> Tensor3<T> {
        assert!(x.rows == self.in_rows && x.cols == self.in_cols, "resize input size");
        let mut out = Tensor3::zeros(x.channels, self.out_rows, self.out_cols);
        let mut tmp = vec![T::zero(); self.in_rows * self.out_cols];
        for c in 0..x.channels {
            let src = x.channel(c);
            for r in 0..self.in_rows {
                let line = &src[r * self.in_cols..(r + 1) * self.in_cols];
                let dst = &mut tmp[r * self.out_cols..(r + 1) * self.out_cols];
                for (o, t) in dst.iter_mut().zip(&self.col_taps) {
                    let f = T::lit(t.frac);
                    *o = line[t.lo] + (line[t.hi] - line[t.lo]) * f;
                }
            }
            let dst = out.channel_mut(c);
            for (r, t) in self.row_taps.iter().enumerate() {
                let f = T::lit(t.frac);
                let g = T::one() - f;
                let (lo, hi) = (t.lo * self.out_cols, t.hi * self.out_cols);
                for j in 0..self.out_cols {
                    dst[r * self.out_cols + j] = tmp[lo + j] * g + tmp[hi + j] * f;
                }
            }
        }
        out
    }

    /// Adjoint of [`Resize::forward`].
    pub fn backward<T: Real>(&self, dy: &Tensor3<T>) -> Tensor3<T> {
        assert!(dy.rows == self.out_rows && dy.cols == self.out_cols, "resize grad size");
        let mut dx = Tensor3::zeros(dy.channels, self.in_rows, self.in_cols);
        let mut tmp = vec![T::zero(); self.in_rows * self.out_cols];
        for c in 0..dy.channels {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let src = dy.channel(c);
            for (r, t) in self.row_taps.iter().enumerate() {
                let f = T::lit(t.frac);
                let g = T::one() - f;
                let (lo, hi) = (t.lo * self.out_cols, t.hi * self.out_cols);
                for j in 0..self.out_cols {
                    let v = src[r * self.out_cols + j];
                    tmp[lo + j] += v * g;
                    tmp[hi + j] += v * f;
                }
            }
            let dst = dx.channel_mut(c);
            for r in 0..self.in_rows {
                let line = &tmp[r * self.out_cols..(r + 1) * self.out_cols];
                let out = &mut dst[r * self.in_cols..(r + 1) * self.in_cols];
                for (&v, t) in line.iter().zip(&self.col_taps) {
                    let f = T::lit(t.frac);
                    out[t.lo] += v * (T::one() - f);
                    out[t.hi] += v * f;
                }
            }
        }
        dx
    }
}

/// Softmax across channels at every spatial site.
pub fn channel_softmax<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let plane = x.plane();
    let mut out = Tensor3::zeros(x.channels, x.rows, x.cols);
    let mut max = vec![T::neg_infinity(); plane];
    for c in 0..x.channels {
        for (m, &v) in max.iter_mut().zip(x.channel(c)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![T::zero(); plane];
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for p in 0..plane {
            let e = (src[p] - max[p]).exp();
            dst[p] = e;
            sum[p] += e;
        }
    }
    for c in 0..x.channels {
        let dst = out.channel_mut(c);
        for p in 0..plane {
            dst[p] = dst[p] / sum[p];
        }
    }
    out
}

/// Backward of [`channel_softmax`] given its output `s`.
pub fn channel_softmax_backward<T: Real>(s: &Tensor3<T>, ds: &Tensor3<T>) -> Tensor3<T> {
    let plane = s.plane();
    let mut dot = vec![T::zero(); plane];
    for c in 0..s.channels {
        for ((d, &a), &b) in dot.iter_mut().zip(s.channel(c)).zip(ds.channel(c)) {
            *d += a * b;
        }
    }
    let mut dx = Tensor3::zeros(s.channels, s.rows, s.cols);
    for c in 0..s.channels {
        let (sc, dsc) = (s.channel(c), ds.channel(c));
        let out = dx.channel_mut(c);
        for p in 0..plane {
            out[p] = sc[p] * (dsc[p] - dot[p]);
        }
    }
    dx
}

/// Attention fusion `f_S ⊗ (1 + softmax_c(f_D))`. Returns the fused map and
/// the softmax weights needed for the backward pass.
pub fn attention_fuse<T: Real>(f_d: &Tensor3<T>, f_s: &Tensor3<T>) -> (Tensor3<T>, Tensor3<T>) {
    assert!(f_d.same_shape(f_s), "attention inputs must align");
    let s = channel_softmax(f_d);
    let mut out = f_s.clone();
    for (o, &w) in out.data.iter_mut().zip(&s.data) {
        *o *= T::one() + w;
    }
    (out, s)
}

/// Returns `(d f_D, d f_S)`.
pub fn attention_backward<T: Real>(
    f_s: &Tensor3<T>,
    softmax: &Tensor3<T>,
    dout: &Tensor3<T>,
) -> (Tensor3<T>, Tensor3<T>) {
    let mut df_s = dout.clone();
    for (g, &w) in df_s.data.iter_mut().zip(&softmax.data) {
        *g *= T::one() + w;
    }
    let mut dw = dout.clone();
    for (g, &v) in dw.data.iter_mut().zip(&f_s.data) {
        *g *= v;
    }
    (channel_softmax_backward(softmax, &dw), df_s)
}

pub fn sigmoid_inplace<T: Real>(x: &mut Tensor3<T>) {
    for v in &mut x.data {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

/// Stacks two maps with equal spatial size along channels.
pub fn concat<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert!(a.rows == b.rows && a.cols == b.cols, "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3::from_vec(a.channels + b.channels, a.rows, a.cols, data)
}

/// Splits a concatenated gradient back into its two parts.
pub fn split<T: Real>(x: &Tensor3<T>, first_channels: usize) -> (Tensor3<T>, Tensor3<T>) {
    let cut = first_channels * x.plane();
    (
        Tensor3::from_vec(first_channels, x.rows, x.cols, x.data[..cut].to_vec()),
        Tensor3::from_vec(x.channels - first_channels, x.rows, x.cols, x.data[cut..].to_vec()),
    )
}
