//! Numerical kernels behind the warping generator and the temporal metrics.
//!
//! Every batched kernel works on `(N, C, H, W)` arrays in `f64`. Each forward
//! kernel has a matching `*_backward` returning the analytic gradients, which
//! the autograd layer in [`crate::autograd`] wires into the tape.
//!
//! Conventions:
//! * Out-of-range bilinear samples read zero (zero padding).
//! * Convolutions zero-pad and run at stride 1 unless the geometry says otherwise.
//! * Deformable offsets for tap `k` (row-major over the `K x K` stencil) live in
//!   channels `(2k, 2k + 1)` as `(dx, dy)` in feature-grid pixels.
//! * Flows are backward-warping fields: output pixel `p` reads the source at
//!   `p + flow(p)`, with channel 0 horizontal and channel 1 vertical.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut2};

use crate::error::{Error, Result};

/// Target size (in elements) of one im2col tile. Bounds scratch memory at
/// full resolution.
const TILE_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        ConvGeometry {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    /// 3x3 stencil with taps spaced `dilation` apart, padded to keep H x W.
    pub fn dilated(dilation: usize) -> Self {
        ConvGeometry {
            kernel: 3,
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Spatial layout of one im2col problem: a `channels x in_h x in_w` plane set
/// sampled on an `out_h x out_w` grid.
#[derive(Debug, Clone, Copy)]
struct Im2col {
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Im2col {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel * self.geom.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn tile_len(&self) -> usize {
        (TILE_ELEMS / self.rows().max(1)).clamp(1, self.positions().max(1))
    }

    /// Input coordinate read by tap `(ky, kx)` for output position `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let g = &self.geom;
        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some(iy as usize * self.in_w + ix as usize)
        }
    }

    fn fill(&self, x: &[f64], start: usize, len: usize, cols: &mut [f64]) {
        let k = self.geom.kernel;
        let plane = self.in_h * self.in_w;
        for c in 0..self.channels {
            let xc = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    for (j, slot) in dst.iter_mut().enumerate() {
                        let pos = start + j;
                        let (oy, ox) = (pos / self.out_w, pos % self.out_w);
                        *slot = match self.source(oy, ox, ky, kx) {
                            Some(i) => xc[i],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }

    fn scatter(&self, cols: &[f64], start: usize, len: usize, dx: &mut [f64]) {
        let k = self.geom.kernel;
        let plane = self.in_h * self.in_w;
        for c in 0..self.channels {
            let dxc = &mut dx[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * len..(row + 1) * len];
                    for (j, &v) in src.iter().enumerate() {
                        let pos = start + j;
                        let (oy, ox) = (pos / self.out_w, pos % self.out_w);
                        if let Some(i) = self.source(oy, ox, ky, kx) {
                            dxc[i] += v;
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix(w: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (o, i, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((o, i * kh * kw))
        .expect("weights are contiguous")
}

fn sample_slice(a: &Array4<f64>, n: usize) -> &[f64] {
    let (_, c, h, w) = a.dim();
    let len = c * h * w;
    &a.as_slice().expect("contiguous tensor")[n * len..(n + 1) * len]
}

fn sample_slice_mut(a: &mut Array4<f64>, n: usize) -> &mut [f64] {
    let (_, c, h, w) = a.dim();
    let len = c * h * w;
    &mut a.as_slice_mut().expect("contiguous tensor")[n * len..(n + 1) * len]
}

fn contiguous(a: &Array4<f64>) -> std::borrow::Cow<'_, Array4<f64>> {
    if a.is_standard_layout() {
        std::borrow::Cow::Borrowed(a)
    } else {
        std::borrow::Cow::Owned(a.as_standard_layout().into_owned())
    }
}

fn check_bias(op: &'static str, bias: Option<&[f64]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

/// Standard (optionally strided / dilated) 2-D convolution.
///
/// `weights` is `(C_out, C_in, K, K)`.
pub fn conv2d(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    bias: Option<&[f64]>,
    geom: ConvGeometry,
) -> Result<Array4<f64>> {
    let (n, c_in, h, w) = input.dim();
    let (c_out, wc_in, kh, kw) = weights.dim();
    if wc_in != c_in || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, weights are {:?}", weights.dim()),
        ));
    }
    check_bias("conv2d", bias, c_out)?;
    let (out_h, out_w) = match (geom.out_size(h), geom.out_size(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input too small for {geom:?}"),
            ))
        }
    };
    let input = contiguous(input);
    let weights = contiguous(weights);
    let layout = Im2col {
        channels: c_in,
        in_h: h,
        in_w: w,
        out_h,
        out_w,
        geom,
    };
    let wm = weight_matrix(&weights);
    let mut out = Array4::<f64>::zeros((n, c_out, out_h, out_w));
    let tile = layout.tile_len();
    let mut cols = vec![0.0; layout.rows() * tile];
    for b in 0..n {
        let x = sample_slice(&input, b);
        let out_b = sample_slice_mut(&mut out, b);
        let mut out_m = ArrayViewMut2::from_shape((c_out, layout.positions()), out_b).unwrap();
        let mut start = 0;
        while start < layout.positions() {
            let len = tile.min(layout.positions() - start);
            let buf = &mut cols[..layout.rows() * len];
            layout.fill(x, start, len, buf);
            let cm = ArrayView2::from_shape((layout.rows(), len), &*buf).unwrap();
            let mut dst = out_m.slice_mut(s![.., start..start + len]);
            general_mat_mul(1.0, &wm, &cm, 0.0, &mut dst);
            start += len;
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                out_m.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weights, d_bias)`. `d_input` is only
/// computed when `need_input` is set.
pub fn conv2d_backward(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    grad_out: &Array4<f64>,
    geom: ConvGeometry,
    need_input: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Vec<f64>) {
    let (n, c_in, h, w) = input.dim();
    let (_, c_out, out_h, out_w) = grad_out.dim();
    let input = contiguous(input);
    let weights = contiguous(weights);
    let grad_out = contiguous(grad_out);
    let layout = Im2col {
        channels: c_in,
        in_h: h,
        in_w: w,
        out_h,
        out_w,
        geom,
    };
    let rows = layout.rows();
    let wm = weight_matrix(&weights);
    let mut dw = Array2::<f64>::zeros((c_out, rows));
    let mut dx = need_input.then(|| Array4::<f64>::zeros(input.dim()));
    let mut db = vec![0.0; c_out];
    let tile = layout.tile_len();
    let mut cols = vec![0.0; rows * tile];
    let mut dcols = vec![0.0; rows * tile];
    for b in 0..n {
        let x = sample_slice(&input, b);
        let gm = ArrayView2::from_shape((c_out, layout.positions()), sample_slice(&grad_out, b))
            .unwrap();
        for (co, row) in gm.rows().into_iter().enumerate() {
            db[co] += row.sum();
        }
        let mut start = 0;
        while start < layout.positions() {
            let len = tile.min(layout.positions() - start);
            let g_tile = gm.slice(s![.., start..start + len]);
            let buf = &mut cols[..rows * len];
            layout.fill(x, start, len, buf);
            let cm = ArrayView2::from_shape((rows, len), &*buf).unwrap();
            general_mat_mul(1.0, &g_tile, &cm.t(), 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dbuf = &mut dcols[..rows * len];
                let mut dm = ArrayViewMut2::from_shape((rows, len), &mut *dbuf).unwrap();
                general_mat_mul(1.0, &wm.t(), &g_tile, 0.0, &mut dm);
                layout.scatter(dbuf, start, len, sample_slice_mut(dx, b));
            }
            start += len;
        }
    }
    let dw = dw
        .into_shape_with_order(weights.dim())
        .expect("weight gradient reshape");
    (dx, dw, db)
}

/// Dilated 3x3 convolution, stride 1, zero padding `dilation` so H x W is preserved.
pub fn dilated_conv(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    bias: Option<&[f64]>,
    dilation: usize,
) -> Result<Array4<f64>> {
    if dilation == 0 {
        return Err(Error::shape("dilated_conv", "dilation must be >= 1"));
    }
    if weights.dim().2 != 3 || weights.dim().3 != 3 {
        return Err(Error::shape(
            "dilated_conv",
            format!("expected 3x3 weights, got {:?}", weights.dim()),
        ));
    }
    conv2d(input, weights, bias, ConvGeometry::dilated(dilation))
}

/// Output size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, geom: ConvGeometry, output_padding: usize) -> usize {
    (input - 1) * geom.stride + geom.dilation * (geom.kernel - 1) + output_padding + 1
        - 2 * geom.padding
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same geometry).
///
/// `weights` is `(C_in, C_out, K, K)`.
pub fn conv_transpose2d(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    bias: Option<&[f64]>,
    geom: ConvGeometry,
    output_padding: usize,
) -> Result<Array4<f64>> {
    let (n, c_in, h, w) = input.dim();
    let (wc_in, c_out, kh, kw) = weights.dim();
    if wc_in != c_in || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {c_in} channels, weights are {:?}", weights.dim()),
        ));
    }
    if output_padding >= geom.stride.max(geom.dilation) {
        return Err(Error::shape(
            "conv_transpose2d",
            "output padding must be smaller than stride or dilation",
        ));
    }
    check_bias("conv_transpose2d", bias, c_out)?;
    let out_h = conv_transpose_out_size(h, geom, output_padding);
    let out_w = conv_transpose_out_size(w, geom, output_padding);
    let input = contiguous(input);
    let weights = contiguous(weights);
    // Conv geometry running from the (larger) output back onto the input grid.
    let layout = Im2col {
        channels: c_out,
        in_h: out_h,
        in_w: out_w,
        out_h: h,
        out_w: w,
        geom,
    };
    let rows = layout.rows();
    let wm = weight_matrix(&weights);
    let mut out = Array4::<f64>::zeros((n, c_out, out_h, out_w));
    let tile = layout.tile_len();
    let mut cols = vec![0.0; rows * tile];
    for b in 0..n {
        let xm = ArrayView2::from_shape((c_in, h * w), sample_slice(&input, b)).unwrap();
        let mut start = 0;
        while start < h * w {
            let len = tile.min(h * w - start);
            let buf = &mut cols[..rows * len];
            let mut cm = ArrayViewMut2::from_shape((rows, len), &mut *buf).unwrap();
            general_mat_mul(1.0, &wm.t(), &xm.slice(s![.., start..start + len]), 0.0, &mut cm);
            layout.scatter(buf, start, len, sample_slice_mut(&mut out, b));
            start += len;
        }
        if let Some(bias) = bias {
            let plane = out_h * out_w;
            let ob = sample_slice_mut(&mut out, b);
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_weights, d_bias)`.
pub fn conv_transpose2d_backward(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    grad_out: &Array4<f64>,
    geom: ConvGeometry,
    need_input: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Vec<f64>) {
    let (n, c_in, h, w) = input.dim();
    let (_, c_out, out_h, out_w) = grad_out.dim();
    let input = contiguous(input);
    let weights = contiguous(weights);
    let grad_out = contiguous(grad_out);
    let layout = Im2col {
        channels: c_out,
        in_h: out_h,
        in_w: out_w,
        out_h: h,
        out_w: w,
        geom,
    };
    let rows = layout.rows();
    let wm = weight_matrix(&weights);
    let mut dw = Array2::<f64>::zeros((c_in, rows));
    let mut dx = need_input.then(|| Array4::<f64>::zeros(input.dim()));
    let mut db = vec![0.0; c_out];
    let plane = out_h * out_w;
    let tile = layout.tile_len();
    let mut cols = vec![0.0; rows * tile];
    for b in 0..n {
        let g = sample_slice(&grad_out, b);
        for (co, slot) in db.iter_mut().enumerate() {
            *slot += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
        let xm = ArrayView2::from_shape((c_in, h * w), sample_slice(&input, b)).unwrap();
        let mut dxm = dx
            .as_mut()
            .map(|d| ArrayViewMut2::from_shape((c_in, h * w), sample_slice_mut(d, b)).unwrap());
        let mut start = 0;
        while start < h * w {
            let len = tile.min(h * w - start);
            let buf = &mut cols[..rows * len];
            layout.fill(g, start, len, buf);
            let cm = ArrayView2::from_shape((rows, len), &*buf).unwrap();
            general_mat_mul(1.0, &xm.slice(s![.., start..start + len]), &cm.t(), 1.0, &mut dw);
            if let Some(dxm) = dxm.as_mut() {
                let mut dst = dxm.slice_mut(s![.., start..start + len]);
                general_mat_mul(1.0, &wm, &cm, 0.0, &mut dst);
            }
            start += len;
        }
    }
    let dw = dw
        .into_shape_with_order(weights.dim())
        .expect("weight gradient reshape");
    (dx, dw, db)
}

/// Bilinear read of one plane with zero padding outside `[0, w-1] x [0, h-1]`.
#[inline]
pub(crate) fn bilinear_plane(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = x - x0;
    let ay = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1);
    let v10 = at(y0 + 1, x0);
    let v11 = at(y0 + 1, x0 + 1);
    (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)
}

/// Corner indices and weights of a bilinear read, for gradient scatter.
#[derive(Debug, Clone, Copy)]
struct BilinearStencil {
    x0: isize,
    y0: isize,
    ax: f64,
    ay: f64,
}

impl BilinearStencil {
    #[inline]
    fn new(x: f64, y: f64) -> Self {
        let fx = x.floor();
        let fy = y.floor();
        BilinearStencil {
            x0: fx as isize,
            y0: fy as isize,
            ax: x - fx,
            ay: y - fy,
        }
    }

    /// `(flat index, weight)` for each in-range corner.
    #[inline]
    fn corners(&self, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
        let idx = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                None
            } else {
                Some(yy as usize * w + xx as usize)
            }
        };
        let (ax, ay) = (self.ax, self.ay);
        [
            (idx(self.y0, self.x0), (1.0 - ay) * (1.0 - ax)),
            (idx(self.y0, self.x0 + 1), (1.0 - ay) * ax),
            (idx(self.y0 + 1, self.x0), ay * (1.0 - ax)),
            (idx(self.y0 + 1, self.x0 + 1), ay * ax),
        ]
    }

    /// Partial derivatives of the sampled value w.r.t. the sample coordinates.
    #[inline]
    fn coord_grad(&self, plane: &[f64], h: usize, w: usize) -> (f64, f64) {
        let [c00, c01, c10, c11] = self.corners(h, w);
        let v = |c: (Option<usize>, f64)| c.0.map_or(0.0, |i| plane[i]);
        let (v00, v01, v10, v11) = (v(c00), v(c01), v(c10), v(c11));
        let (ax, ay) = (self.ax, self.ay);
        let dx = (1.0 - ay) * (v01 - v00) + ay * (v11 - v10);
        let dy = (1.0 - ax) * (v10 - v00) + ax * (v11 - v01);
        (dx, dy)
    }
}

/// Bilinear interpolation of a `(C, H, W)` map at continuous position `(x, y)`.
///
/// Corners outside the grid contribute zero, so the function is total.
pub fn bilinear_sample(map: ArrayView3<'_, f64>, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = map.dim();
    let map = map.as_standard_layout();
    let data = map.as_slice().unwrap();
    (0..c)
        .map(|ch| bilinear_plane(&data[ch * h * w..(ch + 1) * h * w], h, w, x, y))
        .collect()
}

fn deform_shapes(
    input: &Array4<f64>,
    offsets: &Array4<f64>,
    weights: &Array4<f64>,
) -> Result<usize> {
    let (n, c_in, h, w) = input.dim();
    let (_, wc_in, kh, kw) = weights.dim();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "deformable_conv",
            format!("kernel must be square and odd, got {kh}x{kw}"),
        ));
    }
    if wc_in != c_in {
        return Err(Error::shape(
            "deformable_conv",
            format!("input has {c_in} channels, weights expect {wc_in}"),
        ));
    }
    let expected = (n, 2 * kh * kw, h, w);
    if offsets.dim() != expected {
        return Err(Error::shape(
            "deformable_conv",
            format!("offsets are {:?}, expected {expected:?}", offsets.dim()),
        ));
    }
    Ok(kh)
}

/// Position read by stencil tap `(ky, kx)` for output pixel `pos`.
#[inline]
fn deform_position(
    off: &[f64],
    plane: usize,
    k: usize,
    ky: usize,
    kx: usize,
    w: usize,
    pos: usize,
) -> (f64, f64) {
    let tap = ky * k + kx;
    let half = (k / 2) as f64;
    let (oy, ox) = ((pos / w) as f64, (pos % w) as f64);
    let dx = off[2 * tap * plane + pos];
    let dy = off[(2 * tap + 1) * plane + pos];
    (ox + kx as f64 - half + dx, oy + ky as f64 - half + dy)
}

/// Deformable convolution (offsets only, no modulation), stride 1, H x W preserved.
///
/// `out(p, o) = bias(o) + sum_k sum_c weights(o, c, k) * x_c(p + grid(k) + offset_k(p))`
/// with `offsets` shaped `(N, 2 K^2, H, W)` and `weights` `(C_out, C_in, K, K)`.
pub fn deformable_conv(
    input: &Array4<f64>,
    offsets: &Array4<f64>,
    weights: &Array4<f64>,
    bias: Option<&[f64]>,
) -> Result<Array4<f64>> {
    let k = deform_shapes(input, offsets, weights)?;
    let (n, c_in, h, w) = input.dim();
    let c_out = weights.dim().0;
    check_bias("deformable_conv", bias, c_out)?;
    let input = contiguous(input);
    let offsets = contiguous(offsets);
    let weights = contiguous(weights);
    let wm = weight_matrix(&weights);
    let plane = h * w;
    let rows = c_in * k * k;
    let tile = (TILE_ELEMS / rows).clamp(1, plane.max(1));
    let mut cols = vec![0.0; rows * tile];
    let mut out = Array4::<f64>::zeros((n, c_out, h, w));
    for b in 0..n {
        let x = sample_slice(&input, b);
        let off = sample_slice(&offsets, b);
        let out_b = sample_slice_mut(&mut out, b);
        let mut out_m = ArrayViewMut2::from_shape((c_out, plane), out_b).unwrap();
        let mut start = 0;
        while start < plane {
            let len = tile.min(plane - start);
            let buf = &mut cols[..rows * len];
            for ky in 0..k {
                for kx in 0..k {
                    for j in 0..len {
                        let (sx, sy) = deform_position(off, plane, k, ky, kx, w, start + j);
                        for c in 0..c_in {
                            let row = (c * k + ky) * k + kx;
                            buf[row * len + j] =
                                bilinear_plane(&x[c * plane..(c + 1) * plane], h, w, sx, sy);
                        }
                    }
                }
            }
            let cm = ArrayView2::from_shape((rows, len), &*buf).unwrap();
            let mut dst = out_m.slice_mut(s![.., start..start + len]);
            general_mat_mul(1.0, &wm, &cm, 0.0, &mut dst);
            start += len;
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                out_m.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`deformable_conv`].
pub struct DeformableGrads {
    pub input: Option<Array4<f64>>,
    pub offsets: Option<Array4<f64>>,
    pub weights: Array4<f64>,
    pub bias: Vec<f64>,
}

pub fn deformable_conv_backward(
    input: &Array4<f64>,
    offsets: &Array4<f64>,
    weights: &Array4<f64>,
    grad_out: &Array4<f64>,
    need_input: bool,
    need_offsets: bool,
) -> DeformableGrads {
    let (n, c_in, h, w) = input.dim();
    let (c_out, _, k, _) = weights.dim();
    let input = contiguous(input);
    let offsets = contiguous(offsets);
    let weights = contiguous(weights);
    let grad_out = contiguous(grad_out);
    let wm = weight_matrix(&weights);
    let plane = h * w;
    let rows = c_in * k * k;
    let tile = (TILE_ELEMS / rows).clamp(1, plane.max(1));
    let mut cols = vec![0.0; rows * tile];
    let mut dcols = vec![0.0; rows * tile];
    let mut dw = Array2::<f64>::zeros((c_out, rows));
    let mut db = vec![0.0; c_out];
    let mut dx = need_input.then(|| Array4::<f64>::zeros(input.dim()));
    let mut doff = need_offsets.then(|| Array4::<f64>::zeros(offsets.dim()));
    for b in 0..n {
        let x = sample_slice(&input, b);
        let off = sample_slice(&offsets, b);
        let gm = ArrayView2::from_shape((c_out, plane), sample_slice(&grad_out, b)).unwrap();
        for (co, row) in gm.rows().into_iter().enumerate() {
            db[co] += row.sum();
        }
        let mut start = 0;
        while start < plane {
            let len = tile.min(plane - start);
            let g_tile = gm.slice(s![.., start..start + len]);
            let buf = &mut cols[..rows * len];
            for ky in 0..k {
                for kx in 0..k {
                    for j in 0..len {
                        let (sx, sy) = deform_position(off, plane, k, ky, kx, w, start + j);
                        for c in 0..c_in {
                            let row = (c * k + ky) * k + kx;
                            buf[row * len + j] =
                                bilinear_plane(&x[c * plane..(c + 1) * plane], h, w, sx, sy);
                        }
                    }
                }
            }
            let cm = ArrayView2::from_shape((rows, len), &*buf).unwrap();
            general_mat_mul(1.0, &g_tile, &cm.t(), 1.0, &mut dw);
            if dx.is_none() && doff.is_none() {
                start += len;
                continue;
            }
            let dbuf = &mut dcols[..rows * len];
            {
                let mut dm = ArrayViewMut2::from_shape((rows, len), &mut *dbuf).unwrap();
                general_mat_mul(1.0, &wm.t(), &g_tile, 0.0, &mut dm);
            }
            let mut dx_b = dx.as_mut().map(|d| sample_slice_mut(d, b));
            let mut doff_b = doff.as_mut().map(|d| sample_slice_mut(d, b));
            for ky in 0..k {
                for kx in 0..k {
                    let tap = ky * k + kx;
                    for j in 0..len {
                        let pos = start + j;
                        let (sx, sy) = deform_position(off, plane, k, ky, kx, w, pos);
                        let stencil = BilinearStencil::new(sx, sy);
                        let corners = stencil.corners(h, w);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for c in 0..c_in {
                            let row = (c * k + ky) * k + kx;
                            let g = dbuf[row * len + j];
                            if g == 0.0 {
                                continue;
                            }
                            if let Some(dxb) = dx_b.as_deref_mut() {
                                for (idx, wt) in corners {
                                    if let Some(i) = idx {
                                        dxb[c * plane + i] += g * wt;
                                    }
                                }
                            }
                            if doff_b.is_some() {
                                let (px, py) =
                                    stencil.coord_grad(&x[c * plane..(c + 1) * plane], h, w);
                                gx += g * px;
                                gy += g * py;
                            }
                        }
                        if let Some(db) = doff_b.as_deref_mut() {
                            db[2 * tap * plane + pos] += gx;
                            db[(2 * tap + 1) * plane + pos] += gy;
                        }
                    }
                }
            }
            start += len;
        }
    }
    DeformableGrads {
        input: dx,
        offsets: doff,
        weights: dw
            .into_shape_with_order(weights.dim())
            .expect("weight gradient reshape"),
        bias: db,
    }
}

fn warp_shapes(image: &Array4<f64>, flow: &Array4<f64>) -> Result<()> {
    let (n, _, h, w) = image.dim();
    if flow.dim() != (n, 2, h, w) {
        return Err(Error::shape(
            "flow_warp",
            format!("image is {:?}, flow is {:?}", image.dim(), flow.dim()),
        ));
    }
    Ok(())
}

/// Backward warp: `out(p) = bilinear(image, p + flow(p))`, zero outside the frame.
///
/// `flow` is `(N, 2, H, W)` with channel 0 = horizontal displacement.
pub fn flow_warp(image: &Array4<f64>, flow: &Array4<f64>) -> Result<Array4<f64>> {
    warp_shapes(image, flow)?;
    let (n, c, h, w) = image.dim();
    let image = contiguous(image);
    let flow = contiguous(flow);
    let plane = h * w;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        let x = sample_slice(&image, b);
        let f = sample_slice(&flow, b);
        let o = sample_slice_mut(&mut out, b);
        for pos in 0..plane {
            let sx = (pos % w) as f64 + f[pos];
            let sy = (pos / w) as f64 + f[plane + pos];
            for ch in 0..c {
                o[ch * plane + pos] = bilinear_plane(&x[ch * plane..(ch + 1) * plane], h, w, sx, sy);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`flow_warp`]: `(d_image, d_flow)`.
pub fn flow_warp_backward(
    image: &Array4<f64>,
    flow: &Array4<f64>,
    grad_out: &Array4<f64>,
    need_image: bool,
    need_flow: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (n, c, h, w) = image.dim();
    let image = contiguous(image);
    let flow = contiguous(flow);
    let grad_out = contiguous(grad_out);
    let plane = h * w;
    let mut dimg = need_image.then(|| Array4::<f64>::zeros(image.dim()));
    let mut dflow = need_flow.then(|| Array4::<f64>::zeros(flow.dim()));
    for b in 0..n {
        let x = sample_slice(&image, b);
        let f = sample_slice(&flow, b);
        let g = sample_slice(&grad_out, b);
        let mut di = dimg.as_mut().map(|d| sample_slice_mut(d, b));
        let mut df = dflow.as_mut().map(|d| sample_slice_mut(d, b));
        for pos in 0..plane {
            let sx = (pos % w) as f64 + f[pos];
            let sy = (pos / w) as f64 + f[plane + pos];
            let stencil = BilinearStencil::new(sx, sy);
            let corners = stencil.corners(h, w);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let gv = g[ch * plane + pos];
                if let Some(di) = di.as_deref_mut() {
                    for (idx, wt) in corners {
                        if let Some(i) = idx {
                            di[ch * plane + i] += gv * wt;
                        }
                    }
                }
                if df.is_some() {
                    let (px, py) = stencil.coord_grad(&x[ch * plane..(ch + 1) * plane], h, w);
                    gx += gv * px;
                    gy += gv * py;
                }
            }
            if let Some(df) = df.as_deref_mut() {
                df[pos] += gx;
                df[plane + pos] += gy;
            }
        }
    }
    (dimg, dflow)
}

/// Dense optical flow stored as `(H, W, 2)` `f32`, matching the `.flo` payload.
///
/// Backward-warping convention: pixel `p` of the frame the flow is attached to
/// corresponds to `p + flow(p)` in the other frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array3<f32>,
}

impl FlowField {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 2 {
            return Err(Error::shape(
                "FlowField",
                format!("expected H x W x 2, got {:?}", data.dim()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("flow field contains non-finite values".into()));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Array3::zeros((h, w, 2)),
        }
    }

    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Self {
        let mut data = Array3::zeros((h, w, 2));
        data.slice_mut(s![.., .., 0]).fill(u);
        data.slice_mut(s![.., .., 1]).fill(v);
        FlowField { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data[[y, x, 0]] as f64, self.data[[y, x, 1]] as f64)
    }

    /// `(1, 2, H, W)` view for the batched kernels.
    pub fn to_batch(&self) -> Array4<f64> {
        let (h, w, _) = self.data.dim();
        Array4::from_shape_fn((1, 2, h, w), |(_, c, y, x)| self.data[[y, x, c]] as f64)
    }

    /// Resamples to `h x w` (pixel-center aligned, edge-clamped bilinear) and
    /// rescales the vectors to the new pixel units.
    pub fn resized(&self, h: usize, w: usize) -> FlowField {
        let (sh, sw, _) = self.data.dim();
        if (sh, sw) == (h, w) {
            return self.clone();
        }
        let (fy, fx) = (sh as f64 / h as f64, sw as f64 / w as f64);
        let src = |len: usize, f: f64, i: usize| {
            let s = ((i as f64 + 0.5) * f - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), s - i0 as f64)
        };
        let mut data = Array3::zeros((h, w, 2));
        for y in 0..h {
            let (y0, y1, ty) = src(sh, fy, y);
            for x in 0..w {
                let (x0, x1, tx) = src(sw, fx, x);
                for c in 0..2 {
                    let v = |yy: usize, xx: usize| self.data[[yy, xx, c]] as f64;
                    let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                    let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                    let scale = if c == 0 { 1.0 / fx } else { 1.0 / fy };
                    data[[y, x, c]] = ((top * (1.0 - ty) + bot * ty) * scale) as f32;
                }
            }
        }
        FlowField { data }
    }
}

/// Binary non-occlusion mask: 1 = reliable pixel, 0 = occluded / motion boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub data: Array2<u8>,
}

impl OcclusionMask {
    pub fn full(h: usize, w: usize) -> Self {
        OcclusionMask {
            data: Array2::from_elem((h, w), 1),
        }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        OcclusionMask {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }
}

/// Thresholds of the forward-backward consistency test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionThresholds {
    pub consistency_rel: f64,
    pub consistency_abs: f64,
    pub motion_rel: f64,
    pub motion_abs: f64,
}

impl Default for OcclusionThresholds {
    fn default() -> Self {
        OcclusionThresholds {
            consistency_rel: 0.01,
            consistency_abs: 0.5,
            motion_rel: 0.01,
            motion_abs: 0.002,
        }
    }
}

impl OcclusionThresholds {
    /// True when flow `w` and the back-projected reverse flow `w_hat` disagree.
    #[inline]
    pub fn inconsistent(&self, w: (f64, f64), w_hat: (f64, f64)) -> bool {
        let sum = (w.0 + w_hat.0).powi(2) + (w.1 + w_hat.1).powi(2);
        let mags = w.0 * w.0 + w.1 * w.1 + w_hat.0 * w_hat.0 + w_hat.1 * w_hat.1;
        sum > self.consistency_rel * mags + self.consistency_abs
    }

    /// True at motion boundaries: squared flow gradient exceeds the motion bound.
    #[inline]
    pub fn motion_boundary(&self, w: (f64, f64), grad_sq: f64) -> bool {
        grad_sq > self.motion_rel * (w.0 * w.0 + w.1 * w.1) + self.motion_abs
    }
}

/// Squared spatial gradient `|grad u|^2 + |grad v|^2` of a flow at `(y, x)`,
/// using forward differences (zero on the last row / column).
pub fn flow_gradient_sq(flow: &FlowField, y: usize, x: usize) -> f64 {
    let (h, w) = (flow.height(), flow.width());
    let (u, v) = flow.at(y, x);
    let (dux, dvx) = if x + 1 < w {
        let (u1, v1) = flow.at(y, x + 1);
        (u1 - u, v1 - v)
    } else {
        (0.0, 0.0)
    };
    let (duy, dvy) = if y + 1 < h {
        let (u1, v1) = flow.at(y + 1, x);
        (u1 - u, v1 - v)
    } else {
        (0.0, 0.0)
    };
    dux * dux + duy * duy + dvx * dvx + dvy * dvy
}

/// Forward-backward consistency occlusion estimate.
///
/// `forward` maps pixels of frame A into frame B; `backward` maps B into A.
pub fn occlusion_mask(forward: &FlowField, backward: &FlowField) -> Result<OcclusionMask> {
    occlusion_mask_with(forward, backward, OcclusionThresholds::default())
}

pub fn occlusion_mask_with(
    forward: &FlowField,
    backward: &FlowField,
    thresholds: OcclusionThresholds,
) -> Result<OcclusionMask> {
    if forward.data.dim() != backward.data.dim() {
        return Err(Error::shape(
            "occlusion_mask",
            format!(
                "forward {:?} vs backward {:?}",
                forward.data.dim(),
                backward.data.dim()
            ),
        ));
    }
    let (h, w) = (forward.height(), forward.width());
    let back = backward.to_batch();
    let back_warped = flow_warp(&back, &forward.to_batch())?;
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let wf = forward.at(y, x);
            let wb = (back_warped[[0, 0, y, x]], back_warped[[0, 1, y, x]]);
            let occluded = thresholds.inconsistent(wf, wb)
                || thresholds.motion_boundary(wf, flow_gradient_sq(forward, y, x));
            mask[[y, x]] = u8::from(!occluded);
        }
    }
    Ok(OcclusionMask { data: mask })
}
