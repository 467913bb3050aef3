//! Forward and backward compute kernels.
//!
//! Everything here is a pure function over flat row-major buffers; the graph
//! layer owns tracking and dispatch. Matrix products go through
//! `matrixmultiply::dgemm`; convolutions are lowered to GEMM via im2col.
//!
//! Both convolution directions share one description of the *underlying
//! downsampling convolution* ([`ConvGeom`]): `conv2d` runs it forward while
//! `conv2d_transpose` runs its adjoint, which makes the adjoint identity
//! `<conv(x), y> == <x, conv_t(y)>` structural rather than accidental.

use crate::error::{Result, UfdnError};

/// Inputs to `log` (and reciprocal-like backward paths) are clamped to this
/// floor so adversarial losses stay finite near saturation.
pub const LOG_EPS: f64 = 1e-7;
/// Inputs to `exp` are clamped here; `exp(709)` is the largest finite f64.
pub const EXP_MAX: f64 = 709.0;

/// `c[m,n] = alpha * a · b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

/// How two operand shapes combine in a binary op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    ScalarLeft,
    ScalarRight,
}

pub(crate) fn binary_broadcast(
    a: &[usize],
    b: &[usize],
    a_len: usize,
    b_len: usize,
) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if b_len == 1 {
        return Ok((a.to_vec(), Broadcast::ScalarRight));
    }
    if a_len == 1 {
        return Ok((b.to_vec(), Broadcast::ScalarLeft));
    }
    Err(UfdnError::Dimension(format!(
        "binary op requires identical shapes or one scalar operand, got {a:?} and {b:?}"
    )))
}

pub(crate) fn ew_binary(
    bc: Broadcast,
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match bc {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::ScalarRight => {
            let s = b[0];
            a.iter().map(|&x| f(x, s)).collect()
        }
        Broadcast::ScalarLeft => {
            let s = a[0];
            b.iter().map(|&y| f(s, y)).collect()
        }
    }
}

pub(crate) fn ew_unary(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn exp_clamped(x: f64) -> f64 {
    x.min(EXP_MAX).exp()
}

pub(crate) fn log_clamped(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(UfdnError::Dimension(format!(
            "matmul expects rank-2 operands, got {a:?} and {b:?}"
        )));
    }
    if a[1] != b[0] {
        return Err(UfdnError::Dimension(format!(
            "matmul inner dimensions disagree: {a:?} vs {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c, n as isize, 1,
    );
    c
}

/// dA = dC · Bᵀ
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    dgemm(
        m, n, k, 1.0, dc, n as isize, 1, b, 1, n as isize, 0.0, &mut da, k as isize, 1,
    );
    da
}

/// dB = Aᵀ · dC
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    dgemm(
        k, m, n, 1.0, a, 1, k as isize, dc, n as isize, 1, 0.0, &mut db, n as isize, 1,
    );
    db
}

// ---------------------------------------------------------------------------
// bias_add: [B, n] + [n]
// ---------------------------------------------------------------------------

pub(crate) fn bias_add_shape(x: &[usize], b: &[usize]) -> Result<()> {
    if x.len() != 2 || b.len() != 1 || x[1] != b[0] {
        return Err(UfdnError::Dimension(format!(
            "bias_add expects [rows, n] + [n], got {x:?} and {b:?}"
        )));
    }
    Ok(())
}

pub(crate) fn bias_add_forward(x: &[f64], b: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        for (j, &bj) in b.iter().enumerate() {
            out.push(x[r * n + j] + bj);
        }
    }
    out
}

pub(crate) fn bias_add_grad_bias(g: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; n];
    for r in 0..rows {
        for (j, d) in db.iter_mut().enumerate() {
            *d += g[r * n + j];
        }
    }
    db
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Geometry of a stride-`s` *downsampling* convolution
/// `[b, ic, h, w] -> [b, oc, oh, ow]` with weight `[oc, ic, kh, kw]`.
///
/// `conv2d` evaluates it forward; `conv2d_transpose` evaluates its adjoint
/// (so the transpose op's input has `oc` channels and its output `ic`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.ic * self.kh * self.kw
    }
    pub fn in_spatial(&self) -> usize {
        self.h * self.w
    }
    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Geometry for `conv2d(x: [b,cin,h,w], w: [cout,cin,kh,kw])`.
pub(crate) fn conv2d_geom(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(UfdnError::Dimension(format!(
            "conv2d expects x [B,C,H,W] and w [Co,Ci,kh,kw], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[1] {
        return Err(UfdnError::Dimension(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            xs[1], ws[1]
        )));
    }
    if stride == 0 {
        return Err(UfdnError::Config("conv2d stride must be >= 1".into()));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    Ok(ConvGeom {
        batch: xs[0],
        ic: xs[1],
        h,
        w,
        oc: ws[0],
        oh,
        ow,
        kh,
        kw,
        stride,
        pad,
    })
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(UfdnError::Config(format!(
            "convolution output size ({padded} - {k})/{stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry for `conv2d_transpose(x: [b,cin,h,w], w: [cin,cout,kh,kw])`.
/// Output spatial extent is `(h-1)*stride - 2*pad + kh`.
pub(crate) fn convt2d_geom(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(UfdnError::Dimension(format!(
            "conv2d_transpose expects x [B,C,H,W] and w [Ci,Co,kh,kw], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[0] {
        return Err(UfdnError::Dimension(format!(
            "conv2d_transpose channel mismatch: input has {} channels, kernel expects {}",
            xs[1], ws[0]
        )));
    }
    if stride == 0 {
        return Err(UfdnError::Config(
            "conv2d_transpose stride must be >= 1".into(),
        ));
    }
    let (hs, ws_sp, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    let oh_big = (hs - 1) * stride + kh;
    let ow_big = (ws_sp - 1) * stride + kw;
    if oh_big <= 2 * pad || ow_big <= 2 * pad {
        return Err(UfdnError::Config(format!(
            "conv2d_transpose output size ({hs}-1)*{stride} - 2*{pad} + {kh} is not positive"
        )));
    }
    // The underlying downsampling convolution maps the *large* plane back to
    // the transpose op's input plane.
    Ok(ConvGeom {
        batch: xs[0],
        ic: ws[1],
        h: oh_big - 2 * pad,
        w: ow_big - 2 * pad,
        oc: xs[1],
        oh: hs,
        ow: ws_sp,
        kh,
        kw,
        stride,
        pad,
    })
}

/// Gathers the patch matrix `[oh*ow, ic*kh*kw]` for one batch item.
/// Interior spans are contiguous copies; only border windows take the
/// element-wise path.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (kh, kw, stride, pad) = (g.kh, g.kw, g.stride, g.pad);
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ci in 0..g.ic {
            let plane = ci * g.h * g.w;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let row0 = oy * g.ow * patch + ci * kh * kw + ky * kw;
                if iy < 0 || iy >= g.h as isize {
                    for ox in 0..g.ow {
                        let dst = row0 + ox * patch;
                        col[dst..dst + kw].fill(0.0);
                    }
                    continue;
                }
                let src_row = plane + iy as usize * g.w;
                for ox in 0..g.ow {
                    let dst = row0 + ox * patch;
                    let start = (ox * stride) as isize - pad as isize;
                    if start >= 0 && start as usize + kw <= g.w {
                        let s = src_row + start as usize;
                        col[dst..dst + kw].copy_from_slice(&x[s..s + kw]);
                    } else {
                        for kx in 0..kw {
                            let ix = start + kx as isize;
                            col[dst + kx] = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                x[src_row + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a patch matrix back onto the input plane, accumulating overlaps.
fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (kh, kw, stride, pad) = (g.kh, g.kw, g.stride, g.pad);
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ci in 0..g.ic {
            let plane = ci * g.h * g.w;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let dst_row = plane + iy as usize * g.w;
                let row0 = oy * g.ow * patch + ci * kh * kw + ky * kw;
                for ox in 0..g.ow {
                    let src = row0 + ox * patch;
                    let start = (ox * stride) as isize - pad as isize;
                    if start >= 0 && start as usize + kw <= g.w {
                        let d = dst_row + start as usize;
                        for kx in 0..kw {
                            x[d + kx] += col[src + kx];
                        }
                    } else {
                        for kx in 0..kw {
                            let ix = start + kx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[dst_row + ix as usize] += col[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Builds the full patch matrix `[batch*oh*ow, patch]` in parallel over the
/// batch.
fn im2col_all(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let ohw = g.out_spatial();
    let in_len = g.ic * g.in_spatial();
    let mut cols = vec![0.0; g.batch * ohw * patch];
    for (col_b, x_b) in cols.chunks_mut(ohw * patch).zip(x.chunks(in_len)) {
        im2col(x_b, g, col_b);
    }
    cols
}

/// `[b, oc, oh, ow] -> [b*oh*ow, oc]` row view used by the GEMMs.
fn to_rows(y: &[f64], batch: usize, oc: usize, ohw: usize) -> Vec<f64> {
    let mut rows = vec![0.0; batch * ohw * oc];
    for (r_b, y_b) in rows.chunks_mut(ohw * oc).zip(y.chunks(oc * ohw)) {
        for co in 0..oc {
            for s in 0..ohw {
                r_b[s * oc + co] = y_b[co * ohw + s];
            }
        }
    }
    rows
}

/// Inverse of [`to_rows`].
fn from_rows(rows: &[f64], batch: usize, oc: usize, ohw: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * oc * ohw];
    for (y_b, r_b) in y.chunks_mut(oc * ohw).zip(rows.chunks(ohw * oc)) {
        for co in 0..oc {
            for s in 0..ohw {
                y_b[co * ohw + s] = r_b[s * oc + co];
            }
        }
    }
    y
}

/// Forward direction of the underlying convolution:
/// `[b, ic, h, w] -> [b, oc, oh, ow]` via one batched GEMM.
pub(crate) fn geom_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let ohw = g.out_spatial();
    let rows = g.batch * ohw;
    let cols = im2col_all(x, g);
    // y_rows[rows, oc] = cols[rows, patch] · Wᵀ[patch, oc]
    let mut y_rows = vec![0.0; rows * g.oc];
    dgemm(
        rows,
        patch,
        g.oc,
        1.0,
        &cols,
        patch as isize,
        1,
        w,
        1,
        patch as isize,
        0.0,
        &mut y_rows,
        g.oc as isize,
        1,
    );
    from_rows(&y_rows, g.batch, g.oc, ohw)
}

/// Adjoint direction: `[b, oc, oh, ow] -> [b, ic, h, w]`.
pub(crate) fn geom_input_grad(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let ohw = g.out_spatial();
    let rows = g.batch * ohw;
    let in_len = g.ic * g.in_spatial();
    let gy_rows = to_rows(gy, g.batch, g.oc, ohw);
    // dcol[rows, patch] = gy_rows[rows, oc] · W[oc, patch]
    let mut dcol = vec![0.0; rows * patch];
    dgemm(
        rows,
        g.oc,
        patch,
        1.0,
        &gy_rows,
        g.oc as isize,
        1,
        w,
        patch as isize,
        1,
        0.0,
        &mut dcol,
        patch as isize,
        1,
    );
    let mut dx = vec![0.0; g.batch * in_len];
    for (dx_b, dcol_b) in dx.chunks_mut(in_len).zip(dcol.chunks(ohw * patch)) {
        col2im_add(dcol_b, g, dx_b);
    }
    dx
}

/// Weight gradient of the underlying convolution (one GEMM over the flattened
/// batch, so accumulation order is fixed).
pub(crate) fn geom_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch_len();
    let ohw = g.out_spatial();
    let rows = g.batch * ohw;
    let cols = im2col_all(x, g);
    let gy_rows = to_rows(gy, g.batch, g.oc, ohw);
    // dW[oc, patch] = gy_rowsᵀ[oc, rows] · cols[rows, patch]
    let mut dw = vec![0.0; g.oc * patch];
    dgemm(
        g.oc,
        rows,
        patch,
        1.0,
        &gy_rows,
        1,
        g.oc as isize,
        &cols,
        patch as isize,
        1,
        0.0,
        &mut dw,
        patch as isize,
        1,
    );
    dw
}

/// Per-channel sums of a `[b, c, s]`-shaped gradient (bias gradient).
pub(crate) fn channel_sums(gy: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let base = (b * channels + c) * spatial;
            *d += gy[base..base + spatial].iter().sum::<f64>();
        }
    }
    db
}

/// Adds `bias[c]` to every spatial location of channel `c`.
pub(crate) fn add_channel_bias(
    out: &mut [f64],
    bias: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
) {
    for b in 0..batch {
        for (c, &bc) in bias.iter().enumerate() {
            let base = (b * channels + c) * spatial;
            for v in &mut out[base..base + spatial] {
                *v += bc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub(crate) fn normalize_axes(axes: Option<&[usize]>, rank: usize) -> Result<Option<Vec<usize>>> {
    match axes {
        None => Ok(None),
        Some(list) => {
            let mut sorted = list.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(UfdnError::Dimension(format!(
                    "duplicate reduction axes in {list:?}"
                )));
            }
            if let Some(&bad) = sorted.iter().find(|&&a| a >= rank) {
                return Err(UfdnError::Dimension(format!(
                    "reduction axis {bad} out of range for rank {rank}"
                )));
            }
            Ok(Some(sorted))
        }
    }
}

pub(crate) fn reduced_shape(shape: &[usize], axes: Option<&[usize]>) -> Vec<usize> {
    match axes {
        None => Vec::new(),
        Some(axes) => shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect(),
    }
}

pub(crate) fn reduce_count(shape: &[usize], axes: Option<&[usize]>) -> usize {
    match axes {
        None => shape.iter().product(),
        Some(axes) => axes.iter().map(|&a| shape[a]).product(),
    }
}

/// Maps each flat input index to its flat output index under the reduction.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let keep: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for &i in keep.iter().rev() {
        out_strides[i] = acc;
        acc *= shape[i];
    }
    let mut map = vec![0usize; numel];
    let mut coords = vec![0usize; rank];
    for slot in map.iter_mut() {
        let mut o = 0;
        for i in &keep {
            o += coords[*i] * out_strides[*i];
        }
        *slot = o;
        for i in (0..rank).rev() {
            coords[i] += 1;
            if coords[i] < shape[i] {
                break;
            }
            coords[i] = 0;
        }
    }
    map
}

pub(crate) fn reduce_forward(
    x: &[f64],
    shape: &[usize],
    axes: Option<&[usize]>,
    mean: bool,
) -> Vec<f64> {
    let out_shape = reduced_shape(shape, axes);
    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_numel.max(1)];
    match axes {
        None => out[0] = x.iter().sum(),
        Some(axes) => {
            let map = reduce_map(shape, axes);
            for (i, &v) in x.iter().enumerate() {
                out[map[i]] += v;
            }
        }
    }
    if mean {
        let count = reduce_count(shape, axes) as f64;
        for v in &mut out {
            *v /= count;
        }
    }
    out
}

pub(crate) fn reduce_backward(
    gy: &[f64],
    shape: &[usize],
    axes: Option<&[usize]>,
    mean: bool,
) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let scale = if mean {
        1.0 / reduce_count(shape, axes) as f64
    } else {
        1.0
    };
    match axes {
        None => vec![gy[0] * scale; numel],
        Some(axes) => {
            let map = reduce_map(shape, axes);
            (0..numel).map(|i| gy[map[i]] * scale).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// concat
// ---------------------------------------------------------------------------

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| UfdnError::Dimension("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(UfdnError::Dimension(format!(
            "concat axis {axis} out of range for rank {}",
            first.len()
        )));
    }
    let mut total = 0;
    for s in shapes {
        if s.len() != first.len() {
            return Err(UfdnError::Dimension(format!(
                "concat rank mismatch: {first:?} vs {s:?}"
            )));
        }
        for (i, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
            if i != axis && a != b {
                return Err(UfdnError::Dimension(format!(
                    "concat extents differ off-axis: {first:?} vs {s:?} (axis {axis})"
                )));
            }
        }
        total += s[axis];
    }
    let mut out = first.to_vec();
    out[axis] = total;
    Ok(out)
}

pub(crate) fn concat_forward(parts: &[(&[f64], &[usize])], axis: usize, out_shape: &[usize]) -> Vec<f64> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for o in 0..outer {
        for (data, shape) in parts {
            let block = shape[axis] * inner;
            out.extend_from_slice(&data[o * block..(o + 1) * block]);
        }
    }
    out
}

pub(crate) fn concat_backward(
    gy: &[f64],
    part_shapes: &[&[usize]],
    axis: usize,
    out_shape: &[usize],
) -> Vec<Vec<f64>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let row = out_shape[axis] * inner;
    let mut grads: Vec<Vec<f64>> = part_shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut offset = 0;
        for (p, shape) in part_shapes.iter().enumerate() {
            let block = shape[axis] * inner;
            grads[p].extend_from_slice(&gy[o * row + offset..o * row + offset + block]);
            offset += block;
        }
    }
    grads
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

/// Returns `(loss, probs)` where
/// `loss = sum_b row_w[b] * (-sum_i t[b,i] * logsoftmax(x[b,:])_i)`.
pub(crate) fn softmax_ce_forward(
    logits: &[f64],
    targets: &[f64],
    row_w: &[f64],
    rows: usize,
    cols: usize,
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; rows * cols];
    let mut loss = 0.0;
    for r in 0..rows {
        let x = &logits[r * cols..(r + 1) * cols];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in x {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        let mut ce = 0.0;
        for i in 0..cols {
            let lp = x[i] - lse;
            probs[r * cols + i] = lp.exp();
            let t = targets[r * cols + i];
            if t != 0.0 {
                ce -= t * lp;
            }
        }
        loss += row_w[r] * ce;
    }
    (loss, probs)
}

pub(crate) fn softmax_ce_backward(
    g: f64,
    probs: &[f64],
    targets: &[f64],
    row_w: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let w = g * row_w[r];
        for i in 0..cols {
            dx[r * cols + i] = w * (probs[r * cols + i] - targets[r * cols + i]);
        }
    }
    dx
}
