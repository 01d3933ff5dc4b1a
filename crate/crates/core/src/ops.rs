//! Forward and backward kernels for the layers the U-Net needs.
//!
//! All kernels work on NCHW row-major buffers. Backward kernels take the
//! upstream gradient and return (or accumulate into) gradients for their
//! inputs; they never allocate for inputs that do not need a gradient.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with
/// arbitrary strides on `a` and `b` so transposes come for free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers covering every strided index touched for
    // the given m/k/n; `c` is a dense m x n row-major block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input.dims4()?;
        let [cout, wcin, kh, kw] = weight.dims4()?;
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return dim_err(format!("kernel {kh}x{kw} unsupported, expected 1 or 3 on each axis"));
        }
        if wcin != cin {
            return dim_err(format!("input channels (axis 1) = {cin} but weight Cin (axis 1) = {wcin}"));
        }
        if bias.shape() != [cout] {
            return dim_err(format!("bias shape {:?} does not match Cout = {cout}", bias.shape()));
        }
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < kh || wp < kw {
            return dim_err(format!(
                "padded input {hp}x{wp} (axes 2,3) smaller than kernel {kh}x{kw}"
            ));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            ho: hp - kh + 1,
            wo: wp - kw + 1,
        })
    }

    fn direct(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeometry, img: &[f32], col: &mut [f32]) {
    let p = g.plane_out();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f32], img: &mut [f32]) {
    let p = g.plane_out();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &col[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, stride 1.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, bias, pad)?;
    let p = g.plane_out();
    let kdim = g.col_rows();
    let mut out = vec![0.0f32; g.n * g.cout * p];
    let mut col = if g.direct() { Vec::new() } else { vec![0.0f32; kdim * p] };
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.n {
        let img = &input.data()[b * in_stride..(b + 1) * in_stride];
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (oc, chunk) in dst.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        let src: &[f32] = if g.direct() {
            img
        } else {
            im2col(&g, img, &mut col);
            &col
        };
        gemm(g.cout, kdim, p, weight.data(), (kdim, 1), src, (p, 1), 1.0, dst);
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients of a convolution given the upstream gradient `dout`.
/// Each `need_*` flag skips work for inputs that do not require grads.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
    dout: &Tensor,
    (need_input, need_weight, need_bias): (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, bias, pad)?;
    if dout.shape() != [g.n, g.cout, g.ho, g.wo] {
        return dim_err(format!("conv upstream gradient shape {:?} != output shape", dout.shape()));
    }
    let p = g.plane_out();
    let kdim = g.col_rows();
    let in_stride = g.cin * g.h * g.w;
    let mut dw = if need_weight { vec![0.0f32; g.cout * kdim] } else { Vec::new() };
    let mut db = if need_bias { vec![0.0f32; g.cout] } else { Vec::new() };
    let mut dx = if need_input { vec![0.0f32; input.numel()] } else { Vec::new() };
    let mut col = if g.direct() || !need_weight { Vec::new() } else { vec![0.0f32; kdim * p] };
    let mut dcol = if g.direct() || !need_input { Vec::new() } else { vec![0.0f32; kdim * p] };

    for b in 0..g.n {
        let dy = &dout.data()[b * g.cout * p..(b + 1) * g.cout * p];
        if need_bias {
            for (oc, chunk) in dy.chunks_exact(p).enumerate() {
                db[oc] += chunk.iter().sum::<f32>();
            }
        }
        if need_weight {
            let img = &input.data()[b * in_stride..(b + 1) * in_stride];
            let src: &[f32] = if g.direct() {
                img
            } else {
                im2col(&g, img, &mut col);
                &col
            };
            // dW (cout x kdim) += dy (cout x p) * src^T (p x kdim)
            gemm(g.cout, p, kdim, dy, (p, 1), src, (1, p), 1.0, &mut dw);
        }
        if need_input {
            let dimg = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.direct() {
                // dimg (cin x p) += W^T (cin x cout) * dy (cout x p)
                gemm(kdim, g.cout, p, weight.data(), (1, kdim), dy, (p, 1), 1.0, dimg);
            } else {
                gemm(kdim, g.cout, p, weight.data(), (1, kdim), dy, (p, 1), 0.0, &mut dcol);
                col2im_add(&g, &dcol, dimg);
            }
        }
    }
    Ok(ConvGrads {
        input: need_input.then(|| Tensor::new(input.shape().to_vec(), dx)).transpose()?,
        weight: need_weight.then(|| Tensor::new(weight.shape().to_vec(), dw)).transpose()?,
        bias: need_bias.then(|| Tensor::new(vec![g.cout], db)).transpose()?,
    })
}

/// 2x2 max pooling, stride 2. Returns the output and, for every output
/// element, the flat input index that produced it. Ties resolve to the first
/// element in row-major window order.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("maxpool2 needs even spatial dims (axes 2,3), got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Result<Tensor> {
    if dout.numel() != argmax.len() {
        return dim_err("maxpool upstream gradient does not match pooled size");
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// Source taps for one output coordinate of half-pixel 2x upsampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(in_len: usize) -> Vec<Tap> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = if lo + 1 < in_len { lo + 1 } else { lo };
            Tap { lo, hi, frac: src - lo as f32 }
        })
        .collect()
}

/// Bilinear 2x upsampling with the half-pixel (align_corners = false)
/// sampling convention.
pub fn upsample2x_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if h == 0 || w == 0 {
        return dim_err("upsample needs non-empty spatial dims");
    }
    let ty = taps(h);
    let tx = taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let x = input.data();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                dst[oy * ow + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2x_backward(input_shape: &[usize], dout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return dim_err("upsample backward needs a rank-4 input shape"),
    };
    let (oh, ow) = (2 * h, 2 * w);
    if dout.shape() != [n, c, oh, ow] {
        return dim_err(format!("upsample upstream gradient shape {:?} mismatched", dout.shape()));
    }
    let ty = taps(h);
    let tx = taps(w);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for plane in 0..n * c {
        let g = &dout.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                dst[a.lo * w + b.lo] += top * (1.0 - b.frac);
                dst[a.lo * w + b.hi] += top * b.frac;
                dst[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                dst[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
    Ok(dx)
}

pub fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if na != nb || ha != hb || wa != wb {
        return dim_err(format!(
            "concat needs equal N,H,W (axes 0,2,3): {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..na {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], out)
}

/// Splits a channel-concatenated gradient back into its two halves.
pub fn concat_channels_backward(ca: usize, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = dout.dims4()?;
    if ca > c {
        return dim_err("concat split point beyond channel count");
    }
    let cb = c - ca;
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut da = Vec::with_capacity(n * sa);
    let mut db = Vec::with_capacity(n * sb);
    for i in 0..n {
        let row = &dout.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
        da.extend_from_slice(&row[..sa]);
        db.extend_from_slice(&row[sa..]);
    }
    Ok((Tensor::new(vec![n, ca, h, w], da)?, Tensor::new(vec![n, cb, h, w], db)?))
}

/// Offsets removed from the top/left by a center crop: the smaller half of
/// the difference, so odd differences drop the extra row/column at the
/// bottom/right.
pub fn crop_offsets(h: usize, w: usize, th: usize, tw: usize) -> Result<(usize, usize)> {
    if th > h || tw > w {
        return dim_err(format!("crop target {th}x{tw} larger than input {h}x{w} (axes 2,3)"));
    }
    Ok(((h - th) / 2, (w - tw) / 2))
}

pub fn center_crop_forward(input: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (top, left) = crop_offsets(h, w, th, tw)?;
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..th {
            let row = (top + y) * w + left;
            out.extend_from_slice(&src[row..row + tw]);
        }
    }
    Tensor::new(vec![n, c, th, tw], out)
}

pub fn center_crop_backward(input_shape: &[usize], dout: &Tensor) -> Result<Tensor> {
    let (h, w) = match *input_shape {
        [_, _, h, w] => (h, w),
        _ => return dim_err("crop backward needs a rank-4 input shape"),
    };
    let [n, c, th, tw] = dout.dims4()?;
    let (top, left) = crop_offsets(h, w, th, tw)?;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for plane in 0..n * c {
        let g = &dout.data()[plane * th * tw..(plane + 1) * th * tw];
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for y in 0..th {
            let row = (top + y) * w + left;
            dst[row..row + tw].copy_from_slice(&g[y * tw..(y + 1) * tw]);
        }
    }
    Ok(dx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

const SIGMOID_LO: f32 = f32::MIN_POSITIVE;
const SIGMOID_HI: f32 = 1.0 - f32::EPSILON / 2.0;

/// Logistic function, numerically stable on both tails and clamped to the
/// open interval (0, 1).
pub fn sigmoid_scalar(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_LO, SIGMOID_HI)
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_1x1_scales() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], vec![2.0]), &t(&[1], vec![0.0]), 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_3x3_counts_window_members() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &t(&[1], vec![0.0]), 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let err = conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[1]), 1).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[1, 2, 1, 1]), &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 0).is_err());
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let (y, _) = maxpool2_forward(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);

        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &expect);
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let y = upsample2x_forward(&Tensor::full(&[2, 3, 3, 5], 0.7)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let y = upsample2x_forward(&t(&[1, 1, 1, 1], vec![-4.5])).unwrap();
        assert_eq!(y.data(), &[-4.5; 4]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let x = t(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect());
        let y = concat_channels_forward(&x, &Tensor::zeros(&[1, 0, 2, 2])).unwrap();
        assert_eq!(y, x);
        let a = t(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let b = t(&[1, 1, 1, 2], vec![3.0, 4.0]);
        assert_eq!(concat_channels_forward(&a, &b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(concat_channels_forward(&a, &Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn crop_indexing() {
        let x = t(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect());
        assert_eq!(center_crop_forward(&x, 4, 4).unwrap(), x);
        assert_eq!(center_crop_forward(&x, 2, 2).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
        // 5x5 -> 4x4: offset floor(1/2) = 0, so rows/cols 0..3 survive and the
        // extra row/column is dropped from the bottom/right.
        let x = t(&[1, 1, 5, 5], (0..25).map(|v| v as f32).collect());
        let y = center_crop_forward(&x, 4, 4).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&y.data()[12..], &[15.0, 16.0, 17.0, 18.0]);
        assert!(center_crop_forward(&x, 6, 4).is_err());
    }

    #[test]
    fn sigmoid_range() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for x in [-1e4f32, -200.0, -90.0, -30.0] {
            let y = sigmoid_scalar(x);
            assert!(y > 0.0 && y <= 1e-6 && y.is_finite(), "{x} -> {y}");
        }
        for x in [30.0f32, 1e4] {
            let y = sigmoid_scalar(x);
            assert!(y < 1.0 && y > 0.999);
        }
    }
}
