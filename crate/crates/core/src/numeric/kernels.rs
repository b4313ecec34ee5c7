//! Direct 3×3 convolution (stride 1, zero padding 1) and 2×2 max pooling on
//! row-major NCHW slices.

use crate::parallel::{for_each_chunk_mut, map_indexed, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Valid output range for a tap offset `d ∈ {-1,0,1}` along an axis of `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

pub fn conv3x3_forward(
    exec: Execution,
    dims: ConvDims,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let ConvDims {
        in_ch,
        out_ch,
        height: h,
        width: w,
        ..
    } = dims;
    let plane = dims.plane();
    let mut out = vec![0.0; dims.batch * out_ch * plane];
    for_each_chunk_mut(exec, &mut out, out_ch * plane, |b, out_b| {
        let in_b = &input[b * in_ch * plane..(b + 1) * in_ch * plane];
        for o in 0..out_ch {
            let op = &mut out_b[o * plane..(o + 1) * plane];
            op.fill(bias[o]);
            for c in 0..in_ch {
                let ip = &in_b[c * plane..(c + 1) * plane];
                let k = &kernel[(o * in_ch + c) * 9..(o * in_ch + c + 1) * 9];
                for tap in 0..9 {
                    let wv = k[tap];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = (tap / 3) as isize - 1;
                    let dx = (tap % 3) as isize - 1;
                    let (y0, y1) = tap_range(dy, h);
                    let (x0, x1) = tap_range(dx, w);
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let orow = &mut op[oy * w + x0..oy * w + x1];
                        let ix0 = (x0 as isize + dx) as usize;
                        let irow = &ip[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (a, &v) in orow.iter_mut().zip(irow) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub fn conv3x3_backward_input(
    exec: Execution,
    dims: ConvDims,
    grad_out: &[f64],
    kernel: &[f64],
) -> Vec<f64> {
    let ConvDims {
        in_ch,
        out_ch,
        height: h,
        width: w,
        ..
    } = dims;
    let plane = dims.plane();
    let mut gin = vec![0.0; dims.batch * in_ch * plane];
    for_each_chunk_mut(exec, &mut gin, in_ch * plane, |b, gin_b| {
        let g_b = &grad_out[b * out_ch * plane..(b + 1) * out_ch * plane];
        for c in 0..in_ch {
            let gp = &mut gin_b[c * plane..(c + 1) * plane];
            for o in 0..out_ch {
                let go = &g_b[o * plane..(o + 1) * plane];
                let k = &kernel[(o * in_ch + c) * 9..(o * in_ch + c + 1) * 9];
                for tap in 0..9 {
                    let wv = k[tap];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = (tap / 3) as isize - 1;
                    let dx = (tap % 3) as isize - 1;
                    let (y0, y1) = tap_range(dy, h);
                    let (x0, x1) = tap_range(dx, w);
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let grow = &go[oy * w + x0..oy * w + x1];
                        let irow = &mut gp[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (a, &g) in irow.iter_mut().zip(grow) {
                            *a += wv * g;
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradients with respect to kernel (O×C×3×3) and bias (O).
pub fn conv3x3_backward_params(
    exec: Execution,
    dims: ConvDims,
    grad_out: &[f64],
    input: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ConvDims {
        batch,
        in_ch,
        out_ch,
        height: h,
        width: w,
    } = dims;
    let plane = dims.plane();
    let per_out = map_indexed(exec, out_ch, |o| {
        let mut gk = vec![0.0; in_ch * 9];
        let mut gb = 0.0;
        for b in 0..batch {
            let go = &grad_out[(b * out_ch + o) * plane..(b * out_ch + o + 1) * plane];
            gb += go.iter().sum::<f64>();
            for c in 0..in_ch {
                let ip = &input[(b * in_ch + c) * plane..(b * in_ch + c + 1) * plane];
                for tap in 0..9 {
                    let dy = (tap / 3) as isize - 1;
                    let dx = (tap % 3) as isize - 1;
                    let (y0, y1) = tap_range(dy, h);
                    let (x0, x1) = tap_range(dx, w);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let grow = &go[oy * w + x0..oy * w + x1];
                        let irow = &ip[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(g, v)| g * v).sum::<f64>();
                    }
                    gk[c * 9 + tap] += acc;
                }
            }
        }
        (gk, gb)
    });
    let mut gk = Vec::with_capacity(out_ch * in_ch * 9);
    let mut gb = Vec::with_capacity(out_ch);
    for (k, b) in per_out {
        gk.extend(k);
        gb.push(b);
    }
    (gk, gb)
}

/// 2×2/stride-2 max pooling with floor on odd extents. Returns the pooled
/// values and, per output element, the flat input index that won (first
/// maximum in row-major window order).
pub fn maxpool2_forward(
    planes: usize,
    h: usize,
    w: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + (2 * oy) * w + 2 * ox;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
