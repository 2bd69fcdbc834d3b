//! Raw NCHW kernels behind the convolution, pooling and normalization nodes.

/// Geometry of a 2-D convolution over an NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        out_size(self.height, self.kernel_h, self.stride, self.padding, self.dilation)
    }

    pub fn out_width(&self) -> usize {
        out_size(self.width, self.kernel_w, self.stride, self.padding, self.dilation)
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }
}

pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    (input + 2 * padding).saturating_sub(span) / stride + 1
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o * stride + offset` lands inside `[0, size)`.
#[inline]
fn valid_range(offset: isize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (size as isize) <= offset {
        0
    } else {
        ((size as isize - offset) + s - 1) / s
    };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

/// Visits every (output plane, input plane, kernel tap) triple of the convolution.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let ipg = g.in_per_group();
    let opg = g.out_per_group();
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let group = oc / opg;
            for icg in 0..ipg {
                let ic = group * ipg + icg;
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        f(n, oc, ic, icg, kh * g.kernel_w + kw);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_channels * oh_n * ow_n];
    let ipg = g.in_per_group();
    let ksz = g.kernel_h * g.kernel_w;
    for_each_tap(g, |n, oc, ic, icg, tap| {
        let (kh, kw) = (tap / g.kernel_w, tap % g.kernel_w);
        let wv = weight[(oc * ipg + icg) * ksz + tap];
        if wv == 0.0 {
            return;
        }
        let in_plane = &input[(n * g.in_channels + ic) * g.height * g.width..][..g.height * g.width];
        let out_plane = &mut out[(n * g.out_channels + oc) * oh_n * ow_n..][..oh_n * ow_n];
        let off_h = (kh * g.dilation) as isize - g.padding as isize;
        let off_w = (kw * g.dilation) as isize - g.padding as isize;
        let (oh_lo, oh_hi) = valid_range(off_h, g.stride, g.height, oh_n);
        let (ow_lo, ow_hi) = valid_range(off_w, g.stride, g.width, ow_n);
        if ow_lo == ow_hi {
            return;
        }
        for oh in oh_lo..oh_hi {
            let ih = (oh * g.stride) as isize + off_h;
            let in_row = &in_plane[ih as usize * g.width..][..g.width];
            let out_row = &mut out_plane[oh * ow_n..][..ow_n];
            if g.stride == 1 {
                let start = (ow_lo as isize + off_w) as usize;
                let src = &in_row[start..start + (ow_hi - ow_lo)];
                for (o, s) in out_row[ow_lo..ow_hi].iter_mut().zip(src) {
                    *o += wv * s;
                }
            } else {
                for ow in ow_lo..ow_hi {
                    let iw = ((ow * g.stride) as isize + off_w) as usize;
                    out_row[ow] += wv * in_row[iw];
                }
            }
        }
    });
    out
}

/// Returns (grad_input, grad_weight); either may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let ipg = g.in_per_group();
    let ksz = g.kernel_h * g.kernel_w;
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    for_each_tap(g, |n, oc, ic, icg, tap| {
        let (kh, kw) = (tap / g.kernel_w, tap % g.kernel_w);
        let widx = (oc * ipg + icg) * ksz + tap;
        let wv = weight[widx];
        let in_base = (n * g.in_channels + ic) * g.height * g.width;
        let go_plane = &grad_out[(n * g.out_channels + oc) * oh_n * ow_n..][..oh_n * ow_n];
        let off_h = (kh * g.dilation) as isize - g.padding as isize;
        let off_w = (kw * g.dilation) as isize - g.padding as isize;
        let (oh_lo, oh_hi) = valid_range(off_h, g.stride, g.height, oh_n);
        let (ow_lo, ow_hi) = valid_range(off_w, g.stride, g.width, ow_n);
        let mut acc = 0.0;
        for oh in oh_lo..oh_hi {
            let ih = ((oh * g.stride) as isize + off_h) as usize;
            let row_base = in_base + ih * g.width;
            let go_row = &go_plane[oh * ow_n..][..ow_n];
            for ow in ow_lo..ow_hi {
                let iw = ((ow * g.stride) as isize + off_w) as usize;
                let go = go_row[ow];
                if let Some(gi) = gi.as_mut() {
                    gi[row_base + iw] += wv * go;
                }
                acc += go * input[row_base + iw];
            }
        }
        if let Some(gw) = gw.as_mut() {
            gw[widx] += acc;
        }
    });
    (gi, gw)
}

/// 3×3 max pooling with padding 1; returns the output and, for every output
/// element, the flat input index that produced it.
pub fn max_pool3_forward(
    input: &[f64],
    batch_channels: usize,
    height: usize,
    width: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh_n = out_size(height, 3, stride, 1, 1);
    let ow_n = out_size(width, 3, stride, 1, 1);
    let mut out = Vec::with_capacity(batch_channels * oh_n * ow_n);
    let mut arg = Vec::with_capacity(batch_channels * oh_n * ow_n);
    for p in 0..batch_channels {
        let base = p * height * width;
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for kh in 0..3 {
                    let ih = (oh * stride + kh) as isize - 1;
                    if ih < 0 || ih as usize >= height {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = (ow * stride + kw) as isize - 1;
                        if iw < 0 || iw as usize >= width {
                            continue;
                        }
                        let idx = base + ih as usize * width + iw as usize;
                        if input[idx] > best || best_idx == usize::MAX {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, oh_n, ow_n)
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics normalization of an `[N, C, S]` layout.
/// Returns (normalized values, inverse std per channel).
pub fn batch_norm_forward(input: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut xhat = vec![0.0; input.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            mean += input[(b * c + ch) * s..][..s].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            var += input[(b * c + ch) * s..][..s]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        var /= m;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for k in 0..s {
                xhat[off + k] = (input[off + k] - mean) * is;
            }
        }
    }
    (xhat, inv_std)
}
