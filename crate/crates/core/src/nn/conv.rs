//! Convolution and pooling kernels on raw buffers.
//!
//! Convolutions go through im2col: each sample's receptive fields are laid out
//! as a `[C*k*k, Hout*Wout]` matrix and multiplied by the `[F, C*k*k]` kernel.
//! Work is split across samples only, and per-sample partial kernel gradients
//! are summed in sample order, so results do not depend on thread scheduling.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], filters: usize, kernel: usize, stride: usize) -> ConvGeometry {
        let [batch, in_channels, height, width] = input;
        let pad = (kernel - 1) / 2;
        ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.filters * self.out_pixels()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_height, self.out_width]
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let np = self.out_pixels();
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * np..][..np];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ki) as isize - p;
                        let dst = &mut row[oy * self.out_width..(oy + 1) * self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let np = self.out_pixels();
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * np..][..np];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_width {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += row[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let q = g.patch();
    let np = g.out_pixels();
    out.par_chunks_mut(g.out_sample())
        .zip(x.par_chunks(g.in_sample()))
        .for_each_init(
            || vec![0.0; q * np],
            |cols, (out_n, x_n)| {
                g.im2col(x_n, cols);
                for (f, row) in out_n.chunks_mut(np).enumerate() {
                    row.fill(b[f]);
                }
                // Four filters per pass share each im2col row; every output
                // still accumulates its taps in ascending order.
                for (block, rows) in out_n.chunks_mut(4 * np).enumerate() {
                    let f0 = block * 4;
                    let nf = rows.len() / np;
                    if nf == 4 {
                        let (r0, rest) = rows.split_at_mut(np);
                        let (r1, rest) = rest.split_at_mut(np);
                        let (r2, r3) = rest.split_at_mut(np);
                        for qi in 0..q {
                            let col = &cols[qi * np..(qi + 1) * np];
                            let (w0, w1, w2, w3) = (
                                w[f0 * q + qi],
                                w[(f0 + 1) * q + qi],
                                w[(f0 + 2) * q + qi],
                                w[(f0 + 3) * q + qi],
                            );
                            for p in 0..np {
                                let c = col[p];
                                r0[p] += w0 * c;
                                r1[p] += w1 * c;
                                r2[p] += w2 * c;
                                r3[p] += w3 * c;
                            }
                        }
                    } else {
                        for (i, row) in rows.chunks_mut(np).enumerate() {
                            let wf = &w[(f0 + i) * q..(f0 + i + 1) * q];
                            for (qi, &wv) in wf.iter().enumerate() {
                                let col = &cols[qi * np..(qi + 1) * np];
                                for (r, &cv) in row.iter_mut().zip(col) {
                                    *r += wv * cv;
                                }
                            }
                        }
                    }
                }
            },
        );
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads {
    let q = g.patch();
    let np = g.out_pixels();

    let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = dout
        .par_chunks(g.out_sample())
        .zip(x.par_chunks(g.in_sample()))
        .map(|(dout_n, x_n)| {
            let mut cols = vec![0.0; q * np];
            let dw = need_kernel.then(|| {
                g.im2col(x_n, &mut cols);
                let mut dw = vec![0.0; g.filters * q];
                let mut f = 0;
                while f + 4 <= g.filters {
                    let d = |i: usize| &dout_n[(f + i) * np..(f + i + 1) * np];
                    let rows = [d(0), d(1), d(2), d(3)];
                    for qi in 0..q {
                        let sums = dot4(&rows, &cols[qi * np..(qi + 1) * np]);
                        for (i, v) in sums.into_iter().enumerate() {
                            dw[(f + i) * q + qi] = v;
                        }
                    }
                    f += 4;
                }
                for f in f..g.filters {
                    let drow = &dout_n[f * np..(f + 1) * np];
                    for qi in 0..q {
                        dw[f * q + qi] = dot(drow, &cols[qi * np..(qi + 1) * np]);
                    }
                }
                dw
            });
            let dx = need_input.then(|| {
                // Each column entry sums over filters in ascending order.
                for qi in 0..q {
                    let col = &mut cols[qi * np..(qi + 1) * np];
                    col.fill(0.0);
                    let mut f = 0;
                    while f + 4 <= g.filters {
                        let d = |i: usize| &dout_n[(f + i) * np..(f + i + 1) * np];
                        let (d0, d1, d2, d3) = (d(0), d(1), d(2), d(3));
                        let (w0, w1, w2, w3) = (
                            w[f * q + qi],
                            w[(f + 1) * q + qi],
                            w[(f + 2) * q + qi],
                            w[(f + 3) * q + qi],
                        );
                        for p in 0..np {
                            col[p] = col[p] + w0 * d0[p] + w1 * d1[p] + w2 * d2[p] + w3 * d3[p];
                        }
                        f += 4;
                    }
                    for f in f..g.filters {
                        let wv = w[f * q + qi];
                        for (c, &d) in col.iter_mut().zip(&dout_n[f * np..(f + 1) * np]) {
                            *c += wv * d;
                        }
                    }
                }
                let mut dx = vec![0.0; g.in_sample()];
                g.col2im_add(&cols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let input = need_input.then(|| {
        let mut dx = Vec::with_capacity(g.batch * g.in_sample());
        for (d, _) in &partials {
            dx.extend_from_slice(d.as_ref().expect("input gradient computed"));
        }
        dx
    });
    let kernel = need_kernel.then(|| {
        let mut dw = vec![0.0; g.filters * q];
        for (_, d) in &partials {
            for (acc, v) in dw.iter_mut().zip(d.as_ref().expect("kernel gradient computed")) {
                *acc += v;
            }
        }
        dw
    });
    let bias = need_bias.then(|| {
        let mut db = vec![0.0; g.filters];
        for dout_n in dout.chunks(g.out_sample()) {
            for (f, acc) in db.iter_mut().enumerate() {
                *acc += dout_n[f * np..(f + 1) * np].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { input, kernel, bias }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[dot(rows[0], b), .., dot(rows[3], b)]`, each with the same accumulation
/// order as [`dot`].
#[inline]
fn dot4(rows: &[&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0; 4]; 4];
    let n = b.len() / 4 * 4;
    for j in (0..n).step_by(4) {
        let y = &b[j..j + 4];
        for (r, a) in rows.iter().zip(acc.iter_mut()) {
            let x = &r[j..j + 4];
            for i in 0..4 {
                a[i] += x[i] * y[i];
            }
        }
    }
    let mut out = [0.0; 4];
    for (k, r) in rows.iter().enumerate() {
        let tail: f64 = r[n..].iter().zip(&b[n..]).map(|(x, y)| x * y).sum();
        let a = acc[k];
        out[k] = (a[0] + a[1]) + (a[2] + a[3]) + tail;
    }
    out
}

/// 2x2 non-overlapping max pooling over `[planes, h, w]`. Returns the pooled
/// values and the flat input index chosen for each output (first maximum in
/// row-major order).
pub(crate) fn max_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[2 * i * ow + 2 * j]
                    + src[2 * i * ow + 2 * j + 1]
                    + src[(2 * i + 1) * ow + 2 * j]
                    + src[(2 * i + 1) * ow + 2 * j + 1];
            }
        }
    }
    dx
}
