//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Every value is a 2-D array. Ops record what backward needs; `backward`
//! walks the tape once in reverse. Scalar objectives whose gradient is cheaper
//! to write in closed form enter through [`Tape::scalar_loss`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial layout of image rows: each row is one image stored channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pooled(&self) -> ImageGeom {
        ImageGeom {
            channels: self.channels,
            height: self.height / 2,
            width: self.width / 2,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Relu(Var),
    Tanh(Var),
    SignSte(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    PrependCls {
        cls: Var,
        x: Var,
        pos: Var,
        clip_len: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        geom: ImageGeom,
    },
    AvgPool2 {
        x: Var,
        geom: ImageGeom,
    },
    GlobalAvgPool {
        x: Var,
        geom: ImageGeom,
    },
    ScalarLoss {
        x: Var,
        grad: Array2<f64>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

const CONV_CHUNK: usize = 16;

fn im2col(img: &[f64], geom: ImageGeom) -> Array2<f64> {
    let ImageGeom {
        channels,
        height: h,
        width: w,
    } = geom;
    let mut cols = Array2::<f64>::zeros((channels * 9, h * w));
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(c * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + x] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, geom: ImageGeom, out: &mut [f64]) {
    let ImageGeom {
        channels,
        height: h,
        width: w,
    } = geom;
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(c * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[c * h * w + sy as usize * w + sx as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn row_softmax_inplace(mut m: ArrayViewMut2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x·W + b` with `b` a 1×out row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut out = self.value(x).dot(self.value(w));
        out += self.value(b);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Forward `sign` with `sign(0) = +1`; backward passes the gradient through unchanged.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        self.push(out, Op::SignSte(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let mut xhat = xv - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention within consecutive blocks of `seq_len`
    /// rows, split column-wise into `heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(rows % seq_len, 0, "rows must be a multiple of seq_len");
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / seq_len;
        let results: Vec<(Array2<f64>, Array2<f64>)> = (0..blocks * heads)
            .into_par_iter()
            .map(|bh| {
                let (n, h) = (bh / heads, bh % heads);
                let r = s![n * seq_len..(n + 1) * seq_len, h * dh..(h + 1) * dh];
                let mut p = qv.slice(r).dot(&kv.slice(r).t()) * scale;
                row_softmax_inplace(p.view_mut());
                let o = p.dot(&vv.slice(r));
                (p, o)
            })
            .collect();
        let mut out = Array2::<f64>::zeros((rows, dim));
        let mut probs = Vec::with_capacity(results.len());
        for (bh, (p, o)) in results.into_iter().enumerate() {
            let (n, h) = (bh / heads, bh % heads);
            out.slice_mut(s![n * seq_len..(n + 1) * seq_len, h * dh..(h + 1) * dh])
                .assign(&o);
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Builds token sequences `[cls; x_1..x_T] + pos` for every clip, where
    /// `x` stacks clips of `clip_len` rows and `pos` has `clip_len + 1` rows.
    pub fn prepend_cls(&mut self, cls: Var, x: Var, pos: Var, clip_len: usize) -> Var {
        let (cv, xv, pv) = (self.value(cls), self.value(x), self.value(pos));
        let (rows, dim) = xv.dim();
        assert_eq!(rows % clip_len, 0);
        assert_eq!(pv.nrows(), clip_len + 1);
        let clips = rows / clip_len;
        let seq = clip_len + 1;
        let mut out = Array2::<f64>::zeros((clips * seq, dim));
        for n in 0..clips {
            let mut block = out.slice_mut(s![n * seq..(n + 1) * seq, ..]);
            block.row_mut(0).assign(&cv.row(0));
            block
                .slice_mut(s![1.., ..])
                .assign(&xv.slice(s![n * clip_len..(n + 1) * clip_len, ..]));
            block += pv;
        }
        self.push(
            out,
            Op::PrependCls {
                cls,
                x,
                pos,
                clip_len,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select(Axis(0), &rows);
        self.push(out, Op::GatherRows { x, rows })
    }

    /// 3×3 convolution, stride 1, zero padding 1. `w` is Cout×(Cin·9) with
    /// column index `c·9 + ky·3 + kx`; `b` is 1×Cout.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: ImageGeom) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ncols(), geom.len());
        assert_eq!(wv.ncols(), geom.channels * 9);
        let cout = wv.nrows();
        let hw = geom.height * geom.width;
        let mut out = Array2::<f64>::zeros((xv.nrows(), cout * hw));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(xv.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut o, img)| {
                let img = img.as_standard_layout();
                let cols = im2col(img.as_slice().unwrap(), geom);
                let mut res = bv.t().broadcast((cout, hw)).unwrap().to_owned();
                general_mat_mul(1.0, wv, &cols, 1.0, &mut res);
                o.assign(&ndarray::ArrayView1::from(res.as_slice().unwrap()));
            });
        self.push(out, Op::Conv3x3 { x, w, b, geom })
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var, geom: ImageGeom) -> Var {
        let xv = self.value(x);
        let og = geom.pooled();
        let mut out = Array2::<f64>::zeros((xv.nrows(), og.len()));
        Zip::from(out.rows_mut())
            .and(xv.rows())
            .for_each(|mut o, i| {
                for c in 0..geom.channels {
                    for y in 0..og.height {
                        for xx in 0..og.width {
                            let at = |dy: usize, dx: usize| {
                                i[c * geom.height * geom.width
                                    + (2 * y + dy) * geom.width
                                    + 2 * xx
                                    + dx]
                            };
                            o[c * og.height * og.width + y * og.width + xx] =
                                0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                        }
                    }
                }
            });
        self.push(out, Op::AvgPool2 { x, geom })
    }

    /// Mean over each channel plane, giving N×C.
    pub fn global_avg_pool(&mut self, x: Var, geom: ImageGeom) -> Var {
        let xv = self.value(x);
        let hw = geom.height * geom.width;
        let out = Array2::from_shape_fn((xv.nrows(), geom.channels), |(n, c)| {
            xv.slice(s![n, c * hw..(c + 1) * hw]).sum() / hw as f64
        });
        self.push(out, Op::GlobalAvgPool { x, geom })
    }

    /// Registers a scalar objective of `x` given its value and gradient.
    pub fn scalar_loss(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.value(x).dim());
        self.push(Array2::from_elem((1, 1), value), Op::ScalarLoss { x, grad })
    }

    pub fn sum(&mut self, terms: Vec<Var>) -> Var {
        let total: f64 = terms.iter().map(|&t| self.value(t).sum()).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(terms))
    }

    /// Reverse pass from a 1×1 root.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Linear { x, w, b } => {
                    let gx = g.dot(&self.value(*w).t());
                    let gw = self.value(*x).t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SignSte(x) => accumulate(&mut grads[x.0], g.clone()),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.ncols() as f64;
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut gx = dxhat * n - &sum_d - xhat * &sum_dx;
                    gx *= &(inv_std / n).insert_axis(Axis(1));
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, dim) = qv.dim();
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let parts: Vec<_> = probs
                        .par_iter()
                        .enumerate()
                        .map(|(bh, p)| {
                            let (n, h) = (bh / heads, bh % heads);
                            let r = s![n * seq_len..(n + 1) * seq_len, h * dh..(h + 1) * dh];
                            let go = g.slice(r);
                            let gv = p.t().dot(&go);
                            let gp = go.dot(&vv.slice(r).t());
                            let inner = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                            let gs = (gp - &inner) * p * scale;
                            let gq = gs.dot(&kv.slice(r));
                            let gk = gs.t().dot(&qv.slice(r));
                            (gq, gk, gv)
                        })
                        .collect();
                    let mut gq = Array2::<f64>::zeros((rows, dim));
                    let mut gk = Array2::<f64>::zeros((rows, dim));
                    let mut gv = Array2::<f64>::zeros((rows, dim));
                    for (bh, (a, b, c)) in parts.into_iter().enumerate() {
                        let (n, h) = (bh / heads, bh % heads);
                        let r = s![n * seq_len..(n + 1) * seq_len, h * dh..(h + 1) * dh];
                        gq.slice_mut(r).assign(&a);
                        gk.slice_mut(r).assign(&b);
                        gv.slice_mut(r).assign(&c);
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::PrependCls {
                    cls,
                    x,
                    pos,
                    clip_len,
                } => {
                    let seq = clip_len + 1;
                    let clips = g.nrows() / seq;
                    let dim = g.ncols();
                    let mut gcls = Array2::<f64>::zeros((1, dim));
                    let mut gpos = Array2::<f64>::zeros((seq, dim));
                    let mut gx = Array2::<f64>::zeros((clips * clip_len, dim));
                    for n in 0..clips {
                        let block = g.slice(s![n * seq..(n + 1) * seq, ..]);
                        gpos += &block;
                        let mut c = gcls.row_mut(0);
                        c += &block.row(0);
                        gx.slice_mut(s![n * clip_len..(n + 1) * clip_len, ..])
                            .assign(&block.slice(s![1.., ..]));
                    }
                    accumulate(&mut grads[cls.0], gcls);
                    accumulate(&mut grads[pos.0], gpos);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Conv3x3 { x, w, b, geom } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let cout = wv.nrows();
                    let hw = geom.height * geom.width;
                    let n = xv.nrows();
                    let chunks: Vec<_> = (0..n.div_ceil(CONV_CHUNK))
                        .into_par_iter()
                        .map(|ci| {
                            let mut gw = Array2::<f64>::zeros(wv.raw_dim());
                            let mut gb = Array2::<f64>::zeros((1, cout));
                            let lo = ci * CONV_CHUNK;
                            let hi = (lo + CONV_CHUNK).min(n);
                            let mut gx = Array2::<f64>::zeros((hi - lo, geom.len()));
                            for img in lo..hi {
                                let row = xv.row(img);
                                let row = row.as_standard_layout();
                                let cols = im2col(row.as_slice().unwrap(), *geom);
                                let go = g.row(img);
                                let go = go.as_standard_layout();
                                let go = ArrayView2::from_shape((cout, hw), go.as_slice().unwrap())
                                    .unwrap();
                                general_mat_mul(1.0, &go, &cols.t(), 1.0, &mut gw);
                                let mut bsum = gb.row_mut(0);
                                bsum += &go.sum_axis(Axis(1));
                                let gcols = wv.t().dot(&go);
                                let mut dst = gx.row_mut(img - lo);
                                col2im_add(&gcols, *geom, dst.as_slice_mut().unwrap());
                            }
                            (gw, gb, gx)
                        })
                        .collect();
                    let mut gw = Array2::<f64>::zeros(wv.raw_dim());
                    let mut gb = Array2::<f64>::zeros((1, cout));
                    let mut gx = Array2::<f64>::zeros(xv.raw_dim());
                    for (ci, (a, b2, c)) in chunks.into_iter().enumerate() {
                        gw += &a;
                        gb += &b2;
                        let lo = ci * CONV_CHUNK;
                        gx.slice_mut(s![lo..lo + c.nrows(), ..]).assign(&c);
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AvgPool2 { x, geom } => {
                    let og = geom.pooled();
                    let mut gx = Array2::<f64>::zeros(self.value(*x).raw_dim());
                    Zip::from(gx.rows_mut())
                        .and(g.rows())
                        .for_each(|mut gi, go| {
                            for c in 0..geom.channels {
                                for y in 0..og.height {
                                    for xx in 0..og.width {
                                        let v =
                                            0.25 * go[c * og.height * og.width + y * og.width + xx];
                                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                            gi[c * geom.height * geom.width
                                                + (2 * y + dy) * geom.width
                                                + 2 * xx
                                                + dx] += v;
                                        }
                                    }
                                }
                            }
                        });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GlobalAvgPool { x, geom } => {
                    let hw = geom.height * geom.width;
                    let gx = Array2::from_shape_fn(self.value(*x).raw_dim(), |(n, j)| {
                        g[[n, j / hw]] / hw as f64
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ScalarLoss { x, grad } => {
                    accumulate(&mut grads[x.0], grad * g[[0, 0]]);
                }
                Op::Sum(terms) => {
                    for t in terms {
                        let gt = Array2::from_elem(self.value(*t).raw_dim(), g[[0, 0]]);
                        accumulate(&mut grads[t.0], gt);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }
}
