//! Convolution, pooling and batch-normalization tape operations.
//!
//! Convolutions run as one whole-batch im2col GEMM per call, which is the
//! right shape for the small feature maps this crate trains on.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis, Ix1, Ix4};

use super::{Arr, BackFn, Tape, Var};

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("NCHW tensor")
}

fn bcast_c(a: &Array1<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view()
        .insert_axis(Axis(0))
        .insert_axis(Axis(2))
        .insert_axis(Axis(3))
        .into_dimensionality::<Ix4>()
        .unwrap()
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn im2col(x: &ArrayView4<'_, f64>, d: &ConvDims) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let (ci, h, w) = (d.ci, d.h, d.w);
    let ck = ci * d.kh * d.kw;
    let mut col = Array2::<f64>::zeros((d.n * d.ho * d.wo, ck));
    let csl = col.as_slice_mut().unwrap();
    for n in 0..d.n {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let row = ((n * d.ho + ho) * d.wo + wo) * ck;
                let h0 = (ho * d.stride) as isize - d.pad as isize;
                let w0 = (wo * d.stride) as isize - d.pad as isize;
                for c in 0..ci {
                    let xb = (n * ci + c) * h * w;
                    let cb = row + c * d.kh * d.kw;
                    for dh in 0..d.kh {
                        let hh = h0 + dh as isize;
                        if hh < 0 || hh >= h as isize {
                            continue;
                        }
                        for dw in 0..d.kw {
                            let ww = w0 + dw as isize;
                            if ww < 0 || ww >= w as isize {
                                continue;
                            }
                            csl[cb + dh * d.kw + dw] = xsl[xb + hh as usize * w + ww as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, d: &ConvDims) -> Array4<f64> {
    let ck = d.ci * d.kh * d.kw;
    let mut dx = Array4::<f64>::zeros((d.n, d.ci, d.h, d.w));
    let dxs = dx.as_slice_mut().unwrap();
    let dsl = dcol.as_slice().unwrap();
    for n in 0..d.n {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let row = ((n * d.ho + ho) * d.wo + wo) * ck;
                let h0 = (ho * d.stride) as isize - d.pad as isize;
                let w0 = (wo * d.stride) as isize - d.pad as isize;
                for c in 0..d.ci {
                    let xb = (n * d.ci + c) * d.h * d.w;
                    let cb = row + c * d.kh * d.kw;
                    for dh in 0..d.kh {
                        let hh = h0 + dh as isize;
                        if hh < 0 || hh >= d.h as isize {
                            continue;
                        }
                        for dw in 0..d.kw {
                            let ww = w0 + dw as isize;
                            if ww < 0 || ww >= d.w as isize {
                                continue;
                            }
                            dxs[xb + hh as usize * d.w + ww as usize] += dsl[cb + dh * d.kw + dw];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// 2-d convolution of `x (N,Ci,H,W)` with `w (Co,Ci,kh,kw)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let (value, dims, col) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let wv = as4(&nodes[w.0].value);
            let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (co, wci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            assert_eq!(ci, wci, "conv2d: channel mismatch");
            assert!(
                h + 2 * pad >= kh && wd + 2 * pad >= kw,
                "conv2d: kernel larger than padded input"
            );
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let dims = ConvDims {
                n,
                ci,
                h,
                w: wd,
                co,
                kh,
                kw,
                ho,
                wo,
                stride,
                pad,
            };
            let col = im2col(&xv, &dims);
            let w_mat = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();
            let out_mat = col.dot(&w_mat.t()); // (N*Ho*Wo, Co)
            let mut out = out_mat
                .into_shape_with_order((n, ho, wo, co))
                .unwrap()
                .permuted_axes([0, 3, 1, 2])
                .as_standard_layout()
                .to_owned();
            if let Some(bv) = b {
                let bias = nodes[bv.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("conv2d: bias must be 1-d");
                out += &bcast_c(&bias.to_owned());
            }
            (out.into_dyn(), dims, col)
        };
        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let has_bias = b.is_some();
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let d = &dims;
            let g_mat = as4(g)
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((d.n * d.ho * d.wo, d.co))
                .unwrap();
            let wv = as4(ctx.parents[1]);
            let dw = ctx.parent_needs[1].then(|| {
                g_mat
                    .t()
                    .dot(&col)
                    .into_shape_with_order((d.co, d.ci, d.kh, d.kw))
                    .unwrap()
                    .into_dyn()
            });
            let dx = ctx.parent_needs[0].then(|| {
                let w_mat = wv.to_shape((d.co, d.ci * d.kh * d.kw)).unwrap().to_owned();
                let dcol = g_mat.dot(&w_mat);
                col2im(&dcol, d).into_dyn()
            });
            let mut out = vec![dx, dw];
            if has_bias {
                let db = ctx.parent_needs[2].then(|| g_mat.sum_axis(Axis(0)).into_dyn());
                out.push(db);
            }
            out
        }));
        self.push(value, parents, None, backward)
    }

    /// Max pooling with square window; out-of-bounds padding is ignored.
    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (value, argmax, in_shape) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let xs = xv.as_standard_layout();
            let xsl = xs.as_slice().unwrap();
            let mut out = Array4::<f64>::zeros((n, c, ho, wo));
            let mut argmax = vec![0usize; n * c * ho * wo];
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ho_i in 0..ho {
                        for wo_i in 0..wo {
                            let h0 = (ho_i * stride) as isize - pad as isize;
                            let w0 = (wo_i * stride) as isize - pad as isize;
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dh in 0..k {
                                let hh = h0 + dh as isize;
                                if hh < 0 || hh >= h as isize {
                                    continue;
                                }
                                for dw in 0..k {
                                    let ww = w0 + dw as isize;
                                    if ww < 0 || ww >= w as isize {
                                        continue;
                                    }
                                    let idx = base + hh as usize * w + ww as usize;
                                    if xsl[idx] > best {
                                        best = xsl[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[[ni, ci, ho_i, wo_i]] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
            (out.into_dyn(), argmax, vec![n, c, h, w])
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, _| {
            let mut dx = Arr::zeros(ndarray::IxDyn(&in_shape));
            let dxs = dx.as_slice_mut().unwrap();
            let gs = g.as_standard_layout();
            for (&src, &gv) in argmax.iter().zip(gs.as_slice().unwrap()) {
                dxs[src] += gv;
            }
            vec![Some(dx)]
        }));
        self.push(value, vec![x.0], None, backward)
    }

    /// Pyramid max pooling: grids of `g x g` bins per entry of `grids`,
    /// concatenated row-major per grid, producing `(N, C, sum g^2)`.
    ///
    /// Bin boundaries are `ceil(b*H/g)`, so uneven sizes split
    /// deterministically; every bin is non-empty when `H, W >= max(grids)`.
    pub fn pyramid_max_pool(&self, x: Var, grids: &[usize]) -> Var {
        let grids = grids.to_vec();
        let t: usize = grids.iter().map(|g| g * g).sum();
        let (value, argmax, in_shape) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let max_g = grids.iter().copied().max().unwrap_or(1);
            assert!(
                h >= max_g && w >= max_g,
                "pyramid_max_pool: spatial size {h}x{w} below grid {max_g}"
            );
            let edge = |b: usize, len: usize, g: usize| (b * len).div_ceil(g);
            let xs = xv.as_standard_layout();
            let xsl = xs.as_slice().unwrap();
            let mut out = Arr::zeros(ndarray::IxDyn(&[n, c, t]));
            let osl = out.as_slice_mut().unwrap();
            let mut argmax = vec![0usize; n * c * t];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let mut part = 0usize;
                    for &g in &grids {
                        for br in 0..g {
                            let (rs, re) = (edge(br, h, g), edge(br + 1, h, g));
                            for bc in 0..g {
                                let (cs, ce) = (edge(bc, w, g), edge(bc + 1, w, g));
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for hh in rs..re {
                                    for ww in cs..ce {
                                        let idx = base + hh * w + ww;
                                        if xsl[idx] > best {
                                            best = xsl[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                let oi = (ni * c + ci) * t + part;
                                osl[oi] = best;
                                argmax[oi] = best_idx;
                                part += 1;
                            }
                        }
                    }
                }
            }
            (out, argmax, vec![n, c, h, w])
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, _| {
            let mut dx = Arr::zeros(ndarray::IxDyn(&in_shape));
            let dxs = dx.as_slice_mut().unwrap();
            let gs = g.as_standard_layout();
            for (&src, &gv) in argmax.iter().zip(gs.as_slice().unwrap()) {
                dxs[src] += gv;
            }
            vec![Some(dx)]
        }));
        self.push(value, vec![x.0], None, backward)
    }

    /// Batch normalization in training mode: normalizes by the batch
    /// statistics and returns them so the caller can update running buffers.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let (value, xhat, inv_std, mean, var, m) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let gv = nodes[gamma.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let bv = nodes[beta.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            assert_eq!(gv.len(), c, "batchnorm: gamma size mismatch");
            let m = (n * h * w) as f64;
            let mean = xv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
            let mut var = Array1::<f64>::zeros(c);
            for ni in 0..n {
                for ci in 0..c {
                    let mu = mean[ci];
                    let mut acc = 0.0;
                    for hh in 0..h {
                        for ww in 0..w {
                            let d = xv[[ni, ci, hh, ww]] - mu;
                            acc += d * d;
                        }
                    }
                    var[ci] += acc;
                }
            }
            var.mapv_inplace(|v| v / m);
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = (&xv - &bcast_c(&mean)) * bcast_c(&inv_std);
            let y = &xhat * &bcast_c(&gv) + bcast_c(&bv);
            (y.into_dyn(), xhat, inv_std, mean, var, m)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let g4 = as4(g);
            let gv = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
            let dbeta = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let dgamma = (&g4 * &xhat.view())
                .sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .sum_axis(Axis(0));
            let dx = ctx.parent_needs[0].then(|| {
                let dxhat = &g4 * &bcast_c(&gv.to_owned());
                let sum_dxhat = dxhat.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &xhat.view())
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0));
                let t = &(&dxhat * m)
                    - &bcast_c(&sum_dxhat)
                    - &(&xhat.view() * &bcast_c(&sum_dxhat_xhat));
                (&t * &bcast_c(&inv_std)).mapv(|v| v / m).into_dyn()
            });
            vec![dx, Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        }));
        let out = self.push(value, vec![x.0, gamma.0, beta.0], None, backward);
        (out, mean, var)
    }

    /// Batch normalization in inference mode using running statistics.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mean = running_mean.clone();
        let value = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let gv = nodes[gamma.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let bv = nodes[beta.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let xhat = (&xv - &bcast_c(&mean)) * bcast_c(&inv_std);
            (&xhat * &bcast_c(&gv) + bcast_c(&bv)).into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let g4 = as4(g);
            let xv = as4(ctx.parents[0]);
            let gv = ctx.parents[1]
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let xhat = (&xv - &bcast_c(&mean)) * bcast_c(&inv_std);
            let dx = ctx.parent_needs[0].then(|| {
                let scale = &gv * &inv_std;
                (&g4 * &bcast_c(&scale)).into_dyn()
            });
            let dgamma = (&g4 * &xhat)
                .sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .sum_axis(Axis(0));
            let dbeta = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            vec![dx, Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        }));
        self.push(value, vec![x.0, gamma.0, beta.0], None, backward)
    }
}
