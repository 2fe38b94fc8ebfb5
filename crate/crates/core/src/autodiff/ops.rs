//! Elementwise, reduction, linear-algebra and metric-loss operations.

use ndarray::{Array1, Array2, Axis, Ix1, Ix2};

use super::{Arr, BackFn, Tape, Var};
use crate::error::{Error, Result};

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d tensor")
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            va + vb
        };
        let backward: Option<BackFn> =
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]));
        self.push(value, vec![a.0, b.0], None, backward)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            va - vb
        };
        let backward: Option<BackFn> =
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.mapv(|x| -x))]));
        self.push(value, vec![a.0, b.0], None, backward)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            va * vb
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            vec![Some(g * ctx.parents[1]), Some(g * ctx.parents[0])]
        }));
        self.push(value, vec![a.0, b.0], None, backward)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let backward: Option<BackFn> = Some(Box::new(move |g, _| vec![Some(g.mapv(|x| x * c))]));
        self.push(value, vec![a.0], None, backward)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x.max(0.0));
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let mut dx = g.clone();
            dx.zip_mut_with(ctx.parents[0], |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![Some(dx)]
        }));
        self.push(value, vec![a.0], None, backward)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let mut dx = g.clone();
            dx.zip_mut_with(ctx.value, |d, &y| *d *= y * (1.0 - y));
            vec![Some(dx)]
        }));
        self.push(value, vec![a.0], None, backward)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Arr::from_elem(ndarray::IxDyn(&[]), nodes[a.0].value.sum())
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let s = g.iter().next().copied().unwrap();
            vec![Some(Arr::from_elem(ctx.parents[0].raw_dim(), s))]
        }));
        self.push(value, vec![a.0], None, backward)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (value, len) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let len = v.len() as f64;
            (Arr::from_elem(ndarray::IxDyn(&[]), v.sum() / len), len)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let s = g.iter().next().copied().unwrap() / len;
            vec![Some(Arr::from_elem(ctx.parents[0].raw_dim(), s))]
        }));
        self.push(value, vec![a.0], None, backward)
    }

    /// Reinterpret the value under a new shape with identical element count.
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize>;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            old_shape = v.shape().to_vec();
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>(),
                "reshape: element count mismatch"
            );
            v.as_standard_layout()
                .to_owned()
                .into_shape_with_order(ndarray::IxDyn(shape))
                .unwrap()
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(ndarray::IxDyn(&old_shape))
                    .unwrap(),
            )]
        }));
        self.push(value, vec![a.0], None, backward)
    }

    /// Matrix product `a (M,K) · b (K,N)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            as2(&nodes[a.0].value)
                .dot(&as2(&nodes[b.0].value))
                .into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let g2 = as2(g);
            let a2 = as2(ctx.parents[0]);
            let b2 = as2(ctx.parents[1]);
            let da = ctx.parent_needs[0].then(|| g2.dot(&b2.t()).into_dyn());
            let db = ctx.parent_needs[1].then(|| a2.t().dot(&g2).into_dyn());
            vec![da, db]
        }));
        self.push(value, vec![a.0, b.0], None, backward)
    }

    /// Matrix product with transposed right operand: `a (M,K) · bᵀ, b (N,K)`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            as2(&nodes[a.0].value)
                .dot(&as2(&nodes[b.0].value).t())
                .into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let g2 = as2(g);
            let a2 = as2(ctx.parents[0]);
            let b2 = as2(ctx.parents[1]);
            let da = ctx.parent_needs[0].then(|| g2.dot(&b2).into_dyn());
            let db = ctx.parent_needs[1].then(|| g2.t().dot(&a2).into_dyn());
            vec![da, db]
        }));
        self.push(value, vec![a.0, b.0], None, backward)
    }

    /// Row-broadcast bias add: `x (N,C) + b (C)`.
    pub fn add_bias_rows(&self, x: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            (&as2(&nodes[x.0].value) + &as1(&nodes[b.0].value)).into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, _| {
            let g2 = as2(g);
            vec![Some(g.clone()), Some(g2.sum_axis(Axis(0)).into_dyn())]
        }));
        self.push(value, vec![x.0, b.0], None, backward)
    }

    /// Global average pooling `(N,C,H,W) -> (N,C)`.
    pub fn gap_nchw(&self, x: Var) -> Var {
        let (value, hw) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            assert_eq!(v.ndim(), 4, "gap_nchw expects NCHW");
            let hw = (v.shape()[2] * v.shape()[3]) as f64;
            let pooled = v.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|s| s / hw);
            (pooled.into_dyn(), hw)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let shape = ctx.parents[0].shape().to_vec();
            let g2 = as2(g);
            let dx = g2
                .insert_axis(Axis(2))
                .insert_axis(Axis(3))
                .broadcast((shape[0], shape[1], shape[2], shape[3]))
                .unwrap()
                .mapv(|v| v / hw);
            vec![Some(dx.into_dyn())]
        }));
        self.push(value, vec![x.0], None, backward)
    }

    /// Mean across channels `(N,C,H,W) -> (N,H,W)`.
    pub fn channel_mean(&self, x: Var) -> Var {
        let (value, c) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            assert_eq!(v.ndim(), 4, "channel_mean expects NCHW");
            let c = v.shape()[1] as f64;
            (v.sum_axis(Axis(1)).mapv(|s| s / c).into_dyn(), c)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let shape = ctx.parents[0].shape().to_vec();
            let g3 = g
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .insert_axis(Axis(1));
            let dx = g3
                .broadcast((shape[0], shape[1], shape[2], shape[3]))
                .unwrap()
                .mapv(|v| v / c);
            vec![Some(dx.into_dyn())]
        }));
        self.push(value, vec![x.0], None, backward)
    }

    /// Per-channel scaling: `x (N,C,H,W) * s (N,C)` broadcast over space.
    pub fn scale_channels(&self, x: Var, s: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("scale_channels: x must be NCHW");
            let sv = as2(&nodes[s.0].value);
            assert_eq!(
                (xv.shape()[0], xv.shape()[1]),
                (sv.shape()[0], sv.shape()[1]),
                "scale_channels: N,C mismatch"
            );
            let sb = sv.insert_axis(Axis(2)).insert_axis(Axis(3));
            (&xv * &sb).into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let xv = ctx.parents[0]
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let sv = as2(ctx.parents[1]);
            let dx = ctx.parent_needs[0].then(|| {
                let sb = sv.insert_axis(Axis(2)).insert_axis(Axis(3));
                (&g4 * &sb).into_dyn()
            });
            let ds = ctx.parent_needs[1]
                .then(|| (&g4 * &xv).sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn());
            vec![dx, ds]
        }));
        self.push(value, vec![x.0, s.0], None, backward)
    }

    /// Spatial-map scaling: `x (N,C,H,W) * m (N,H,W)` broadcast over channels.
    pub fn scale_spatial(&self, x: Var, m: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("scale_spatial: x must be NCHW");
            let mv = nodes[m.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("scale_spatial: m must be NHW");
            assert_eq!(
                (xv.shape()[0], xv.shape()[2], xv.shape()[3]),
                (mv.shape()[0], mv.shape()[1], mv.shape()[2]),
                "scale_spatial: N,H,W mismatch"
            );
            let mb = mv.insert_axis(Axis(1));
            (&xv * &mb).into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let xv = ctx.parents[0]
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let mv = ctx.parents[1]
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let dx = ctx.parent_needs[0].then(|| {
                let mb = mv.insert_axis(Axis(1));
                (&g4 * &mb).into_dyn()
            });
            let dm = ctx.parent_needs[1].then(|| (&g4 * &xv).sum_axis(Axis(1)).into_dyn());
            vec![dx, dm]
        }));
        self.push(value, vec![x.0, m.0], None, backward)
    }

    /// Numerically stable row-wise log-softmax for `(N,I)` logits.
    pub fn log_softmax_rows(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let mut out = xv.to_owned();
            for mut row in out.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
                row.mapv_inplace(|v| v - lse);
            }
            out.into_dyn()
        };
        let backward: Option<BackFn> = Some(Box::new(|g, ctx| {
            let g2 = as2(g);
            let y2 = as2(ctx.value);
            let mut dx = g2.to_owned();
            for ((mut drow, grow), yrow) in dx.rows_mut().into_iter().zip(g2.rows()).zip(y2.rows())
            {
                let gsum: f64 = grow.sum();
                drow.zip_mut_with(&yrow, |d, &y| *d -= y.exp() * gsum);
            }
            vec![Some(dx.into_dyn())]
        }));
        self.push(value, vec![x.0], None, backward)
    }

    /// Negative mean of `logp[n, labels[n]]` over the batch.
    pub fn nll_rows(&self, logp: Var, labels: &[usize]) -> Var {
        let labels = labels.to_vec();
        let value = {
            let nodes = self.nodes.borrow();
            let lp = as2(&nodes[logp.0].value);
            assert_eq!(lp.shape()[0], labels.len(), "nll_rows: batch mismatch");
            let n = labels.len() as f64;
            let s: f64 = labels.iter().enumerate().map(|(i, &y)| lp[[i, y]]).sum();
            Arr::from_elem(ndarray::IxDyn(&[]), -s / n)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let gs = g.iter().next().copied().unwrap();
            let n = labels.len() as f64;
            let mut dx = Array2::<f64>::zeros((labels.len(), ctx.parents[0].shape()[1]));
            for (i, &y) in labels.iter().enumerate() {
                dx[[i, y]] = -gs / n;
            }
            vec![Some(dx.into_dyn())]
        }));
        self.push(value, vec![logp.0], None, backward)
    }

    /// Row-wise L2 normalization of `(N,D)`; errors on a zero-norm row.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let mut out = xv.to_owned();
            let mut norms = Array1::<f64>::zeros(xv.shape()[0]);
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    return Err(Error::ZeroNormEmbedding { row: i });
                }
                norms[i] = r;
                row.mapv_inplace(|v| v / r);
            }
            (out.into_dyn(), norms)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let g2 = as2(g);
            let y2 = as2(ctx.value);
            let mut dx = g2.to_owned();
            for ((mut drow, yrow), &r) in dx.rows_mut().into_iter().zip(y2.rows()).zip(norms.iter())
            {
                let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                drow.zip_mut_with(&yrow, |d, &y| *d = (*d - y * dot) / r);
            }
            vec![Some(dx.into_dyn())]
        }));
        Ok(self.push(value, vec![x.0], None, backward))
    }

    /// Contrastive objective over a cosine-similarity matrix `s (N,N)`.
    ///
    /// For each anchor `i`, positives are `j != i` with the same label and
    /// negatives are all samples with a different label. Each positive pair
    /// contributes `log(exp(s_ij) / (exp(s_ij) + sum_k exp(s_ik)))` with `k`
    /// ranging over the anchor's negatives. Anchors without positives are
    /// skipped and the normalizer counts only contributing anchors; with no
    /// contributing anchor the loss is 0.
    pub fn contrastive_from_similarity(&self, s: Var, labels: &[u32]) -> Var {
        let labels = labels.to_vec();
        let n = labels.len();
        let value = {
            let nodes = self.nodes.borrow();
            let sv = as2(&nodes[s.0].value);
            assert_eq!(sv.shape(), [n, n], "contrastive: similarity must be NxN");
            let mut total = 0.0;
            let mut contributing = 0usize;
            for i in 0..n {
                let pos: Vec<usize> = (0..n)
                    .filter(|&j| j != i && labels[j] == labels[i])
                    .collect();
                if pos.is_empty() {
                    continue;
                }
                contributing += 1;
                let nsum: f64 = (0..n)
                    .filter(|&k| labels[k] != labels[i])
                    .map(|k| sv[[i, k]].exp())
                    .sum();
                let mut li = 0.0;
                for &j in &pos {
                    let e = sv[[i, j]].exp();
                    li += sv[[i, j]] - (e + nsum).ln();
                }
                total += li / pos.len() as f64;
            }
            let loss = if contributing == 0 {
                0.0
            } else {
                -total / contributing as f64
            };
            Arr::from_elem(ndarray::IxDyn(&[]), loss)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let gs = g.iter().next().copied().unwrap();
            let sv = as2(ctx.parents[0]);
            let mut ds = Array2::<f64>::zeros((n, n));
            let contributing = (0..n)
                .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
                .count();
            if contributing > 0 {
                for i in 0..n {
                    let pos: Vec<usize> = (0..n)
                        .filter(|&j| j != i && labels[j] == labels[i])
                        .collect();
                    if pos.is_empty() {
                        continue;
                    }
                    let negs: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();
                    let nsum: f64 = negs.iter().map(|&k| sv[[i, k]].exp()).sum();
                    let w = 1.0 / (contributing as f64 * pos.len() as f64);
                    let mut inv_d_sum = 0.0;
                    for &j in &pos {
                        let d = sv[[i, j]].exp() + nsum;
                        ds[[i, j]] += -w * (1.0 - sv[[i, j]].exp() / d);
                        inv_d_sum += 1.0 / d;
                    }
                    for &k in &negs {
                        ds[[i, k]] += w * sv[[i, k]].exp() * inv_d_sum;
                    }
                }
            }
            ds.mapv_inplace(|v| v * gs);
            vec![Some(ds.into_dyn())]
        }));
        self.push(value, vec![s.0], None, backward)
    }

    /// Batch-hard triplet loss on `(N,D)` features with Euclidean distances.
    ///
    /// Per anchor the farthest positive and closest negative are selected
    /// (ties broken by lowest index) and hinged at the margin. Errors when an
    /// anchor lacks a positive or a negative.
    pub fn triplet_batch_hard(&self, f: Var, labels: &[u32], margin: f64) -> Result<Var> {
        let labels = labels.to_vec();
        let n = labels.len();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        struct Pick {
            pos: usize,
            neg: usize,
            d_pos: f64,
            d_neg: f64,
            active: bool,
        }
        let (value, picks) = {
            let nodes = self.nodes.borrow();
            let fv = as2(&nodes[f.0].value);
            assert_eq!(fv.shape()[0], n, "triplet: batch mismatch");
            let mut dist = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = fv
                        .row(i)
                        .iter()
                        .zip(fv.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    dist[[i, j]] = d;
                    dist[[j, i]] = d;
                }
            }
            let mut picks = Vec::with_capacity(n);
            let mut total = 0.0;
            for i in 0..n {
                let mut far_pos: Option<(usize, f64)> = None;
                let mut near_neg: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let d = dist[[i, j]];
                    if labels[j] == labels[i] {
                        if far_pos.is_none_or(|(_, best)| d > best) {
                            far_pos = Some((j, d));
                        }
                    } else if near_neg.is_none_or(|(_, best)| d < best) {
                        near_neg = Some((j, d));
                    }
                }
                let (pos, d_pos) = far_pos.ok_or(Error::DegenerateAnchor {
                    anchor: i,
                    kind: "positive",
                })?;
                let (neg, d_neg) = near_neg.ok_or(Error::DegenerateAnchor {
                    anchor: i,
                    kind: "negative",
                })?;
                let hinge = margin + d_pos - d_neg;
                if hinge > 0.0 {
                    total += hinge;
                }
                picks.push(Pick {
                    pos,
                    neg,
                    d_pos,
                    d_neg,
                    active: hinge > 0.0,
                });
            }
            (Arr::from_elem(ndarray::IxDyn(&[]), total / n as f64), picks)
        };
        let backward: Option<BackFn> = Some(Box::new(move |g, ctx| {
            let gs = g.iter().next().copied().unwrap() / n as f64;
            let fv = as2(ctx.parents[0]);
            let d = fv.shape()[1];
            let mut df = Array2::<f64>::zeros((n, d));
            for (i, pick) in picks.iter().enumerate() {
                if !pick.active {
                    continue;
                }
                if pick.d_pos > 0.0 {
                    for c in 0..d {
                        let u = (fv[[i, c]] - fv[[pick.pos, c]]) / pick.d_pos;
                        df[[i, c]] += gs * u;
                        df[[pick.pos, c]] -= gs * u;
                    }
                }
                if pick.d_neg > 0.0 {
                    for c in 0..d {
                        let u = (fv[[i, c]] - fv[[pick.neg, c]]) / pick.d_neg;
                        df[[i, c]] -= gs * u;
                        df[[pick.neg, c]] += gs * u;
                    }
                }
            }
            vec![Some(df.into_dyn())]
        }));
        Ok(self.push(value, vec![f.0], None, backward))
    }
}
