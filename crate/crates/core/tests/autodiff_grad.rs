//! Finite-difference verification of every tape operation's backward pass.

mod common;

use ccreid::autodiff::{Arr, ParamId, ParamStore, Tape, Var};
use common::{gradcheck, randn, rng, uniform};
use ndarray::IxDyn;

/// Builds a scalar objective `sum(weights * op(x))` so every output element
/// receives a distinct gradient signal.
fn weighted<F>(x0: &Arr, weights: Arr, op: F) -> impl FnMut(&Arr) -> (Tape, Var, ParamId) + '_
where
    F: Fn(&Tape, Var) -> Var + 'static,
{
    let _ = x0;
    move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let out = op(&tape, xv);
        let wv = tape.input(weights.clone());
        let root = tape.sum_all(tape.mul(out, wv));
        (tape, root, pid)
    }
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let x0 = randn(&mut r, &[3, 4]);
    let other = randn(&mut r, &[3, 4]);
    let w = randn(&mut r, &[3, 4]);

    let o = other.clone();
    gradcheck(
        "add",
        &x0,
        &mut weighted(&x0, w.clone(), move |t, x| t.add(x, t.input(o.clone()))),
    );
    let o = other.clone();
    gradcheck(
        "sub",
        &x0,
        &mut weighted(&x0, w.clone(), move |t, x| t.sub(x, t.input(o.clone()))),
    );
    let o = other.clone();
    gradcheck(
        "mul",
        &x0,
        &mut weighted(&x0, w.clone(), move |t, x| t.mul(x, t.input(o.clone()))),
    );
    gradcheck(
        "mul self (square)",
        &x0,
        &mut weighted(&x0, w.clone(), |t, x| t.mul(x, x)),
    );
    gradcheck(
        "scale",
        &x0,
        &mut weighted(&x0, w.clone(), |t, x| t.scale(x, -2.5)),
    );
    gradcheck(
        "sigmoid",
        &x0,
        &mut weighted(&x0, w.clone(), |t, x| t.sigmoid(x)),
    );
    // keep relu inputs away from the kink
    let x_far = x0.mapv(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    gradcheck(
        "relu",
        &x_far,
        &mut weighted(&x_far, w.clone(), |t, x| t.relu(x)),
    );
    gradcheck("reshape", &x0, &mut |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.reshape(xv, &[2, 6]);
        let wv = tape.input(Arr::from_elem(IxDyn(&[2, 6]), 0.7));
        let root = tape.sum_all(tape.mul(y, wv));
        (tape, root, pid)
    });
}

#[test]
fn reductions() {
    let mut r = rng(2);
    let x0 = randn(&mut r, &[4, 5]);
    gradcheck("sum_all", &x0, &mut |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let root = tape.sum_all(xv);
        (tape, root, pid)
    });
    gradcheck("mean_all", &x0, &mut |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let root = tape.mean_all(xv);
        (tape, root, pid)
    });
}

#[test]
fn matmul_ops() {
    let mut r = rng(3);
    let a0 = randn(&mut r, &[3, 4]);
    let b = randn(&mut r, &[4, 2]);
    let bt = randn(&mut r, &[2, 4]);
    let w = randn(&mut r, &[3, 2]);

    let bb = b.clone();
    let ww = w.clone();
    gradcheck("matmul lhs", &a0, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.matmul(xv, tape.input(bb.clone()));
        let root = tape.sum_all(tape.mul(y, tape.input(ww.clone())));
        (tape, root, pid)
    });
    let aa = a0.clone();
    let ww = w.clone();
    gradcheck("matmul rhs", &b, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.matmul(tape.input(aa.clone()), xv);
        let root = tape.sum_all(tape.mul(y, tape.input(ww.clone())));
        (tape, root, pid)
    });
    let ww = w.clone();
    let btc = bt.clone();
    gradcheck("matmul_nt lhs", &a0, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.matmul_nt(xv, tape.input(btc.clone()));
        let root = tape.sum_all(tape.mul(y, tape.input(ww.clone())));
        (tape, root, pid)
    });
    let aa = a0.clone();
    let ww = w.clone();
    gradcheck("matmul_nt rhs", &bt, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.matmul_nt(tape.input(aa.clone()), xv);
        let root = tape.sum_all(tape.mul(y, tape.input(ww.clone())));
        (tape, root, pid)
    });
    // similarity of a matrix with itself (both operands the same node)
    gradcheck("matmul_nt self-similarity", &a0, &mut |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.matmul_nt(xv, xv);
        let wv = tape.input(Arr::from_elem(IxDyn(&[3, 3]), 0.3));
        let root = tape.sum_all(tape.mul(y, wv));
        (tape, root, pid)
    });
}

#[test]
fn broadcast_ops() {
    let mut r = rng(4);
    let x0 = randn(&mut r, &[2, 4, 3, 5]);
    let s = randn(&mut r, &[2, 4]);
    let m = randn(&mut r, &[2, 3, 5]);
    let w4 = randn(&mut r, &[2, 4, 3, 5]);
    let w2 = randn(&mut r, &[2, 4]);
    let w3 = randn(&mut r, &[2, 3, 5]);

    let sc = s.clone();
    gradcheck(
        "scale_channels x",
        &x0,
        &mut weighted(&x0, w4.clone(), move |t, x| {
            t.scale_channels(x, t.input(sc.clone()))
        }),
    );
    let xc = x0.clone();
    let w4c = w4.clone();
    gradcheck("scale_channels s", &s, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.scale_channels(tape.input(xc.clone()), xv);
        let root = tape.sum_all(tape.mul(y, tape.input(w4c.clone())));
        (tape, root, pid)
    });
    let mc = m.clone();
    gradcheck(
        "scale_spatial x",
        &x0,
        &mut weighted(&x0, w4.clone(), move |t, x| {
            t.scale_spatial(x, t.input(mc.clone()))
        }),
    );
    let xc = x0.clone();
    let w4c = w4.clone();
    gradcheck("scale_spatial m", &m, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.scale_spatial(tape.input(xc.clone()), xv);
        let root = tape.sum_all(tape.mul(y, tape.input(w4c.clone())));
        (tape, root, pid)
    });
    gradcheck(
        "gap_nchw",
        &x0,
        &mut weighted(&x0, w2.clone(), |t, x| t.gap_nchw(x)),
    );
    gradcheck(
        "channel_mean",
        &x0,
        &mut weighted(&x0, w3.clone(), |t, x| t.channel_mean(x)),
    );
    let b = randn(&mut r, &[4]);
    let x2 = randn(&mut r, &[3, 4]);
    let bc = b.clone();
    gradcheck(
        "add_bias_rows x",
        &x2,
        &mut weighted(&x2, randn(&mut r, &[3, 4]), move |t, x| {
            t.add_bias_rows(x, t.input(bc.clone()))
        }),
    );
    let x2c = x2.clone();
    let wb = randn(&mut r, &[3, 4]);
    gradcheck("add_bias_rows b", &b, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.add_bias_rows(tape.input(x2c.clone()), xv);
        let root = tape.sum_all(tape.mul(y, tape.input(wb.clone())));
        (tape, root, pid)
    });
}

#[test]
fn classification_ops() {
    let mut r = rng(5);
    let logits = randn(&mut r, &[4, 6]);
    let labels = vec![2usize, 0, 5, 3];
    let w = randn(&mut r, &[4, 6]);
    gradcheck(
        "log_softmax",
        &logits,
        &mut weighted(&logits, w, |t, x| t.log_softmax_rows(x)),
    );
    let lbl = labels.clone();
    gradcheck("nll(log_softmax)", &logits, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let lp = tape.log_softmax_rows(xv);
        let root = tape.nll_rows(lp, &lbl);
        (tape, root, pid)
    });
}

#[test]
fn metric_ops() {
    let mut r = rng(6);
    let z = randn(&mut r, &[6, 5]);
    let labels = vec![0u32, 0, 1, 1, 2, 2];
    let w = randn(&mut r, &[6, 5]);
    gradcheck(
        "l2_normalize_rows",
        &z,
        &mut weighted(&z, w, |t, x| t.l2_normalize_rows(x).unwrap()),
    );
    let lbl = labels.clone();
    gradcheck("contrastive via similarity", &z, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let zn = tape.l2_normalize_rows(xv).unwrap();
        let s = tape.matmul_nt(zn, zn);
        let root = tape.contrastive_from_similarity(s, &lbl);
        (tape, root, pid)
    });
    // triplet: random features make ties/kinks measure-zero; margin large
    // enough that some anchors are active.
    let f = uniform(&mut r, &[6, 4], -1.0, 1.0);
    let lbl = labels.clone();
    gradcheck("triplet_batch_hard", &f, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let root = tape.triplet_batch_hard(xv, &lbl, 0.8).unwrap();
        (tape, root, pid)
    });
}

#[test]
fn conv_and_pool_ops() {
    let mut r = rng(7);
    let x0 = randn(&mut r, &[2, 3, 6, 5]);
    let w = randn(&mut r, &[4, 3, 3, 3]);
    let b = randn(&mut r, &[4]);
    let wsum = randn(&mut r, &[2, 4, 3, 3]);

    let (wc, bc, ws) = (w.clone(), b.clone(), wsum.clone());
    gradcheck("conv2d x", &x0, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.conv2d(
            xv,
            tape.input(wc.clone()),
            Some(tape.input(bc.clone())),
            2,
            1,
        );
        let root = tape.sum_all(tape.mul(y, tape.input(ws.clone())));
        (tape, root, pid)
    });
    let (xc, bc, ws) = (x0.clone(), b.clone(), wsum.clone());
    gradcheck("conv2d w", &w, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.conv2d(
            tape.input(xc.clone()),
            xv,
            Some(tape.input(bc.clone())),
            2,
            1,
        );
        let root = tape.sum_all(tape.mul(y, tape.input(ws.clone())));
        (tape, root, pid)
    });
    let (xc, wc, ws) = (x0.clone(), w.clone(), wsum.clone());
    gradcheck("conv2d b", &b, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.conv2d(
            tape.input(xc.clone()),
            tape.input(wc.clone()),
            Some(xv),
            2,
            1,
        );
        let root = tape.sum_all(tape.mul(y, tape.input(ws.clone())));
        (tape, root, pid)
    });

    // pooling: perturbations of 1e-5 cannot flip argmax for generic inputs
    let wp = randn(&mut r, &[2, 3, 3, 3]);
    gradcheck(
        "maxpool2d",
        &x0,
        &mut weighted(&x0, wp, |t, x| t.maxpool2d(x, 3, 2, 1)),
    );
    let x4 = randn(&mut r, &[2, 3, 5, 4]);
    let wpy = randn(&mut r, &[2, 3, 21]);
    gradcheck(
        "pyramid_max_pool",
        &x4,
        &mut weighted(&x4, wpy, |t, x| t.pyramid_max_pool(x, &[1, 2, 4])),
    );
}

#[test]
fn batchnorm_ops() {
    let mut r = rng(8);
    let x0 = randn(&mut r, &[3, 4, 2, 5]);
    let gamma = uniform(&mut r, &[4], 0.5, 1.5);
    let beta = randn(&mut r, &[4]);
    let w = randn(&mut r, &[3, 4, 2, 5]);

    let (gc, bc, wc) = (gamma.clone(), beta.clone(), w.clone());
    gradcheck("batchnorm_train x", &x0, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let (y, _, _) =
            tape.batchnorm_train(xv, tape.input(gc.clone()), tape.input(bc.clone()), 1e-5);
        let root = tape.sum_all(tape.mul(y, tape.input(wc.clone())));
        (tape, root, pid)
    });
    let (xc, bc, wc) = (x0.clone(), beta.clone(), w.clone());
    gradcheck("batchnorm_train gamma", &gamma, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let (y, _, _) =
            tape.batchnorm_train(tape.input(xc.clone()), xv, tape.input(bc.clone()), 1e-5);
        let root = tape.sum_all(tape.mul(y, tape.input(wc.clone())));
        (tape, root, pid)
    });
    let (xc, gc, wc) = (x0.clone(), gamma.clone(), w.clone());
    gradcheck("batchnorm_train beta", &beta, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let (y, _, _) =
            tape.batchnorm_train(tape.input(xc.clone()), tape.input(gc.clone()), xv, 1e-5);
        let root = tape.sum_all(tape.mul(y, tape.input(wc.clone())));
        (tape, root, pid)
    });
    let rm = randn(&mut r, &[4]);
    let rv = uniform(&mut r, &[4], 0.5, 2.0);
    let (gc, bc, wc, rmc, rvc) = (gamma.clone(), beta.clone(), w.clone(), rm, rv);
    gradcheck("batchnorm_eval x", &x0, &mut move |x: &Arr| {
        let mut store = ParamStore::new();
        let pid = store.add_param("x", x.clone());
        let tape = Tape::new();
        let xv = tape.param(pid, x.clone());
        let y = tape.batchnorm_eval(
            xv,
            tape.input(gc.clone()),
            tape.input(bc.clone()),
            &rmc.view().into_dimensionality().unwrap().to_owned(),
            &rvc.view().into_dimensionality().unwrap().to_owned(),
            1e-5,
        );
        let root = tape.sum_all(tape.mul(y, tape.input(wc.clone())));
        (tape, root, pid)
    });
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    // independent re-implementation: naive nested loops
    let mut r = rng(9);
    let x = randn(&mut r, &[2, 3, 7, 6]);
    let w = randn(&mut r, &[5, 3, 3, 3]);
    let b = randn(&mut r, &[5]);
    let (stride, pad) = (2usize, 1usize);
    let tape = Tape::new();
    let y = tape.conv2d(
        tape.input(x.clone()),
        tape.input(w.clone()),
        Some(tape.input(b.clone())),
        stride,
        pad,
    );
    let got = tape.value(y);

    let (ho, wo) = (
        (7 + 2 * pad - 3) / stride + 1,
        (6 + 2 * pad - 3) / stride + 1,
    );
    for n in 0..2 {
        for co in 0..5 {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b[[co]];
                    for ci in 0..3 {
                        for dh in 0..3 {
                            for dw in 0..3 {
                                let hh = (oh * stride + dh) as isize - pad as isize;
                                let ww = (ow * stride + dw) as isize - pad as isize;
                                if !(0..7).contains(&hh) || !(0..6).contains(&ww) {
                                    continue;
                                }
                                acc += x[[n, ci, hh as usize, ww as usize]] * w[[co, ci, dh, dw]];
                            }
                        }
                    }
                    let diff = (acc - got[[n, co, oh, ow]]).abs();
                    assert!(diff < 1e-10, "conv oracle mismatch at {n},{co},{oh},{ow}");
                }
            }
        }
    }
}
