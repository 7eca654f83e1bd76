//! Minimal reverse-mode autodiff tape.
//!
//! The tape records a forward computation as a flat list of nodes (leaves and
//! primitive ops) and replays it backwards to accumulate gradients. It covers
//! exactly the primitives the bundled models and attack objectives need:
//! convolution, ELU, bilinear upsampling, horizontal correlation volumes,
//! soft-argmin disparity regression, disparity-guided warping, masked cosine
//! dissimilarity, smooth-L1, and a few glue ops. Everything is `f64`.
//!
//! Nodes are appended in evaluation order, so the reverse index order is a
//! valid topological order for the backward sweep. A tape is built per
//! forward pass and dropped afterwards; it is not thread-safe and not meant
//! to be reused.

use std::cell::{Ref, RefCell};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};
use crate::ops;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Score assigned to correlation candidates that fall outside the image;
/// low enough that soft-argmin assigns them vanishing weight, finite enough
/// that exponentials stay well-behaved.
pub const INVALID_SCORE: f64 = -1.0e4;

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Elu {
        input: usize,
    },
    UpsampleBilinear {
        input: usize,
    },
    CorrelationVolume {
        left: usize,
        right: usize,
    },
    SoftArgMin {
        scores: usize,
    },
    WarpHorizontal {
        feature: usize,
        disp: Array2<f64>,
        mask: Array2<bool>,
        sign: f64,
    },
    CosineDissim {
        a: usize,
        b: usize,
        mask: Array2<bool>,
    },
    SmoothL1 {
        pred: usize,
        target: Array2<f64>,
        valid: Array2<bool>,
    },
    Add {
        a: usize,
        b: usize,
    },
    MulElem {
        a: usize,
        b: usize,
    },
    SumAll {
        input: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    MulScalarVar {
        input: usize,
        scalar: usize,
    },
    SelectChannels {
        input: usize,
        indices: Vec<usize>,
    },
    GlobalMeanPool {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn get3(&self, v: Var) -> Option<Array3<f64>> {
        self.get(v)
            .map(|g| g.clone().into_dimensionality::<Ix3>().unwrap())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    // ---------------- leaves and accessors ----------------

    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf1(&self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf3(&self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf4(&self, value: Array4<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf_scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn value_ref(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.value_ref(v).clone()
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        self.value(v).into_dimensionality::<Ix2>().unwrap()
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        self.value(v).into_dimensionality::<Ix3>().unwrap()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let r = self.value_ref(v);
        debug_assert_eq!(r.len(), 1);
        *r.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value_ref(v).shape().to_vec()
    }

    fn dim3(&self, v: Var) -> (usize, usize, usize) {
        let shape = self.shape(v);
        assert_eq!(shape.len(), 3, "expected a rank-3 value, got {shape:?}");
        (shape[0], shape[1], shape[2])
    }

    // ---------------- primitives ----------------

    /// 2-D convolution over an `(H, W, Cin)` input with an
    /// `(Kh, Kw, Cin, Cout)` kernel and `(Cout,)` bias.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv2d_forward(
                nodes[input.0].value.view().into_dimensionality().unwrap(),
                nodes[weight.0].value.view().into_dimensionality().unwrap(),
                nodes[bias.0].value.view().into_dimensionality().unwrap(),
                stride,
                pad,
            )
        };
        self.push(
            value.into_dyn(),
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad,
            },
        )
    }

    /// Exponential linear unit, alpha = 1. Smooth (C1) everywhere, which
    /// keeps finite-difference gradient checks well conditioned.
    pub fn elu(&self, input: Var) -> Var {
        let value = self
            .value_ref(input)
            .mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(value, Op::Elu { input: input.0 })
    }

    /// Bilinear upsampling of an `(H, W, C)` grid to `(out_h, out_w, C)`,
    /// half-pixel aligned.
    pub fn upsample_bilinear(&self, input: Var, out_h: usize, out_w: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            upsample_forward(&x.to_owned(), out_h, out_w)
        };
        self.push(value.into_dyn(), Op::UpsampleBilinear { input: input.0 })
    }

    /// Horizontal correlation cost volume: channel-mean dot product between
    /// the left feature at `u` and the right feature at `u - d`, for
    /// `d in 0..=max_disp`. Out-of-bounds candidates get [`INVALID_SCORE`].
    pub fn correlation_volume(&self, left: Var, right: Var, max_disp: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let l = nodes[left.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let r = nodes[right.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let (h, w, c) = l.dim();
            assert_eq!(l.dim(), r.dim(), "correlation inputs must match");
            let mut vol = Array3::from_elem((h, w, max_disp + 1), INVALID_SCORE);
            let inv_c = 1.0 / c as f64;
            for v in 0..h {
                for u in 0..w {
                    for d in 0..=max_disp.min(u) {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += l[(v, u, ch)] * r[(v, u - d, ch)];
                        }
                        vol[(v, u, d)] = dot * inv_c;
                    }
                }
            }
            vol
        };
        self.push(
            value.into_dyn(),
            Op::CorrelationVolume {
                left: left.0,
                right: right.0,
            },
        )
    }

    /// Softmax-weighted disparity expectation over the last axis of an
    /// `(H, W, D)` score volume: `sum_d d * softmax(scores)_d`, in
    /// `[0, D - 1]` by construction.
    pub fn soft_argmin(&self, scores: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s = nodes[scores.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let (h, w, nd) = s.dim();
            let mut out = Array2::zeros((h, w));
            let mut weights = vec![0.0; nd];
            for v in 0..h {
                for u in 0..w {
                    softmax_row(&s, v, u, &mut weights);
                    out[(v, u)] = weights
                        .iter()
                        .enumerate()
                        .map(|(d, &wgt)| d as f64 * wgt)
                        .sum();
                }
            }
            out
        };
        self.push(value.into_dyn(), Op::SoftArgMin { scores: scores.0 })
    }

    /// Disparity-guided horizontal warp; the disparity is a constant of the
    /// graph (gradients flow only into the feature). Returns the warped
    /// feature and the in-bounds/valid mask.
    pub fn warp_horizontal(
        &self,
        feature: Var,
        disp: &Array2<f64>,
        disp_valid: &Array2<bool>,
        sign: f64,
    ) -> Result<(Var, Array2<bool>)> {
        let (h, w, _) = self.dim3(feature);
        if disp.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "disparity shape {:?} != feature grid ({h}, {w})",
                disp.dim()
            )));
        }
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let f = nodes[feature.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            ops::warp_horizontal_raw(&f.to_owned(), disp, disp_valid, sign)
        };
        let var = self.push(
            value.into_dyn(),
            Op::WarpHorizontal {
                feature: feature.0,
                disp: disp.clone(),
                mask: mask.clone(),
                sign,
            },
        );
        Ok((var, mask))
    }

    /// Masked mean cosine dissimilarity between two `(H, W, C)` features;
    /// scalar output in `[0, 2]`, differentiable in both inputs.
    pub fn cosine_dissimilarity(&self, a: Var, b: Var, mask: &Array2<bool>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            ops::cosine_dissimilarity_raw(&av.to_owned(), &bv.to_owned(), mask)?
        };
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::CosineDissim {
                a: a.0,
                b: b.0,
                mask: mask.clone(),
            },
        ))
    }

    /// Smooth-L1 (transition point 1.0) between a predicted `(H, W)` grid and
    /// a constant target, averaged over the target's valid pixels.
    pub fn smooth_l1(&self, pred: Var, target: &Array2<f64>, valid: &Array2<bool>) -> Result<Var> {
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::DegenerateInput(
                "smooth-L1 with no valid reference pixels".into(),
            ));
        }
        let value = {
            let p = self.value2(pred);
            if p.dim() != target.dim() {
                return Err(Error::InvalidInput(format!(
                    "prediction shape {:?} != reference shape {:?}",
                    p.dim(),
                    target.dim()
                )));
            }
            let mut sum = 0.0;
            for ((v, u), &ok) in valid.indexed_iter() {
                if ok {
                    let e = (p[(v, u)] - target[(v, u)]).abs();
                    sum += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
                }
            }
            sum / count as f64
        };
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::SmoothL1 {
                pred: pred.0,
                target: target.clone(),
                valid: valid.clone(),
            },
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(value, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise product of two equally shaped values.
    pub fn mul_elem(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(value, Op::MulElem { a: a.0, b: b.0 })
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum_all(&self, input: Var) -> Var {
        let value = self.value_ref(input).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::SumAll { input: input.0 },
        )
    }

    pub fn scale(&self, input: Var, factor: f64) -> Var {
        let value = self.value_ref(input).mapv(|x| x * factor);
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
        )
    }

    /// Multiplies every element of `input` by a single-element scalar
    /// variable (used for trainable gains).
    pub fn mul_scalar_var(&self, input: Var, scalar: Var) -> Var {
        let s = self.scalar_value(scalar);
        let value = self.value_ref(input).mapv(|x| x * s);
        self.push(
            value,
            Op::MulScalarVar {
                input: input.0,
                scalar: scalar.0,
            },
        )
    }

    /// Gathers the given channel indices from an `(H, W, C)` value.
    pub fn select_channels(&self, input: Var, indices: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let (h, w, _) = x.dim();
            let mut out = Array3::zeros((h, w, indices.len()));
            for v in 0..h {
                for u in 0..w {
                    for (slot, &c) in indices.iter().enumerate() {
                        out[(v, u, slot)] = x[(v, u, c)];
                    }
                }
            }
            out
        };
        self.push(
            value.into_dyn(),
            Op::SelectChannels {
                input: input.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean over the spatial grid of an `(H, W, C)` value, yielding `(C,)`.
    pub fn global_mean_pool(&self, input: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let (h, w, c) = x.dim();
            let mut out = Array1::zeros(c);
            for v in 0..h {
                for u in 0..w {
                    for ch in 0..c {
                        out[ch] += x[(v, u, ch)];
                    }
                }
            }
            out / (h * w) as f64
        };
        self.push(value.into_dyn(), Op::GlobalMeanPool { input: input.0 })
    }

    /// Fully connected layer: `(Cin,) x (Cin, Cout) + (Cout,)`.
    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let w = nodes[weight.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            let b = nodes[bias.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let mut out = b.to_owned();
            for i in 0..w.nrows() {
                let xi = x[i];
                for j in 0..w.ncols() {
                    out[j] += xi * w[(i, j)];
                }
            }
            out
        };
        self.push(
            value.into_dyn(),
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    /// Cross entropy of a logit vector against a class index.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Var {
        let value = {
            let l = self
                .value(logits)
                .into_dimensionality::<Ix1>()
                .unwrap();
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            lse - l[target]
        };
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::CrossEntropy {
                logits: logits.0,
                target,
            },
        )
    }

    // ---------------- backward ----------------

    /// Accumulates gradients of a scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            backward_step(&nodes, i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, contribution: ArrayD<f64>) {
    match slot {
        Some(existing) => *existing += &contribution,
        None => *slot = Some(contribution),
    }
}

fn softmax_row(scores: &ndarray::ArrayView3<'_, f64>, v: usize, u: usize, out: &mut [f64]) {
    let nd = out.len();
    let mut max = f64::NEG_INFINITY;
    for d in 0..nd {
        max = max.max(scores[(v, u, d)]);
    }
    let mut total = 0.0;
    for d in 0..nd {
        let e = (scores[(v, u, d)] - max).exp();
        out[d] = e;
        total += e;
    }
    for w in out.iter_mut() {
        *w /= total;
    }
}

fn conv2d_forward(
    input: ndarray::ArrayView3<'_, f64>,
    weight: ndarray::ArrayView4<'_, f64>,
    bias: ndarray::ArrayView1<'_, f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (h, w, cin) = input.dim();
    let (kh, kw, wcin, cout) = weight.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Array3::zeros((oh, ow, cout));
    for ov in 0..oh {
        for ou in 0..ow {
            let mut acc: Vec<f64> = bias.to_vec();
            for dv in 0..kh {
                let iv = (ov * stride + dv) as isize - pad as isize;
                if iv < 0 || iv >= h as isize {
                    continue;
                }
                for du in 0..kw {
                    let iu = (ou * stride + du) as isize - pad as isize;
                    if iu < 0 || iu >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        let x = input[(iv as usize, iu as usize, ci)];
                        if x == 0.0 {
                            continue;
                        }
                        for (co, a) in acc.iter_mut().enumerate() {
                            *a += x * weight[(dv, du, ci, co)];
                        }
                    }
                }
            }
            for (co, a) in acc.into_iter().enumerate() {
                out[(ov, ou, co)] = a;
            }
        }
    }
    out
}

fn upsample_axis_plan(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    // Half-pixel alignment: dst index o samples src at (o + 0.5) * s/d - 0.5.
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let t = x - i0 as f64;
            let i1 = if t > 0.0 { i0 + 1 } else { i0 };
            (i0, i1, t)
        })
        .collect()
}

fn upsample_forward(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = input.dim();
    let rows = upsample_axis_plan(h, out_h);
    let cols = upsample_axis_plan(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (ov, &(v0, v1, tv)) in rows.iter().enumerate() {
        for (ou, &(u0, u1, tu)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = (1.0 - tu) * input[(v0, u0, ch)] + tu * input[(v0, u1, ch)];
                let bot = (1.0 - tu) * input[(v1, u0, ch)] + tu * input[(v1, u1, ch)];
                out[(ov, ou, ch)] = (1.0 - tv) * top + tv * bot;
            }
        }
    }
    out
}

fn backward_step(nodes: &[Node], index: usize, grad: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    match &nodes[index].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let gout = grad.view().into_dimensionality::<Ix3>().unwrap();
            let x = nodes[*input].value.view().into_dimensionality::<Ix3>().unwrap();
            let w = nodes[*weight]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let (h, iw, cin) = x.dim();
            let (kh, kw, _, cout) = w.dim();
            let (oh, ow, _) = gout.dim();
            let mut gx = Array3::zeros((h, iw, cin));
            let mut gw = Array4::zeros((kh, kw, cin, cout));
            let mut gb = Array1::zeros(cout);
            for ov in 0..oh {
                for ou in 0..ow {
                    for co in 0..cout {
                        gb[co] += gout[(ov, ou, co)];
                    }
                    for dv in 0..kh {
                        let iv = (ov * stride + dv) as isize - *pad as isize;
                        if iv < 0 || iv >= h as isize {
                            continue;
                        }
                        for du in 0..kw {
                            let iu = (ou * stride + du) as isize - *pad as isize;
                            if iu < 0 || iu >= iw as isize {
                                continue;
                            }
                            let (iv, iu) = (iv as usize, iu as usize);
                            for ci in 0..cin {
                                let xv = x[(iv, iu, ci)];
                                let mut gxi = 0.0;
                                for co in 0..cout {
                                    let g = gout[(ov, ou, co)];
                                    gw[(dv, du, ci, co)] += xv * g;
                                    gxi += w[(dv, du, ci, co)] * g;
                                }
                                gx[(iv, iu, ci)] += gxi;
                            }
                        }
                    }
                }
            }
            accumulate(&mut grads[*input], gx.into_dyn());
            accumulate(&mut grads[*weight], gw.into_dyn());
            accumulate(&mut grads[*bias], gb.into_dyn());
        }
        Op::Elu { input } => {
            let y = &nodes[index].value;
            let mut gx = grad.clone();
            gx.zip_mut_with(y, |g, &yv| {
                if yv <= 0.0 {
                    *g *= yv + 1.0;
                }
            });
            accumulate(&mut grads[*input], gx);
        }
        Op::UpsampleBilinear { input } => {
            let gout = grad.view().into_dimensionality::<Ix3>().unwrap();
            let (ih, iw, c) = {
                let d = nodes[*input].value.shape();
                (d[0], d[1], d[2])
            };
            let (oh, ow, _) = gout.dim();
            let rows = upsample_axis_plan(ih, oh);
            let cols = upsample_axis_plan(iw, ow);
            let mut gx = Array3::zeros((ih, iw, c));
            for (ov, &(v0, v1, tv)) in rows.iter().enumerate() {
                for (ou, &(u0, u1, tu)) in cols.iter().enumerate() {
                    for ch in 0..c {
                        let g = gout[(ov, ou, ch)];
                        gx[(v0, u0, ch)] += (1.0 - tv) * (1.0 - tu) * g;
                        gx[(v0, u1, ch)] += (1.0 - tv) * tu * g;
                        gx[(v1, u0, ch)] += tv * (1.0 - tu) * g;
                        gx[(v1, u1, ch)] += tv * tu * g;
                    }
                }
            }
            accumulate(&mut grads[*input], gx.into_dyn());
        }
        Op::CorrelationVolume { left, right } => {
            let gout = grad.view().into_dimensionality::<Ix3>().unwrap();
            let l = nodes[*left].value.view().into_dimensionality::<Ix3>().unwrap();
            let r = nodes[*right].value.view().into_dimensionality::<Ix3>().unwrap();
            let (h, w, c) = l.dim();
            let nd = gout.dim().2;
            let inv_c = 1.0 / c as f64;
            let mut gl = Array3::zeros((h, w, c));
            let mut gr = Array3::zeros((h, w, c));
            for v in 0..h {
                for u in 0..w {
                    for d in 0..nd.min(u + 1) {
                        let g = gout[(v, u, d)] * inv_c;
                        if g == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            gl[(v, u, ch)] += g * r[(v, u - d, ch)];
                            gr[(v, u - d, ch)] += g * l[(v, u, ch)];
                        }
                    }
                }
            }
            accumulate(&mut grads[*left], gl.into_dyn());
            accumulate(&mut grads[*right], gr.into_dyn());
        }
        Op::SoftArgMin { scores } => {
            let gout = grad.view().into_dimensionality::<Ix2>().unwrap();
            let s = nodes[*scores].value.view().into_dimensionality::<Ix3>().unwrap();
            let out = nodes[index].value.view().into_dimensionality::<Ix2>().unwrap();
            let (h, w, nd) = s.dim();
            let mut gs = Array3::zeros((h, w, nd));
            let mut weights = vec![0.0; nd];
            for v in 0..h {
                for u in 0..w {
                    let g = gout[(v, u)];
                    if g == 0.0 {
                        continue;
                    }
                    softmax_row(&s, v, u, &mut weights);
                    let mean = out[(v, u)];
                    for (d, &wgt) in weights.iter().enumerate() {
                        gs[(v, u, d)] = g * wgt * (d as f64 - mean);
                    }
                }
            }
            accumulate(&mut grads[*scores], gs.into_dyn());
        }
        Op::WarpHorizontal {
            feature,
            disp,
            mask,
            sign,
        } => {
            let gout = grad.clone().into_dimensionality::<Ix3>().unwrap();
            let dim = {
                let d = nodes[*feature].value.shape();
                (d[0], d[1], d[2])
            };
            let gx = ops::warp_horizontal_vjp(&gout, disp, mask, *sign, dim);
            accumulate(&mut grads[*feature], gx.into_dyn());
        }
        Op::CosineDissim { a, b, mask } => {
            let upstream = grad[IxDyn(&[])];
            let av = nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
            let bv = nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
            let (ga, gb) =
                ops::cosine_dissimilarity_vjp(&av.to_owned(), &bv.to_owned(), mask, upstream)
                    .expect("backward of a cosine node that evaluated forward");
            accumulate(&mut grads[*a], ga.into_dyn());
            accumulate(&mut grads[*b], gb.into_dyn());
        }
        Op::SmoothL1 {
            pred,
            target,
            valid,
        } => {
            let upstream = grad[IxDyn(&[])];
            let p = nodes[*pred].value.view().into_dimensionality::<Ix2>().unwrap();
            let count = valid.iter().filter(|&&b| b).count() as f64;
            let mut gp = Array2::zeros(p.dim());
            for ((v, u), &ok) in valid.indexed_iter() {
                if ok {
                    let e = p[(v, u)] - target[(v, u)];
                    gp[(v, u)] = upstream * e.clamp(-1.0, 1.0) / count;
                }
            }
            accumulate(&mut grads[*pred], gp.into_dyn());
        }
        Op::Add { a, b } => {
            accumulate(&mut grads[*a], grad.clone());
            accumulate(&mut grads[*b], grad.clone());
        }
        Op::MulElem { a, b } => {
            accumulate(&mut grads[*a], grad * &nodes[*b].value);
            accumulate(&mut grads[*b], grad * &nodes[*a].value);
        }
        Op::SumAll { input } => {
            let upstream = grad[IxDyn(&[])];
            accumulate(
                &mut grads[*input],
                ArrayD::from_elem(nodes[*input].value.raw_dim(), upstream),
            );
        }
        Op::Scale { input, factor } => {
            accumulate(&mut grads[*input], grad.mapv(|g| g * factor));
        }
        Op::MulScalarVar { input, scalar } => {
            let s = nodes[*scalar].value[IxDyn(&[])];
            accumulate(&mut grads[*input], grad.mapv(|g| g * s));
            let dot = (grad * &nodes[*input].value).sum();
            accumulate(
                &mut grads[*scalar],
                ArrayD::from_elem(IxDyn(&[]), dot),
            );
        }
        Op::SelectChannels { input, indices } => {
            let gout = grad.view().into_dimensionality::<Ix3>().unwrap();
            let (h, w, c) = {
                let d = nodes[*input].value.shape();
                (d[0], d[1], d[2])
            };
            let mut gx = Array3::zeros((h, w, c));
            for v in 0..h {
                for u in 0..w {
                    for (slot, &ch) in indices.iter().enumerate() {
                        gx[(v, u, ch)] += gout[(v, u, slot)];
                    }
                }
            }
            accumulate(&mut grads[*input], gx.into_dyn());
        }
        Op::GlobalMeanPool { input } => {
            let gout = grad.view().into_dimensionality::<Ix1>().unwrap();
            let (h, w, c) = {
                let d = nodes[*input].value.shape();
                (d[0], d[1], d[2])
            };
            let scale = 1.0 / (h * w) as f64;
            let mut gx = Array3::zeros((h, w, c));
            for v in 0..h {
                for u in 0..w {
                    for ch in 0..c {
                        gx[(v, u, ch)] = gout[ch] * scale;
                    }
                }
            }
            accumulate(&mut grads[*input], gx.into_dyn());
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let gout = grad.view().into_dimensionality::<Ix1>().unwrap();
            let x = nodes[*input].value.view().into_dimensionality::<Ix1>().unwrap();
            let w = nodes[*weight].value.view().into_dimensionality::<Ix2>().unwrap();
            let (cin, cout) = w.dim();
            let mut gx = Array1::zeros(cin);
            let mut gw = Array2::zeros((cin, cout));
            for i in 0..cin {
                for j in 0..cout {
                    gx[i] += w[(i, j)] * gout[j];
                    gw[(i, j)] = x[i] * gout[j];
                }
            }
            accumulate(&mut grads[*input], gx.into_dyn());
            accumulate(&mut grads[*weight], gw.into_dyn());
            accumulate(&mut grads[*bias], gout.to_owned().into_dyn());
        }
        Op::CrossEntropy { logits, target } => {
            let upstream = grad[IxDyn(&[])];
            let l = nodes[*logits].value.view().into_dimensionality::<Ix1>().unwrap();
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = l.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut gl = Array1::zeros(l.len());
            for (k, &e) in exps.iter().enumerate() {
                let softmax = e / total;
                gl[k] = upstream * (softmax - if k == *target { 1.0 } else { 0.0 });
            }
            accumulate(&mut grads[*logits], gl.into_dyn());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use ndarray::{Array1, Array2, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand3(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0))
    }

    /// Checks analytic gradients of `build` (a scalar function of a flat
    /// parameter vector) against central differences at sampled coordinates.
    fn check_scalar_fn(
        mut build: impl FnMut(&[f64]) -> (f64, Vec<f64>),
        point: &[f64],
        samples: usize,
        step: f64,
        tol: f64,
        seed: u64,
    ) {
        let (_, analytic) = build(point);
        let mut r = rng(seed);
        let mut x = point.to_vec();
        for _ in 0..samples {
            let i = r.random_range(0..x.len());
            let orig = x[i];
            x[i] = orig + step;
            let plus = build(&x).0;
            x[i] = orig - step;
            let minus = build(&x).0;
            x[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[i], numeric);
            assert!(
                rel <= tol,
                "coordinate {i}: analytic {} vs numeric {numeric}, rel {rel}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng(1);
        let input0 = rand3(5, 6, 2, &mut r);
        let weight0 = Array4::from_shape_fn((3, 3, 2, 3), |_| r.random_range(-0.5..0.5));
        let bias0 = Array1::from_shape_fn(3, |_| r.random_range(-0.5..0.5));
        let proj = rand3(3, 3, 3, &mut r); // stride 2, pad 1 output is 3x3x3

        let n_in = input0.len();
        let n_w = weight0.len();
        let mut flat: Vec<f64> = input0.iter().cloned().collect();
        flat.extend(weight0.iter());
        flat.extend(bias0.iter());

        check_scalar_fn(
            |p| {
                let input = Array3::from_shape_vec((5, 6, 2), p[..n_in].to_vec()).unwrap();
                let weight =
                    Array4::from_shape_vec((3, 3, 2, 3), p[n_in..n_in + n_w].to_vec()).unwrap();
                let bias = Array1::from_vec(p[n_in + n_w..].to_vec());
                let tape = Tape::new();
                let x = tape.leaf3(input);
                let w = tape.leaf4(weight);
                let b = tape.leaf1(bias);
                let y = tape.conv2d(x, w, b, 2, 1);
                let y = tape.elu(y);
                // Project to a scalar with fixed weights.
                let pvar = tape.leaf3(proj.clone());
                let prod = tape.mul_elem(y, pvar);
                let loss = tape.sum_all(prod);
                let grads = tape.backward(loss).unwrap();
                let mut flat_grad = Vec::with_capacity(p.len());
                flat_grad.extend(grads.get(x).unwrap().iter());
                flat_grad.extend(grads.get(w).unwrap().iter());
                flat_grad.extend(grads.get(b).unwrap().iter());
                (tape.scalar_value(loss), flat_grad)
            },
            &flat,
            60,
            1e-3,
            1e-4,
            99,
        );
    }

    #[test]
    fn correlation_soft_argmin_gradients_match_finite_differences() {
        let mut r = rng(2);
        let left0 = rand3(3, 8, 4, &mut r);
        let right0 = rand3(3, 8, 4, &mut r);
        let proj = Array2::from_shape_fn((3, 8), |_| r.random_range(-1.0..1.0));

        let n_l = left0.len();
        let mut flat: Vec<f64> = left0.iter().cloned().collect();
        flat.extend(right0.iter());

        check_scalar_fn(
            |p| {
                let left = Array3::from_shape_vec((3, 8, 4), p[..n_l].to_vec()).unwrap();
                let right = Array3::from_shape_vec((3, 8, 4), p[n_l..].to_vec()).unwrap();
                let tape = Tape::new();
                let l = tape.leaf3(left);
                let rr = tape.leaf3(right);
                let vol = tape.correlation_volume(l, rr, 4);
                let disp = tape.soft_argmin(vol);
                let pvar = tape.leaf2(proj.clone());
                let prod = tape.mul_elem(disp, pvar);
                let loss = tape.sum_all(prod);
                let grads = tape.backward(loss).unwrap();
                let mut flat_grad = Vec::with_capacity(p.len());
                flat_grad.extend(grads.get(l).unwrap().iter());
                flat_grad.extend(grads.get(rr).unwrap().iter());
                (tape.scalar_value(loss), flat_grad)
            },
            &flat,
            60,
            1e-3,
            1e-4,
            98,
        );
    }

    #[test]
    fn upsample_warp_cosine_gradients_match_finite_differences() {
        let mut r = rng(3);
        let a0 = rand3(3, 4, 3, &mut r);
        let b0 = rand3(3, 4, 3, &mut r);
        let disp = Array2::from_shape_fn((6, 8), |_| r.random_range(0.0..2.0));
        let dvalid = Array2::from_elem((6, 8), true);

        let n_a = a0.len();
        let mut flat: Vec<f64> = a0.iter().cloned().collect();
        flat.extend(b0.iter());

        check_scalar_fn(
            |p| {
                let a = Array3::from_shape_vec((3, 4, 3), p[..n_a].to_vec()).unwrap();
                let b = Array3::from_shape_vec((3, 4, 3), p[n_a..].to_vec()).unwrap();
                let tape = Tape::new();
                let av = tape.leaf3(a);
                let bv = tape.leaf3(b);
                let au = tape.upsample_bilinear(av, 6, 8);
                let bu = tape.upsample_bilinear(bv, 6, 8);
                let (bw, mask) = tape.warp_horizontal(bu, &disp, &dvalid, -1.0).unwrap();
                let loss = tape.cosine_dissimilarity(au, bw, &mask).unwrap();
                let grads = tape.backward(loss).unwrap();
                let mut flat_grad = Vec::with_capacity(p.len());
                flat_grad.extend(grads.get(av).unwrap().iter());
                flat_grad.extend(grads.get(bv).unwrap().iter());
                (tape.scalar_value(loss), flat_grad)
            },
            &flat,
            60,
            // The cosine's normalization curvature is amplified at low-norm
            // interpolated locations, so a 1e-3 step carries visible
            // truncation error; shrink the step instead of the tolerance.
            1e-4,
            1e-4,
            97,
        );
    }

    #[test]
    fn smooth_l1_select_pool_gradients_match_finite_differences() {
        let mut r = rng(4);
        let x0 = rand3(4, 5, 6, &mut r);
        // Drive smooth_l1 from a soft-argmin prediction so the whole chain
        // select -> correlation -> soft_argmin -> smooth_l1 is exercised.
        let target = Array2::from_shape_fn((4, 5), |_| r.random_range(0.0..2.0));
        let mut valid = Array2::from_elem((4, 5), true);
        valid[(0, 0)] = false;
        let flat: Vec<f64> = x0.iter().cloned().collect();

        check_scalar_fn(
            |p| {
                let x = Array3::from_shape_vec((4, 5, 6), p.to_vec()).unwrap();
                let tape = Tape::new();
                let xv = tape.leaf3(x);
                let sel = tape.select_channels(xv, &[1, 3, 5]);
                let rest = tape.select_channels(xv, &[0, 2, 4]);
                let vol = tape.correlation_volume(sel, rest, 2);
                let pred = tape.soft_argmin(vol);
                let l1 = tape.smooth_l1(pred, &target, &valid).unwrap();
                let gain = tape.leaf_scalar(1.5);
                let scaled = tape.mul_scalar_var(l1, gain);
                let pooled = tape.global_mean_pool(xv);
                let lin_w = tape.leaf2(Array2::from_elem((6, 2), 0.25));
                let lin_b = tape.leaf1(Array1::zeros(2));
                let lin = tape.linear(pooled, lin_w, lin_b);
                let ce = tape.cross_entropy(lin, 0);
                let half = tape.scale(ce, 0.5);
                let loss = tape.add(scaled, half);
                let grads = tape.backward(loss).unwrap();
                (
                    tape.scalar_value(loss),
                    grads.get(xv).unwrap().iter().cloned().collect(),
                )
            },
            &flat,
            50,
            1e-3,
            1e-4,
            96,
        );
    }

    #[test]
    fn cross_entropy_linear_gradients_match_finite_differences() {
        let mut r = rng(5);
        let x0 = Array1::from_shape_fn(4, |_| r.random_range(-1.0..1.0));
        let w0 = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let b0 = Array1::from_shape_fn(3, |_| r.random_range(-0.2..0.2));
        let n_x = 4;
        let n_w = 12;
        let mut flat: Vec<f64> = x0.to_vec();
        flat.extend(w0.iter());
        flat.extend(b0.iter());

        check_scalar_fn(
            |p| {
                let tape = Tape::new();
                let x = tape.leaf1(Array1::from_vec(p[..n_x].to_vec()));
                let w = tape.leaf2(Array2::from_shape_vec((4, 3), p[n_x..n_x + n_w].to_vec()).unwrap());
                let b = tape.leaf1(Array1::from_vec(p[n_x + n_w..].to_vec()));
                let logits = tape.linear(x, w, b);
                let loss = tape.cross_entropy(logits, 1);
                let grads = tape.backward(loss).unwrap();
                let mut g = Vec::with_capacity(p.len());
                g.extend(grads.get(x).unwrap().iter());
                g.extend(grads.get(w).unwrap().iter());
                g.extend(grads.get(b).unwrap().iter());
                (tape.scalar_value(loss), g)
            },
            &flat,
            19,
            1e-3,
            1e-4,
            95,
        );
    }

    #[test]
    fn soft_argmin_output_stays_in_candidate_range() {
        let mut r = rng(6);
        let scores = rand3(4, 9, 6, &mut r).mapv(|x| x * 50.0);
        let tape = Tape::new();
        let s = tape.leaf3(scores);
        let d = tape.soft_argmin(s);
        for &x in tape.value2(d).iter() {
            assert!((0.0..=5.0).contains(&x));
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf2(Array2::zeros((2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn warp_on_tape_matches_pure_kernel() {
        let mut r = rng(7);
        let f = rand3(4, 6, 3, &mut r);
        let disp = Array2::from_shape_fn((4, 6), |_| r.random_range(0.0..2.0));
        let dvalid = Array2::from_elem((4, 6), true);
        let tape = Tape::new();
        let fv = tape.leaf3(f.clone());
        let (warped, mask) = tape.warp_horizontal(fv, &disp, &dvalid, -1.0).unwrap();
        let (pure, pure_mask) = crate::ops::warp_horizontal_raw(&f, &disp, &dvalid, -1.0);
        assert_eq!(tape.value3(warped), pure);
        assert_eq!(mask, pure_mask);
    }
}
