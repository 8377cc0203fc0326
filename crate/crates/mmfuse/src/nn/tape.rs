//! The autodiff tape: eager forward ops with recorded backward closures.
//!
//! Shapes follow the usual conventions: 4-d activations are `[N, C, H, W]`,
//! 2-d activations are `[rows, features]`. Reductions always run in array
//! memory order, so results are bit-reproducible for identical inputs.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::Scalar;

/// Handle to a tape node.
pub type Var = usize;

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    requires_grad: bool,
    op: Op<F>,
}

enum Op<F: Scalar> {
    Leaf,
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// im2col matrix of the input, saved for the weight gradient.
        cols: Array2<F>,
        in_shape: [usize; 4],
    },
    MaxPool {
        x: Var,
        /// Flat `iy * w + ix` index of the winning input pixel per output.
        argmax: Vec<u32>,
        in_shape: [usize; 4],
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: ArrayD<F>,
        inv_std: Vec<F>,
        training: bool,
    },
    MeanRows {
        x: Var,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddMany {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        c: F,
    },
}

/// Gradients of one scalar output with respect to tape leaves.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`; `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }
}

pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v].value[[0]]
    }

    fn push(&mut self, value: ArrayD<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let zero = F::zero();
        let value = self.nodes[x].value.mapv(|v| if v > zero { v } else { zero });
        let rg = self.needs(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// `x [n, in] . w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("linear x 2-d");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix2>().expect("linear w 2-d");
        let bv = &self.nodes[b].value;
        let mut y = xv.dot(&wv);
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bv[[j]];
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), rg, Op::Linear { x, w, b })
    }

    /// `x [n, c, h, w]` with `w [oc, c, k, k]`, `b [oc]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("conv x 4-d");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().expect("conv w 4-d");
        let (n, c, h, wd) = xv.dim();
        let (oc, wc, k, k2) = wv.dim();
        assert_eq!(c, wc, "conv channel mismatch");
        assert_eq!(k, k2, "conv kernel must be square");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);

        let cols = im2col(&xv.to_owned(), k, stride, pad, oh, ow);
        let w2 = wv.to_shape((oc, c * k * k)).expect("weight reshape").to_owned();
        let y2 = cols.dot(&w2.t()); // [n*oh*ow, oc]

        let bv = &self.nodes[b].value;
        let mut y = Array4::<F>::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                let bias = bv[[o]];
                for oy in 0..oh {
                    for ox in 0..ow {
                        y[(ni, o, oy, ox)] = y2[((ni * oh + oy) * ow + ox, o)] + bias;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            y.into_dyn(),
            rg,
            Op::Conv2d { x, w, b, stride, pad, cols, in_shape: [n, c, h, wd] },
        )
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("pool x 4-d");
        let (n, c, h, w) = xv.dim();
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(w, k, stride, pad);
        let mut y = Array4::<F>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let mut at = 0;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best: Option<(F, usize)> = None;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let v = xv[(ni, ci, iy, ix)];
                                if best.map_or(true, |(bv, _)| v > bv) {
                                    best = Some((v, iy * w + ix));
                                }
                            }
                        }
                        let (bv, bi) = best.expect("pool window in bounds");
                        y[(ni, ci, oy, ox)] = bv;
                        argmax[at] = bi as u32;
                        at += 1;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(y.into_dyn(), rg, Op::MaxPool { x, argmax, in_shape: [n, c, h, w] })
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("gap x 4-d");
        let (n, c, h, w) = xv.dim();
        let denom = F::of_f64((h * w) as f64);
        let mut y = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut sum = F::zero();
                for iy in 0..h {
                    for ix in 0..w {
                        sum += xv[(ni, ci, iy, ix)];
                    }
                }
                y[(ni, ci)] = sum / denom;
            }
        }
        let rg = self.needs(x);
        self.push(y.into_dyn(), rg, Op::GlobalAvgPool { x })
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics normalize the activations and
    /// `(batch_mean, unbiased batch_var)` is returned so the caller can fold
    /// it into the running statistics; in eval mode `running` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&ArrayD<F>, &ArrayD<F>),
        training: bool,
        eps: f64,
    ) -> (Var, Option<(Array1<F>, Array1<F>)>) {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("bn x 4-d");
        let (n, c, h, w) = xv.dim();
        let m = n * h * w;
        let eps = F::of_f64(eps);

        let (mean, var): (Array1<F>, Array1<F>) = if training {
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            let denom = F::of_f64(m as f64);
            for ci in 0..c {
                let mut sum = F::zero();
                for ni in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            sum += xv[(ni, ci, iy, ix)];
                        }
                    }
                }
                let mu = sum / denom;
                let mut sq = F::zero();
                for ni in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let d = xv[(ni, ci, iy, ix)] - mu;
                            sq += d * d;
                        }
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / denom;
            }
            (mean, var)
        } else {
            let rm = running.0.view().into_dimensionality::<ndarray::Ix1>().expect("bn rm");
            let rv = running.1.view().into_dimensionality::<ndarray::Ix1>().expect("bn rv");
            (rm.to_owned(), rv.to_owned())
        };

        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let mut xhat = Array4::<F>::zeros((n, c, h, w));
        let mut y = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, g, bb) = (mean[ci], inv_std[ci], gv[[ci]], bv[[ci]]);
                for iy in 0..h {
                    for ix in 0..w {
                        let xh = (xv[(ni, ci, iy, ix)] - mu) * is;
                        xhat[(ni, ci, iy, ix)] = xh;
                        y[(ni, ci, iy, ix)] = g * xh + bb;
                    }
                }
            }
        }

        let stats = if training {
            // Unbiased variance goes into the running estimate.
            let scale = if m > 1 { F::of_f64(m as f64 / (m as f64 - 1.0)) } else { F::one() };
            Some((mean.clone(), var.mapv(|v| v * scale)))
        } else {
            None
        };
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            y.into_dyn(),
            rg,
            Op::BatchNorm { x, gamma, beta, xhat: xhat.into_dyn(), inv_std, training },
        );
        (v, stats)
    }

    /// `[n, d] -> [1, d]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("mean_rows 2-d");
        let (n, d) = xv.dim();
        let denom = F::of_f64(n as f64);
        let mut y = Array2::<F>::zeros((1, d));
        for j in 0..d {
            let mut sum = F::zero();
            for i in 0..n {
                sum += xv[(i, j)];
            }
            y[(0, j)] = sum / denom;
        }
        let rg = self.needs(x);
        self.push(y.into_dyn(), rg, Op::MeanRows { x })
    }

    /// Stack two row matrices with equal feature width.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().expect("concat a 2-d");
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().expect("concat b 2-d");
        assert_eq!(av.dim().1, bv.dim().1, "concat_rows width mismatch");
        let y = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat rows");
        let rg = self.needs(a) || self.needs(b);
        self.push(y.into_dyn(), rg, Op::ConcatRows { a, b })
    }

    /// Concatenate two row matrices along features.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().expect("concat a 2-d");
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().expect("concat b 2-d");
        assert_eq!(av.dim().0, bv.dim().0, "concat_cols height mismatch");
        let y = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat cols");
        let rg = self.needs(a) || self.needs(b);
        self.push(y.into_dyn(), rg, Op::ConcatCols { a, b })
    }

    /// Cross-entropy of softmax(logits) against `label`, natural log.
    /// `logits` is `[1, k]`; the result is the `[1]` scalar loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv =
            self.nodes[logits].value.view().into_dimensionality::<Ix2>().expect("logits 2-d");
        assert_eq!(lv.dim().0, 1, "one logit row per bag");
        let k = lv.dim().1;
        assert!(label < k, "label {label} out of range for {k} classes");
        let mut max = lv[(0, 0)];
        for j in 1..k {
            if lv[(0, j)] > max {
                max = lv[(0, j)];
            }
        }
        let exps: Vec<F> = (0..k).map(|j| (lv[(0, j)] - max).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        let probs: Vec<F> = exps.iter().map(|&e| e / sum).collect();
        let loss = -(probs[label].ln());
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        let rg = self.needs(logits);
        self.push(value, rg, Op::SoftmaxCe { logits, label, probs })
    }

    pub fn softmax_probs(&self, ce: Var) -> Vec<F> {
        match &self.nodes[ce].op {
            Op::SoftmaxCe { probs, .. } => probs.clone(),
            _ => panic!("not a softmax node"),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, rg, Op::Add { a, b })
    }

    pub fn add_many(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut value = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            value = value + &self.nodes[x].value;
        }
        let rg = xs.iter().any(|&x| self.needs(x));
        self.push(value, rg, Op::AddMany { xs: xs.to_vec() })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of_f64(c);
        let value = self.nodes[x].value.mapv(|v| v * c);
        let rg = self.needs(x);
        self.push(value, rg, Op::Scale { x, c })
    }

    /// Reverse sweep from the scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[loss].value.len(), 1, "backward needs a scalar loss");
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), F::one()));

        for idx in (0..=loss).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(grad);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let xv = &self.nodes[*x].value;
                        let zero = F::zero();
                        let mut dx = grad.clone();
                        for (d, &v) in dx.iter_mut().zip(xv.iter()) {
                            if v <= zero {
                                *d = zero;
                            }
                        }
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(*w) {
                        let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                        let dw = xv.t().dot(&dy);
                        accumulate(&mut grads[*w], dw.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = dy.sum_axis(Axis(0));
                        accumulate(&mut grads[*b], db.into_dyn());
                    }
                    if self.needs(*x) {
                        let wv = self.nodes[*w].value.view().into_dimensionality::<Ix2>().unwrap();
                        let dx = dy.dot(&wv.t());
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                }
                Op::Conv2d { x, w, b, stride, pad, cols, in_shape } => {
                    let dy = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, oc, oh, ow) = dy.dim();
                    let mut dy2 = Array2::<F>::zeros((n * oh * ow, oc));
                    for ni in 0..n {
                        for o in 0..oc {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    dy2[((ni * oh + oy) * ow + ox, o)] = dy[(ni, o, oy, ox)];
                                }
                            }
                        }
                    }
                    if self.needs(*w) {
                        let dw2 = dy2.t().dot(cols); // [oc, c*k*k]
                        let wshape = self.nodes[*w].value.raw_dim();
                        let dw = dw2
                            .into_shape_with_order(wshape.clone())
                            .expect("conv dW reshape");
                        accumulate(&mut grads[*w], dw);
                    }
                    if self.needs(*b) {
                        let db = dy2.sum_axis(Axis(0));
                        accumulate(&mut grads[*b], db.into_dyn());
                    }
                    if self.needs(*x) {
                        let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                        let (oc2, c, k, _) = wv.dim();
                        let w2 = wv.to_shape((oc2, c * k * k)).unwrap().to_owned();
                        let dcols = dy2.dot(&w2); // [n*oh*ow, c*k*k]
                        let dx = col2im(&dcols, *in_shape, k, *stride, *pad, oh, ow);
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                }
                Op::MaxPool { x, argmax, in_shape } => {
                    if self.needs(*x) {
                        let dy = grad.view().into_dimensionality::<Ix4>().unwrap();
                        let [n, c, h, w] = *in_shape;
                        let (dn, dc, oh, ow) = dy.dim();
                        debug_assert_eq!((dn, dc), (n, c));
                        let mut dx = Array4::<F>::zeros((n, c, h, w));
                        let mut at = 0;
                        for ni in 0..n {
                            for ci in 0..c {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let flat = argmax[at] as usize;
                                        dx[(ni, ci, flat / w, flat % w)] += dy[(ni, ci, oy, ox)];
                                        at += 1;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.needs(*x) {
                        let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                        let shape = self.nodes[*x].value.raw_dim();
                        let (h, w) = (shape[2], shape[3]);
                        let denom = F::of_f64((h * w) as f64);
                        let mut dx = Array4::<F>::zeros((shape[0], shape[1], h, w));
                        for ni in 0..shape[0] {
                            for ci in 0..shape[1] {
                                let g = dy[(ni, ci)] / denom;
                                for iy in 0..h {
                                    for ix in 0..w {
                                        dx[(ni, ci, iy, ix)] = g;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                    let dy = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = dy.dim();
                    let m = F::of_f64((n * h * w) as f64);
                    let gv = &self.nodes[*gamma].value;
                    let mut dgamma = Array1::<F>::zeros(c);
                    let mut dbeta = Array1::<F>::zeros(c);
                    for ni in 0..n {
                        for ci in 0..c {
                            for iy in 0..h {
                                for ix in 0..w {
                                    let g = dy[(ni, ci, iy, ix)];
                                    dgamma[ci] += g * xh[(ni, ci, iy, ix)];
                                    dbeta[ci] += g;
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Array4::<F>::zeros((n, c, h, w));
                        for ci in 0..c {
                            let gis = gv[[ci]] * inv_std[ci];
                            for ni in 0..n {
                                for iy in 0..h {
                                    for ix in 0..w {
                                        let g = dy[(ni, ci, iy, ix)];
                                        dx[(ni, ci, iy, ix)] = if *training {
                                            gis * (g
                                                - (xh[(ni, ci, iy, ix)] * dgamma[ci] + dbeta[ci])
                                                    / m)
                                        } else {
                                            gis * g
                                        };
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[*gamma], dgamma.into_dyn());
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[*beta], dbeta.into_dyn());
                    }
                }
                Op::MeanRows { x } => {
                    if self.needs(*x) {
                        let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                        let shape = self.nodes[*x].value.raw_dim();
                        let (n, d) = (shape[0], shape[1]);
                        let denom = F::of_f64(n as f64);
                        let mut dx = Array2::<F>::zeros((n, d));
                        for i in 0..n {
                            for j in 0..d {
                                dx[(i, j)] = dy[(0, j)] / denom;
                            }
                        }
                        accumulate(&mut grads[*x], dx.into_dyn());
                    }
                }
                Op::ConcatRows { a, b } => {
                    let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let na = self.nodes[*a].value.raw_dim()[0];
                    if self.needs(*a) {
                        let da = dy.slice(ndarray::s![..na, ..]).to_owned();
                        accumulate(&mut grads[*a], da.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = dy.slice(ndarray::s![na.., ..]).to_owned();
                        accumulate(&mut grads[*b], db.into_dyn());
                    }
                }
                Op::ConcatCols { a, b } => {
                    let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let da_w = self.nodes[*a].value.raw_dim()[1];
                    if self.needs(*a) {
                        let da = dy.slice(ndarray::s![.., ..da_w]).to_owned();
                        accumulate(&mut grads[*a], da.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = dy.slice(ndarray::s![.., da_w..]).to_owned();
                        accumulate(&mut grads[*b], db.into_dyn());
                    }
                }
                Op::SoftmaxCe { logits, label, probs } => {
                    if self.needs(*logits) {
                        let g = grad[[0]];
                        let k = probs.len();
                        let mut dl = Array2::<F>::zeros((1, k));
                        for j in 0..k {
                            let delta = if j == *label { F::one() } else { F::zero() };
                            dl[(0, j)] = g * (probs[j] - delta);
                        }
                        accumulate(&mut grads[*logits], dl.into_dyn());
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], grad.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], grad.clone());
                    }
                }
                Op::AddMany { xs } => {
                    for &x in xs {
                        if self.needs(x) {
                            accumulate(&mut grads[x], grad.clone());
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(*x) {
                        let dx = grad.mapv(|v| v * *c);
                        accumulate(&mut grads[*x], dx);
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<ArrayD<F>>, g: ArrayD<F>) {
    match slot {
        Some(acc) => *acc = &*acc + &g,
        None => *slot = Some(g),
    }
}

fn im2col<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((n * oh * ow, c * k * k));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    let ckk = c * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = plane + iy as usize * w;
                        let col_base = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[col_base + kx] = xs[line + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    in_shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<F> {
    let [n, c, h, w] = in_shape;
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("contiguous dcols");
    let ckk = c * k * k;
    {
        let dxs = dx.as_slice_mut().expect("contiguous dx");
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((ni * oh + oy) * ow + ox) * ckk;
                    for ci in 0..c {
                        let plane = (ni * c + ci) * h * w;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = plane + iy as usize * w;
                            let col_base = row + (ci * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[line + ix as usize] += ds[col_base + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;

    /// Central finite differences of `f` with respect to leaf `v`.
    fn finite_diff<G>(values: &mut ArrayD<f64>, mut f: G) -> ArrayD<f64>
    where
        G: FnMut(&ArrayD<f64>) -> f64,
    {
        let h = 1e-5;
        let mut out = ArrayD::zeros(values.raw_dim());
        for i in 0..values.len() {
            let slice = values.as_slice_mut().unwrap();
            let orig = slice[i];
            slice[i] = orig + h;
            let up = f(values);
            let slice = values.as_slice_mut().unwrap();
            slice[i] = orig - h;
            let down = f(values);
            let slice = values.as_slice_mut().unwrap();
            slice[i] = orig;
            out.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    fn random_array(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn(), false);
        let w = tape.leaf(arr2(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]).into_dyn(), true);
        let b = tape.leaf(arr1(&[0.1, -0.2, 0.3]).into_dyn(), true);
        let y = tape.linear(x, w, b);
        let yv = tape.value(y);
        assert_close(
            &yv.clone(),
            &arr2(&[[2.1, 3.8, -0.7]]).into_dyn(),
            1e-12,
        );
    }

    #[test]
    fn softmax_ce_known_values() {
        // Uniform logits over 3 classes -> ln 3.
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(arr2(&[[0.0, 0.0, 0.0]]).into_dyn(), true);
        let loss = tape.softmax_cross_entropy(logits, 1);
        assert!((tape.scalar(loss) - 3f64.ln()).abs() < 1e-12);
        // Logits (2, 0), label 0 -> ln(1 + e^-2).
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(arr2(&[[2.0, 0.0]]).into_dyn(), true);
        let loss = tape.softmax_cross_entropy(logits, 0);
        assert!((tape.scalar(loss) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng(11);
        let mut xv = random_array(&[2, 3, 5, 5], &mut rng);
        let mut wv = random_array(&[4, 3, 3, 3], &mut rng);
        let mut bv = random_array(&[4], &mut rng);

        let objective = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), false);
            let w = tape.leaf(wv.clone(), false);
            let b = tape.leaf(bv.clone(), false);
            let y = tape.conv2d(x, w, b, 2, 1);
            let r = tape.relu(y);
            let g = tape.global_avg_pool(r);
            let m = tape.mean_rows(g);
            let loss = tape.softmax_cross_entropy(m, 2);
            tape.scalar(loss)
        };

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv.clone(), true);
        let w = tape.leaf(wv.clone(), true);
        let b = tape.leaf(bv.clone(), true);
        let y = tape.conv2d(x, w, b, 2, 1);
        let r = tape.relu(y);
        let g = tape.global_avg_pool(r);
        let m = tape.mean_rows(g);
        let loss = tape.softmax_cross_entropy(m, 2);
        let grads = tape.backward(loss);

        let fd_x = finite_diff(&mut xv, |v| objective(v, &wv, &bv));
        assert_close(grads.get(x).unwrap(), &fd_x, 1e-6);
        let fd_w = finite_diff(&mut wv, |v| objective(&xv, v, &bv));
        assert_close(grads.get(w).unwrap(), &fd_w, 1e-6);
        let fd_b = finite_diff(&mut bv, |v| objective(&xv, &wv, v));
        assert_close(grads.get(b).unwrap(), &fd_b, 1e-6);
    }

    #[test]
    fn batch_norm_and_pool_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng(13);
        let mut xv = random_array(&[3, 2, 4, 4], &mut rng);
        let mut gv = random_array(&[2], &mut rng);
        let mut bv = random_array(&[2], &mut rng);
        let rm = ArrayD::zeros(IxDyn(&[2]));
        let rv = ArrayD::from_elem(IxDyn(&[2]), 1.0);

        let objective = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>, training: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), false);
            let g = tape.leaf(gv.clone(), false);
            let b = tape.leaf(bv.clone(), false);
            let (y, _) = tape.batch_norm(x, g, b, (&rm, &rv), training, 1e-5);
            let p = tape.max_pool(y, 3, 2, 1);
            let gap = tape.global_avg_pool(p);
            let m = tape.mean_rows(gap);
            let loss = tape.softmax_cross_entropy(m, 0);
            tape.scalar(loss)
        };

        for training in [true, false] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), true);
            let g = tape.leaf(gv.clone(), true);
            let b = tape.leaf(bv.clone(), true);
            let (y, stats) = tape.batch_norm(x, g, b, (&rm, &rv), training, 1e-5);
            assert_eq!(stats.is_some(), training);
            let p = tape.max_pool(y, 3, 2, 1);
            let gap = tape.global_avg_pool(p);
            let m = tape.mean_rows(gap);
            let loss = tape.softmax_cross_entropy(m, 0);
            let grads = tape.backward(loss);

            let fd_x = finite_diff(&mut xv, |v| objective(v, &gv, &bv, training));
            assert_close(grads.get(x).unwrap(), &fd_x, 1e-5);
            let fd_g = finite_diff(&mut gv, |v| objective(&xv, v, &bv, training));
            assert_close(grads.get(g).unwrap(), &fd_g, 1e-5);
            let fd_b = finite_diff(&mut bv, |v| objective(&xv, &gv, v, training));
            assert_close(grads.get(b).unwrap(), &fd_b, 1e-5);
        }
    }

    #[test]
    fn concat_and_mean_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng(17);
        let mut av = random_array(&[3, 4], &mut rng);
        let mut bv = random_array(&[2, 4], &mut rng);

        let objective = |av: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(av.clone(), false);
            let b = tape.leaf(bv.clone(), false);
            let cat = tape.concat_rows(a, b);
            let r = tape.relu(cat);
            let m = tape.mean_rows(r);
            let m2 = tape.mean_rows(m);
            let mcols = tape.concat_cols(m, m2);
            let half = tape.scale(mcols, 0.5);
            let loss = tape.softmax_cross_entropy(half, 3);
            tape.scalar(loss)
        };

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(av.clone(), true);
        let b = tape.leaf(bv.clone(), true);
        let cat = tape.concat_rows(a, b);
        let r = tape.relu(cat);
        let m = tape.mean_rows(r);
        let m2 = tape.mean_rows(m);
        let mcols = tape.concat_cols(m, m2);
        let half = tape.scale(mcols, 0.5);
        let loss = tape.softmax_cross_entropy(half, 3);
        let grads = tape.backward(loss);

        let fd_a = finite_diff(&mut av, |v| objective(v, &bv));
        assert_close(grads.get(a).unwrap(), &fd_a, 1e-6);
        let fd_b = finite_diff(&mut bv, |v| objective(&av, v));
        assert_close(grads.get(b).unwrap(), &fd_b, 1e-6);
    }

    #[test]
    fn shared_leaf_accumulates_gradient_from_both_paths() {
        // loss = ce(a + a) has twice the gradient of ce(b) at b = 2a.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(arr2(&[[0.3, -0.7]]).into_dyn(), true);
        let doubled = tape.add(a, a);
        let loss = tape.softmax_cross_entropy(doubled, 0);
        let grads = tape.backward(loss);
        let ga = grads.get(a).unwrap().clone();

        let mut tape2 = Tape::<f64>::new();
        let b = tape2.leaf(arr2(&[[0.6, -1.4]]).into_dyn(), true);
        let loss2 = tape2.softmax_cross_entropy(b, 0);
        let grads2 = tape2.backward(loss2);
        let gb = grads2.get(b).unwrap().clone();
        assert_close(&ga, &gb.mapv(|v| v * 2.0), 1e-12);
    }

    #[test]
    fn gradient_does_not_flow_into_non_required_leaves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn(), false);
        let w = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn(), true);
        let b = tape.leaf(arr1(&[0.0, 0.0]).into_dyn(), false);
        let y = tape.linear(x, w, b);
        let loss = tape.softmax_cross_entropy(y, 0);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(b).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn conv_output_sizes() {
        assert_eq!(conv_out(224, 5, 4, 2), 56);
        assert_eq!(conv_out(224, 7, 2, 3), 112);
        assert_eq!(conv_out(112, 3, 2, 1), 56);
        assert_eq!(conv_out(56, 2, 2, 0), 28);
    }

    #[test]
    fn max_pool_forward_values() {
        let x = Array::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0, 2.0, 3.0, 4.0, //
                5.0, 6.0, 7.0, 8.0, //
                9.0, 10.0, 11.0, 12.0, //
                13.0, 14.0, 15.0, 16.0,
            ],
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.into_dyn(), false);
        let y = tape.max_pool(xv, 2, 2, 0);
        let yv = tape.value(y).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        assert_eq!(yv[(0, 0, 0, 0)], 6.0);
        assert_eq!(yv[(0, 0, 0, 1)], 8.0);
        assert_eq!(yv[(0, 0, 1, 0)], 14.0);
        assert_eq!(yv[(0, 0, 1, 1)], 16.0);
    }
}
