//! Reverse pass: one adjoint rule per primitive.
//!
//! [`Tape::backward`] seeds the root with gradient 1 and walks the node list
//! from the root downwards. Insertion order is a topological order (an op's
//! inputs always carry smaller ids), so by the time a node is visited every
//! consumer has already deposited its contribution and the node's gradient
//! is final. Nodes that do not (transitively) depend on a parameter are
//! skipped entirely.

use super::kernels;
use super::ops::gn_stats;
use super::{Op, Tape, TensorId};
use crate::dtype::Real;

impl<T: Real> Tape<T> {
    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulate d(root)/d(node) into every gradient-requiring node at or
    /// below `root`. The root must be a single-element tensor.
    pub fn backward(&mut self, root: TensorId) {
        assert!(
            self.numel(root) == 1,
            "contract violation: backward root must be scalar, got shape {:?}",
            self.shape(root)
        );
        if !self.needs(root) {
            return;
        }
        self.put_grad(root, vec![T::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let id = TensorId(i);
            let op = self.nodes[i].op.clone();
            let g = self.take_grad(id);
            self.apply_adjoint(&op, id, &g);
            self.put_grad(id, g);
        }
    }

    fn apply_adjoint(&mut self, op: &Op, out: TensorId, g: &[T]) {
        match *op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.accum_grad(a, g);
                self.accum_grad(b, g);
            }
            Op::Sub(a, b) => {
                self.accum_grad(a, g);
                if self.needs(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum_grad(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let c: Vec<T> = g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi * bi).collect();
                    self.accum_grad(a, &c);
                }
                if self.needs(b) {
                    let c: Vec<T> = g.iter().zip(self.data(a)).map(|(&gi, &ai)| gi * ai).collect();
                    self.accum_grad(b, &c);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let c: Vec<T> = g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi / bi).collect();
                    self.accum_grad(a, &c);
                }
                if self.needs(b) {
                    let y = self.data(out);
                    let c: Vec<T> = g
                        .iter()
                        .zip(y.iter().zip(self.data(b)))
                        .map(|(&gi, (&yi, &bi))| -(gi * yi / bi))
                        .collect();
                    self.accum_grad(b, &c);
                }
            }
            Op::Neg(a) => {
                if self.needs(a) {
                    let c: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::AddScalar(a) => self.accum_grad(a, g),
            Op::MulScalar(a, c) => {
                if self.needs(a) {
                    let cv = T::from_f64(c);
                    let contrib: Vec<T> = g.iter().map(|&v| v * cv).collect();
                    self.accum_grad(a, &contrib);
                }
            }
            Op::Recip(a) => {
                if self.needs(a) {
                    let y = self.data(out);
                    let c: Vec<T> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| -(gi * yi * yi))
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    // Saturated region (x > clamp) is constant, so zero there.
                    let y = self.data(out);
                    let xd = self.data(a);
                    let cap = T::from_f64(super::ops::EXP_MAX_ARG);
                    let c: Vec<T> = g
                        .iter()
                        .zip(y.iter().zip(xd))
                        .map(|(&gi, (&yi, &xi))| if xi <= cap { gi * yi } else { T::zero() })
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::Ln(a) => {
                if self.needs(a) {
                    let c: Vec<T> = g.iter().zip(self.data(a)).map(|(&gi, &xi)| gi / xi).collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::Abs(a) => {
                if self.needs(a) {
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gi, &xi)| {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    let y = self.data(out);
                    let c: Vec<T> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::LogSigmoid(a) => {
                if self.needs(a) {
                    // d/dx log σ(x) = 1 − σ(x) = 1 − exp(log σ(x))
                    let y = self.data(out);
                    let c: Vec<T> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| gi * (T::one() - yi.exp()))
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if self.needs(a) {
                    let al = T::from_f64(alpha);
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * al })
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::SoftmaxAxis(a, axis) => {
                if self.needs(a) {
                    let shape = self.shape(out);
                    let alen = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let y = self.data(out);
                    let mut c = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * alen + j) * inner + i;
                            let mut dotgy = T::zero();
                            for j in 0..alen {
                                dotgy += g[at(j)] * y[at(j)];
                            }
                            for j in 0..alen {
                                c[at(j)] = y[at(j)] * (g[at(j)] - dotgy);
                            }
                        }
                    }
                    self.accum_grad(a, &c);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(a) {
                    let (l, h) = (T::from_f64(lo), T::from_f64(hi));
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gi, &xi)| if xi >= l && xi <= h { gi } else { T::zero() })
                        .collect();
                    self.accum_grad(a, &c);
                }
            }
            Op::MaxPair(a, b) => {
                // Ties route to the first argument.
                if self.needs(a) {
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a).iter().zip(self.data(b)))
                        .map(|(&gi, (&ai, &bi))| if ai >= bi { gi } else { T::zero() })
                        .collect();
                    self.accum_grad(a, &c);
                }
                if self.needs(b) {
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a).iter().zip(self.data(b)))
                        .map(|(&gi, (&ai, &bi))| if ai >= bi { T::zero() } else { gi })
                        .collect();
                    self.accum_grad(b, &c);
                }
            }
            Op::MaxConst(a, cst) => {
                if self.needs(a) {
                    let cv = T::from_f64(cst);
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gi, &xi)| if xi >= cv { gi } else { T::zero() })
                        .collect();
                    self.accum_grad(a, &c);
                }
            }

            Op::Linear { x, w, b } => {
                let in_f = self.shape(w)[1];
                let out_f = self.shape(w)[0];
                let rows = self.numel(x) / in_f;
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    kernels::gemm(g, self.data(w), &mut gx, rows, out_f, in_f);
                    self.put_grad(x, gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_grad(w);
                    kernels::gemm_atb(g, self.data(x), &mut gw, rows, out_f, in_f);
                    self.put_grad(w, gw);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); out_f];
                    for r in 0..rows {
                        for o in 0..out_f {
                            gb[o] += g[r * out_f + o];
                        }
                    }
                    self.accum_grad(b, &gb);
                }
            }
            Op::Conv3d { x, w, stride, pad } => {
                let dims = self.conv_dims(x, w, stride, pad);
                let need_x = self.needs(x);
                let need_w = self.needs(w);
                if need_x || need_w {
                    let mut gx = if need_x { Some(self.take_grad(x)) } else { None };
                    let mut gw = if need_w { Some(self.take_grad(w)) } else { None };
                    kernels::conv3d_backward(
                        self.data(x),
                        self.data(w),
                        g,
                        &dims,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        self.put_grad(x, gx);
                    }
                    if let Some(gw) = gw {
                        self.put_grad(w, gw);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xs = self.shape(x).to_vec();
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let cg = c / groups;
                let n = (cg * s) as f64;
                let (mean, invstd) = gn_stats(self.data(x), b, c, s, groups, eps);
                let xd = self.data(x);
                let gd = self.data(gamma);
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggamma = vec![0f64; c];
                let mut gbeta = vec![0f64; c];
                for bi in 0..b {
                    for gi in 0..groups {
                        let st = bi * groups + gi;
                        let (m, r) = (mean[st].to_f64(), invstd[st].to_f64());
                        let mut sum_d = 0f64;
                        let mut sum_dx = 0f64;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let gam = gd[ch].to_f64();
                            let off = (bi * c + ch) * s;
                            for k in 0..s {
                                let xh = (xd[off + k].to_f64() - m) * r;
                                let gk = g[off + k].to_f64();
                                let d = gk * gam;
                                sum_d += d;
                                sum_dx += d * xh;
                                ggamma[ch] += gk * xh;
                                gbeta[ch] += gk;
                            }
                        }
                        let mean_d = sum_d / n;
                        let mean_dx = sum_dx / n;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let gam = gd[ch].to_f64();
                            let off = (bi * c + ch) * s;
                            for k in 0..s {
                                let xh = (xd[off + k].to_f64() - m) * r;
                                let d = g[off + k].to_f64() * gam;
                                gx[off + k] = T::from_f64(r * (d - mean_d - xh * mean_dx));
                            }
                        }
                    }
                }
                self.accum_grad(x, &gx);
                let gg: Vec<T> = ggamma.into_iter().map(T::from_f64).collect();
                self.accum_grad(gamma, &gg);
                let gb: Vec<T> = gbeta.into_iter().map(T::from_f64).collect();
                self.accum_grad(beta, &gb);
            }
            Op::AddChannelBias(x, bias) => {
                self.accum_grad(x, g);
                if self.needs(bias) {
                    let xs = self.shape(x);
                    let (b, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for k in 0..s {
                                gb[ci] += g[off + k];
                            }
                        }
                    }
                    self.accum_grad(bias, &gb);
                }
            }
            Op::Down2(a) => {
                if self.needs(a) {
                    let xs = self.shape(a).to_vec();
                    let mut gx = self.take_grad(a);
                    kernels::down2_backward(g, xs[0], xs[1], xs[2], xs[3], xs[4], &mut gx);
                    self.put_grad(a, gx);
                }
            }
            Op::Up2(a) => {
                if self.needs(a) {
                    let xs = self.shape(a).to_vec();
                    let mut gx = self.take_grad(a);
                    kernels::up2_backward(g, xs[0], xs[1], xs[2], xs[3], xs[4], &mut gx);
                    self.put_grad(a, gx);
                }
            }
            Op::ConcatC(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let s: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                if self.needs(a) {
                    let mut c = vec![T::zero(); sa.iter().product()];
                    for bi in 0..sa[0] {
                        let src = bi * (ca + cb) * s;
                        c[bi * ca * s..(bi + 1) * ca * s]
                            .copy_from_slice(&g[src..src + ca * s]);
                    }
                    self.accum_grad(a, &c);
                }
                if self.needs(b) {
                    let mut c = vec![T::zero(); sb.iter().product()];
                    for bi in 0..sb[0] {
                        let src = bi * (ca + cb) * s + ca * s;
                        c[bi * cb * s..(bi + 1) * cb * s]
                            .copy_from_slice(&g[src..src + cb * s]);
                    }
                    self.accum_grad(b, &c);
                }
            }
            Op::ChannelMean(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let inv = T::from_f64(1.0 / c as f64);
                    let mut gx = vec![T::zero(); b * c * s];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for k in 0..s {
                                gx[off + k] = g[bi * s + k] * inv;
                            }
                        }
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::ChannelMax(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let xd = self.data(a);
                    let mut gx = vec![T::zero(); b * c * s];
                    for bi in 0..b {
                        for k in 0..s {
                            let mut best = 0usize;
                            let mut bv = xd[bi * c * s + k];
                            for ci in 1..c {
                                let v = xd[(bi * c + ci) * s + k];
                                if v > bv {
                                    bv = v;
                                    best = ci;
                                }
                            }
                            gx[(bi * c + best) * s + k] = g[bi * s + k];
                        }
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::MulGateSpatial(x, gate) => {
                let xs = self.shape(x).to_vec();
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                if self.needs(x) {
                    let gd = self.data(gate);
                    let mut gx = vec![T::zero(); b * c * s];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for k in 0..s {
                                gx[off + k] = g[off + k] * gd[bi * s + k];
                            }
                        }
                    }
                    self.accum_grad(x, &gx);
                }
                if self.needs(gate) {
                    let xd = self.data(x);
                    let mut gg = vec![T::zero(); b * s];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for k in 0..s {
                                gg[bi * s + k] += g[off + k] * xd[off + k];
                            }
                        }
                    }
                    self.accum_grad(gate, &gg);
                }
            }
            Op::MulGateChannel(x, scale) => {
                let xs = self.shape(x).to_vec();
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                if self.needs(x) {
                    let sd = self.data(scale);
                    let mut gx = vec![T::zero(); b * c * s];
                    for bc in 0..b * c {
                        let sv = sd[bc];
                        for k in 0..s {
                            gx[bc * s + k] = g[bc * s + k] * sv;
                        }
                    }
                    self.accum_grad(x, &gx);
                }
                if self.needs(scale) {
                    let xd = self.data(x);
                    let mut gs = vec![T::zero(); b * c];
                    for bc in 0..b * c {
                        let mut acc = T::zero();
                        for k in 0..s {
                            acc += g[bc * s + k] * xd[bc * s + k];
                        }
                        gs[bc] = acc;
                    }
                    self.accum_grad(scale, &gs);
                }
            }
            Op::Tokenize(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, c) = (xs[0], xs[1]);
                    let n = xs[2] * xs[3] * xs[4];
                    let mut gx = vec![T::zero(); b * c * n];
                    for bi in 0..b {
                        for t in 0..n {
                            for ci in 0..c {
                                gx[(bi * c + ci) * n + t] = g[(bi * n + t) * c + ci];
                            }
                        }
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::Detokenize(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, n, c) = (xs[0], xs[1], xs[2]);
                    let mut gx = vec![T::zero(); b * n * c];
                    for bi in 0..b {
                        for t in 0..n {
                            for ci in 0..c {
                                gx[(bi * n + t) * c + ci] = g[(bi * c + ci) * n + t];
                            }
                        }
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::FlipTokens(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, n, c) = (xs[0], xs[1], xs[2]);
                    let mut gx = vec![T::zero(); b * n * c];
                    for bi in 0..b {
                        for t in 0..n {
                            let src = (bi * n + n - 1 - t) * c;
                            let dst = (bi * n + t) * c;
                            gx[dst..dst + c].copy_from_slice(&g[src..src + c]);
                        }
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::Reshape(a) => self.accum_grad(a, g),
            Op::AddBcastOuter(x, p) => {
                self.accum_grad(x, g);
                if self.needs(p) {
                    let n = self.numel(p);
                    let b = self.shape(x)[0];
                    let mut gp = vec![T::zero(); n];
                    for bi in 0..b {
                        for k in 0..n {
                            gp[k] += g[bi * n + k];
                        }
                    }
                    self.accum_grad(p, &gp);
                }
            }
            Op::SelectToken(a, t) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, n, c) = (xs[0], xs[1], xs[2]);
                    let mut gx = vec![T::zero(); b * n * c];
                    for bi in 0..b {
                        gx[(bi * n + t) * c..(bi * n + t) * c + c]
                            .copy_from_slice(&g[bi * c..(bi + 1) * c]);
                    }
                    self.accum_grad(a, &gx);
                }
            }
            Op::StackTokens(ref ids) => {
                let n = ids.len();
                let s0 = self.shape(ids[0]).to_vec();
                let (b, c) = (s0[0], s0[1]);
                for (t, inp) in ids.iter().enumerate() {
                    if self.needs(*inp) {
                        let mut gi = vec![T::zero(); b * c];
                        for bi in 0..b {
                            gi[bi * c..(bi + 1) * c]
                                .copy_from_slice(&g[(bi * n + t) * c..(bi * n + t) * c + c]);
                        }
                        self.accum_grad(*inp, &gi);
                    }
                }
            }
            Op::BOuter(a, b) => {
                let (bs, p) = (self.shape(a)[0], self.shape(a)[1]);
                let q = self.shape(b)[1];
                if self.needs(a) {
                    let bd = self.data(b);
                    let mut ga = vec![T::zero(); bs * p];
                    for bi in 0..bs {
                        for i in 0..p {
                            ga[bi * p + i] = kernels::dot(
                                &g[(bi * p + i) * q..(bi * p + i + 1) * q],
                                &bd[bi * q..(bi + 1) * q],
                            );
                        }
                    }
                    self.accum_grad(a, &ga);
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let mut gb = vec![T::zero(); bs * q];
                    for bi in 0..bs {
                        for i in 0..p {
                            kernels::axpy(
                                &mut gb[bi * q..(bi + 1) * q],
                                ad[bi * p + i],
                                &g[(bi * p + i) * q..(bi * p + i + 1) * q],
                            );
                        }
                    }
                    self.accum_grad(b, &gb);
                }
            }
            Op::BMatVec(m, v) => {
                let sm = self.shape(m).to_vec();
                let (bs, p, q) = (sm[0], sm[1], sm[2]);
                if self.needs(m) {
                    let vd = self.data(v);
                    let mut gm = vec![T::zero(); bs * p * q];
                    for bi in 0..bs {
                        for i in 0..p {
                            kernels::axpy(
                                &mut gm[(bi * p + i) * q..(bi * p + i + 1) * q],
                                g[bi * p + i],
                                &vd[bi * q..(bi + 1) * q],
                            );
                        }
                    }
                    self.accum_grad(m, &gm);
                }
                if self.needs(v) {
                    let md = self.data(m);
                    let mut gv = vec![T::zero(); bs * q];
                    for bi in 0..bs {
                        for i in 0..p {
                            kernels::axpy(
                                &mut gv[bi * q..(bi + 1) * q],
                                g[bi * p + i],
                                &md[(bi * p + i) * q..(bi * p + i + 1) * q],
                            );
                        }
                    }
                    self.accum_grad(v, &gv);
                }
            }
            Op::BDot(a, b) => {
                let (bs, p) = (self.shape(a)[0], self.shape(a)[1]);
                if self.needs(a) {
                    let bd = self.data(b);
                    let mut ga = vec![T::zero(); bs * p];
                    for bi in 0..bs {
                        for i in 0..p {
                            ga[bi * p + i] = g[bi] * bd[bi * p + i];
                        }
                    }
                    self.accum_grad(a, &ga);
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let mut gb = vec![T::zero(); bs * p];
                    for bi in 0..bs {
                        for i in 0..p {
                            gb[bi * p + i] = g[bi] * ad[bi * p + i];
                        }
                    }
                    self.accum_grad(b, &gb);
                }
            }
            Op::MulBcastB(x, s) => {
                let b = self.shape(x)[0];
                let n = self.numel(x) / b;
                if self.needs(x) {
                    let sd = self.data(s);
                    let mut gx = vec![T::zero(); b * n];
                    for bi in 0..b {
                        let sv = sd[bi];
                        for k in 0..n {
                            gx[bi * n + k] = g[bi * n + k] * sv;
                        }
                    }
                    self.accum_grad(x, &gx);
                }
                if self.needs(s) {
                    let xd = self.data(x);
                    let mut gs = vec![T::zero(); b];
                    for bi in 0..b {
                        gs[bi] = kernels::dot(
                            &g[bi * n..(bi + 1) * n],
                            &xd[bi * n..(bi + 1) * n],
                        );
                    }
                    self.accum_grad(s, &gs);
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let c = vec![g[0]; self.numel(a)];
                    self.accum_grad(a, &c);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(a) {
                    let n = self.numel(a);
                    let c = vec![g[0] * T::from_f64(1.0 / n as f64); n];
                    self.accum_grad(a, &c);
                }
            }
            Op::SpatialSum(a) => {
                if self.needs(a) {
                    let xs = self.shape(a);
                    let (b, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let mut gx = vec![T::zero(); b * c * s];
                    for bc in 0..b * c {
                        gx[bc * s..(bc + 1) * s].fill(g[bc]);
                    }
                    self.accum_grad(a, &gx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.param(vec![1.0, -2.0, 3.0], &[3]);
        let s = t.sum_all(x);
        t.backward(s);
        assert_eq!(t.grad(x).expect("x gets a grad"), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_elementwise_product_sum_is_the_other_factor() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.param(vec![1.0, 2.0], &[2]);
        let y = t.param(vec![5.0, -3.0], &[2]);
        let p = t.mul(x, y);
        let s = t.sum_all(p);
        t.backward(s);
        assert_eq!(t.grad(x).expect("grad x"), &[5.0, -3.0], "d(Σ x·y)/dx = y");
        assert_eq!(t.grad(y).expect("grad y"), &[1.0, 2.0], "d(Σ x·y)/dy = x");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.param(vec![2.0], &[1]);
        let k = t.leaf(vec![3.0], &[1]);
        let p = t.mul(x, k);
        t.backward(p);
        assert_eq!(t.grad(x).expect("param grad"), &[3.0]);
        assert!(t.grad(k).is_none(), "leaf must not accumulate a gradient");
    }

    #[test]
    fn gradient_accumulates_when_a_tensor_feeds_two_consumers() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.param(vec![3.0], &[1]);
        let sq = t.mul(x, x);
        t.backward(sq);
        assert_eq!(t.grad(x).expect("grad"), &[6.0], "d(x²)/dx = 2x");
    }

    #[test]
    fn backward_twice_after_reset_is_bit_identical() {
        let mut t: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..16).map(|v| (v as f64) * 0.13 - 1.0).collect();
        let x = t.param(vals, &[2, 2, 4]);
        let gamma = t.param(vec![1.0, 0.7], &[2]);
        let beta = t.param(vec![0.1, -0.2], &[2]);
        let y = t.group_norm(x, gamma, beta, 2, 1e-5);
        let z = t.sigmoid(y);
        let loss = t.mean_all(z);

        t.backward(loss);
        let first: Vec<f64> = t.grad(x).expect("grad").to_vec();
        t.reset_grads();
        t.backward(loss);
        let second: Vec<f64> = t.grad(x).expect("grad").to_vec();
        assert_eq!(first, second, "repeat backward must be deterministic");
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn backward_rejects_non_scalar_root() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.param(vec![1.0, 2.0], &[2]);
        let y = t.neg(x);
        t.backward(y);
    }

    #[test]
    fn max_pair_routes_ties_to_first_argument() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.param(vec![1.0, 5.0], &[2]);
        let b = t.param(vec![1.0, 2.0], &[2]);
        let m = t.max_pair(a, b);
        let s = t.sum_all(m);
        t.backward(s);
        assert_eq!(t.grad(a).expect("grad a"), &[1.0, 1.0]);
        assert_eq!(t.grad(b).expect("grad b"), &[0.0, 0.0]);
    }
}
