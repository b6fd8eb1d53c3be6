//! Forward primitives: shape contracts, value computation, node recording.
//!
//! Layout conventions used throughout: volumetric maps are [B,C,D,H,W],
//! token sequences are [B,N,C] with N = D·H·W flattened row-major, batched
//! vectors are [B,d], and scalars are shape [1]. Axis 1 is always the
//! channel axis of a volumetric map.

use super::kernels;
use super::{Op, Tape, TensorId};
use crate::dtype::Real;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        assert!($cond, "contract violation: {}", format_args!($($arg)+));
    };
}

/// Positive inputs to `exp` are clamped here so the primitive saturates
/// instead of overflowing to infinity; the model never exceeds single digits.
pub(crate) const EXP_MAX_ARG: f64 = 80.0;

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log σ(x) = min(x, 0) − ln(1 + exp(−|x|)), finite for every finite x.
pub(crate) fn logsigmoid_scalar<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn exp_scalar<T: Real>(x: T) -> T {
    x.min(T::from_f64(EXP_MAX_ARG)).exp()
}

/// Per-(batch, group) mean and 1/√(var+eps), accumulated in f64 so forward
/// and backward agree bit-for-bit on the same statistics.
pub(crate) fn gn_stats<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    s: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let cg = c / groups;
    let n = (cg * s) as f64;
    let mut mean = Vec::with_capacity(b * groups);
    let mut invstd = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for g in 0..groups {
            let start = (bi * c + g * cg) * s;
            let slice = &x[start..start + cg * s];
            let m: f64 = slice.iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var: f64 = slice
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / n;
            mean.push(T::from_f64(m));
            invstd.push(T::from_f64(1.0 / (var + eps).sqrt()));
        }
    }
    (mean, invstd)
}

impl<T: Real> Tape<T> {
    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(T) -> T) -> TensorId {
        let out: Vec<T> = self.data(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(op, shape, out)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, op: Op, f: impl Fn(T, T) -> T) -> TensorId {
        contract!(
            self.shape(a) == self.shape(b),
            "{} needs matching shapes, got {:?} vs {:?}",
            op.name(),
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(op, shape, out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn max_pair(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::MaxPair(a, b), |x, y| x.max(y))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        self.unary(a, Op::AddScalar(a), |x| x + cv)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        self.unary(a, Op::MulScalar(a, c), |x| x * cv)
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    /// Saturating exponential; see [`EXP_MAX_ARG`].
    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp(a), exp_scalar)
    }

    /// Natural log. The domain is the caller's responsibility; x ≤ 0 poisons
    /// the tape.
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn logsigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::LogSigmoid(a), logsigmoid_scalar)
    }

    pub fn leaky_relu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let al = T::from_f64(alpha);
        self.unary(a, Op::LeakyRelu(a, alpha), move |x| {
            if x > T::zero() {
                x
            } else {
                x * al
            }
        })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        contract!(lo <= hi, "clamp needs lo <= hi, got [{lo}, {hi}]");
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.max(l).min(h))
    }

    pub fn max_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        self.unary(a, Op::MaxConst(a, c), move |x| x.max(cv))
    }

    /// Max-shifted softmax along `axis`; outputs sum to 1 along that axis.
    pub fn softmax_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.shape(a).to_vec();
        contract!(
            axis < shape.len(),
            "softmax axis {axis} out of range for shape {:?}",
            shape
        );
        let alen = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(a);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * alen + j) * inner + i;
                let mut mx = xd[at(0)];
                for j in 1..alen {
                    mx = mx.max(xd[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..alen {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..alen {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push_op(Op::SoftmaxAxis(a, axis), shape, out)
    }

    /// out = x·wᵀ + b applied to the trailing axis of x.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        contract!(!xs.is_empty(), "linear input needs at least 1 axis");
        contract!(ws.len() == 2, "linear weight must be [out,in], got {:?}", ws);
        let (out_f, in_f) = (ws[0], ws[1]);
        contract!(
            *xs.last().expect("nonempty") == in_f,
            "linear trailing axis {} != weight in-features {}",
            xs.last().expect("nonempty"),
            in_f
        );
        contract!(
            bs == [out_f],
            "linear bias must be [{out_f}], got {:?}",
            bs
        );
        let rows = self.numel(x) / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        kernels::gemm_abt(self.data(x), self.data(w), &mut out, rows, in_f, out_f);
        let bd = self.data(b);
        for r in 0..rows {
            for (o, bias) in bd.iter().enumerate() {
                out[r * out_f + o] += *bias;
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("nonempty") = out_f;
        self.push_op(Op::Linear { x, w, b }, shape, out)
    }

    /// 3-D convolution with a cubic kernel, isotropic stride and zero
    /// padding. No bias term; use [`Tape::add_channel_bias`].
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let dims = self.conv_dims(x, w, stride, pad);
        let out = kernels::conv3d_forward(self.data(x), self.data(w), &dims);
        self.push_op(
            Op::Conv3d { x, w, stride, pad },
            vec![dims.b, dims.cout, dims.od, dims.oh, dims.ow],
            out,
        )
    }

    pub(crate) fn conv_dims(
        &self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> kernels::ConvDims {
        let xs = self.shape(x);
        let ws = self.shape(w);
        contract!(xs.len() == 5, "conv3d input must be [B,Cin,D,H,W], got {:?}", xs);
        contract!(
            ws.len() == 5,
            "conv3d kernel must be [Cout,Cin,k,k,k], got {:?}",
            ws
        );
        let k = ws[2];
        contract!(
            ws[3] == k && ws[4] == k,
            "conv3d kernel must be cubic, got {:?}",
            ws
        );
        contract!(k % 2 == 1, "conv3d kernel size must be odd, got {k}");
        contract!(ws[1] == xs[1], "conv3d channel mismatch: kernel {} vs input {}", ws[1], xs[1]);
        contract!(stride >= 1, "conv3d stride must be >= 1");
        if stride > 1 {
            contract!(
                xs[2] >= k && xs[3] >= k && xs[4] >= k,
                "conv3d with stride {stride} needs extents >= {k}, got {:?}",
                &xs[2..]
            );
        }
        contract!(
            xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k && xs[4] + 2 * pad >= k,
            "conv3d kernel {k} exceeds padded extents of {:?}",
            &xs[2..]
        );
        kernels::ConvDims {
            b: xs[0],
            cin: xs[1],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            cout: ws[0],
            k,
            stride,
            pad,
            od: kernels::ConvDims::out_extent(xs[2], k, stride, pad),
            oh: kernels::ConvDims::out_extent(xs[3], k, stride, pad),
            ow: kernels::ConvDims::out_extent(xs[4], k, stride, pad),
        }
    }

    /// Group normalization over [B,C,...] with affine parameters per channel.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() >= 2, "group_norm input must be [B,C,...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        contract!(groups >= 1 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        contract!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "group_norm affine params must be [{c}], got {:?} and {:?}",
            self.shape(gamma),
            self.shape(beta)
        );
        let cg = c / groups;
        let (mean, invstd) = gn_stats(self.data(x), b, c, s, groups, eps);
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let st = (bi * groups + ci / cg, (bi * c + ci) * s);
                let (m, r) = (mean[st.0], invstd[st.0]);
                let (g, be) = (gd[ci], bd[ci]);
                for i in 0..s {
                    out[st.1 + i] = (xd[st.1 + i] - m) * r * g + be;
                }
            }
        }
        self.push_op(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            xs,
            out,
        )
    }

    /// x[B,C,...] + bias[C] broadcast over batch and spatial axes.
    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() >= 2, "add_channel_bias input must be [B,C,...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        contract!(
            self.shape(bias) == [c],
            "bias must be [{c}], got {:?}",
            self.shape(bias)
        );
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let bv = bd[ci];
                for i in 0..s {
                    out[base + i] = xd[base + i] + bv;
                }
            }
        }
        self.push_op(Op::AddChannelBias(x, bias), xs, out)
    }

    /// 2³ average pooling; requires even extents.
    pub fn down2(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 5, "down2 input must be [B,C,D,H,W], got {:?}", xs);
        contract!(
            xs[2] % 2 == 0 && xs[3] % 2 == 0 && xs[4] % 2 == 0,
            "down2 needs even extents, got {:?}",
            &xs[2..]
        );
        let out = kernels::down2(self.data(x), xs[0], xs[1], xs[2], xs[3], xs[4]);
        let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2];
        self.push_op(Op::Down2(x), shape, out)
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn up2(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 5, "up2 input must be [B,C,D,H,W], got {:?}", xs);
        let out = kernels::up2(self.data(x), xs[0], xs[1], xs[2], xs[3], xs[4]);
        let shape = vec![xs[0], xs[1], xs[2] * 2, xs[3] * 2, xs[4] * 2];
        self.push_op(Op::Up2(x), shape, out)
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_c(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        contract!(
            sa.len() == sb.len() && sa.len() >= 2,
            "concat_c needs two [B,C,...] tensors, got {:?} and {:?}",
            sa,
            sb
        );
        contract!(
            sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat_c needs matching non-channel axes, got {:?} and {:?}",
            sa,
            sb
        );
        let s: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); ad.len() + bd.len()];
        for bi in 0..sa[0] {
            let dst = bi * (ca + cb) * s;
            out[dst..dst + ca * s].copy_from_slice(&ad[bi * ca * s..(bi + 1) * ca * s]);
            out[dst + ca * s..dst + (ca + cb) * s]
                .copy_from_slice(&bd[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        self.push_op(Op::ConcatC(a, b), shape, out)
    }

    /// Mean over the channel axis: [B,C,...] -> [B,1,...].
    pub fn channel_mean(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() >= 2, "channel_mean input must be [B,C,...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let inv = T::from_f64(1.0 / c as f64);
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * s];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * s;
                for i in 0..s {
                    out[bi * s + i] += xd[src + i];
                }
            }
            for i in 0..s {
                out[bi * s + i] *= inv;
            }
        }
        let mut shape = xs;
        shape[1] = 1;
        self.push_op(Op::ChannelMean(x), shape, out)
    }

    /// Max over the channel axis: [B,C,...] -> [B,1,...]. Gradient flows to
    /// the first maximizing channel.
    pub fn channel_max(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() >= 2, "channel_max input must be [B,C,...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * s];
        for bi in 0..b {
            for i in 0..s {
                let mut mx = xd[bi * c * s + i];
                for ci in 1..c {
                    mx = mx.max(xd[(bi * c + ci) * s + i]);
                }
                out[bi * s + i] = mx;
            }
        }
        let mut shape = xs;
        shape[1] = 1;
        self.push_op(Op::ChannelMax(x), shape, out)
    }

    /// x[B,C,...] ⊙ gate[B,1,...] broadcast over channels.
    pub fn mul_gate_spatial(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate).to_vec();
        contract!(
            xs.len() == gs.len() && xs.len() >= 2 && gs[1] == 1,
            "mul_gate_spatial needs x[B,C,...] and gate[B,1,...], got {:?} and {:?}",
            xs,
            gs
        );
        contract!(
            gs[0] == xs[0] && gs[2..] == xs[2..],
            "mul_gate_spatial gate axes must match x, got {:?} and {:?}",
            xs,
            gs
        );
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let gd = self.data(gate);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for i in 0..s {
                    out[base + i] = xd[base + i] * gd[bi * s + i];
                }
            }
        }
        self.push_op(Op::MulGateSpatial(x, gate), xs, out)
    }

    /// x[B,C,...] ⊙ scale[B,C] broadcast over spatial axes.
    pub fn mul_gate_channel(&mut self, x: TensorId, scale: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        contract!(
            xs.len() >= 2 && self.shape(scale) == [b, c],
            "mul_gate_channel needs x[B,C,...] and scale[B,C], got {:?} and {:?}",
            xs,
            self.shape(scale)
        );
        let s: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let sd = self.data(scale);
        let mut out = vec![T::zero(); xd.len()];
        for bc in 0..b * c {
            let sv = sd[bc];
            for i in 0..s {
                out[bc * s + i] = xd[bc * s + i] * sv;
            }
        }
        self.push_op(Op::MulGateChannel(x, scale), xs, out)
    }

    /// [B,C,D,H,W] -> [B,N,C] with N = D·H·W, voxel (d,h,w) at token
    /// d·H·W + h·W + w.
    pub fn tokenize(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 5, "tokenize input must be [B,C,D,H,W], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let n = xs[2] * xs[3] * xs[4];
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for t in 0..n {
                for ci in 0..c {
                    out[(bi * n + t) * c + ci] = xd[(bi * c + ci) * n + t];
                }
            }
        }
        self.push_op(Op::Tokenize(x), vec![b, n, c], out)
    }

    /// Inverse of [`Tape::tokenize`] for the given spatial extents.
    pub fn detokenize(&mut self, x: TensorId, dims: [usize; 3]) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 3, "detokenize input must be [B,N,C], got {:?}", xs);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        contract!(
            dims[0] * dims[1] * dims[2] == n,
            "detokenize extents {:?} do not multiply to N={n}",
            dims
        );
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for t in 0..n {
                for ci in 0..c {
                    out[(bi * c + ci) * n + t] = xd[(bi * n + t) * c + ci];
                }
            }
        }
        self.push_op(
            Op::Detokenize(x),
            vec![b, c, dims[0], dims[1], dims[2]],
            out,
        )
    }

    /// Reverse the token axis of [B,N,C].
    pub fn flip_tokens(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 3, "flip_tokens input must be [B,N,C], got {:?}", xs);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for t in 0..n {
                let src = (bi * n + n - 1 - t) * c;
                let dst = (bi * n + t) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.push_op(Op::FlipTokens(x), xs, out)
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        contract!(
            shape.iter().product::<usize>() == self.numel(x),
            "reshape {:?} -> {:?} changes element count",
            self.shape(x),
            shape
        );
        let out = self.data(x).to_vec();
        self.push_op(Op::Reshape(x), shape.to_vec(), out)
    }

    /// x[B,rest...] + p[rest...] broadcast over the batch axis.
    pub fn add_bcast_outer(&mut self, x: TensorId, p: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(
            xs.len() >= 2 && self.shape(p) == &xs[1..],
            "add_bcast_outer needs p shaped like x minus the batch axis, got {:?} and {:?}",
            xs,
            self.shape(p)
        );
        let b = xs[0];
        let n = self.numel(p);
        let xd = self.data(x);
        let pd = self.data(p);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for i in 0..n {
                out[bi * n + i] = xd[bi * n + i] + pd[i];
            }
        }
        self.push_op(Op::AddBcastOuter(x, p), xs, out)
    }

    /// Token t of [B,N,C] as [B,C].
    pub fn select_token(&mut self, x: TensorId, t: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 3, "select_token input must be [B,N,C], got {:?}", xs);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        contract!(t < n, "token index {t} out of range for N={n}");
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            out[bi * c..(bi + 1) * c]
                .copy_from_slice(&xd[(bi * n + t) * c..(bi * n + t) * c + c]);
        }
        self.push_op(Op::SelectToken(x, t), vec![b, c], out)
    }

    /// Stack N tensors of [B,C] into [B,N,C] in argument order.
    pub fn stack_tokens(&mut self, ids: &[TensorId]) -> TensorId {
        contract!(!ids.is_empty(), "stack_tokens needs at least one input");
        let s0 = self.shape(ids[0]).to_vec();
        contract!(s0.len() == 2, "stack_tokens inputs must be [B,C], got {:?}", s0);
        for id in ids {
            contract!(
                self.shape(*id) == s0,
                "stack_tokens inputs must agree, got {:?} vs {:?}",
                self.shape(*id),
                s0
            );
        }
        let (b, c) = (s0[0], s0[1]);
        let n = ids.len();
        let mut out = vec![T::zero(); b * n * c];
        for (t, id) in ids.iter().enumerate() {
            let d = self.data(*id);
            for bi in 0..b {
                out[(bi * n + t) * c..(bi * n + t) * c + c]
                    .copy_from_slice(&d[bi * c..(bi + 1) * c]);
            }
        }
        self.push_op(Op::StackTokens(ids.to_vec()), vec![b, n, c], out)
    }

    /// Batched outer product: [B,p] × [B,q] -> [B,p,q].
    pub fn bouter(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        contract!(
            sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
            "bouter needs [B,p] and [B,q], got {:?} and {:?}",
            sa,
            sb
        );
        let (bs, p, q) = (sa[0], sa[1], sb[1]);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); bs * p * q];
        for bi in 0..bs {
            for i in 0..p {
                let av = ad[bi * p + i];
                let dst = (bi * p + i) * q;
                for j in 0..q {
                    out[dst + j] = av * bd[bi * q + j];
                }
            }
        }
        self.push_op(Op::BOuter(a, b), vec![bs, p, q], out)
    }

    /// Batched matrix-vector product: [B,p,q] × [B,q] -> [B,p].
    pub fn bmatvec(&mut self, m: TensorId, v: TensorId) -> TensorId {
        let sm = self.shape(m).to_vec();
        let sv = self.shape(v).to_vec();
        contract!(
            sm.len() == 3 && sv.len() == 2 && sm[0] == sv[0] && sm[2] == sv[1],
            "bmatvec needs [B,p,q] and [B,q], got {:?} and {:?}",
            sm,
            sv
        );
        let (bs, p, q) = (sm[0], sm[1], sm[2]);
        let md = self.data(m);
        let vd = self.data(v);
        let mut out = vec![T::zero(); bs * p];
        for bi in 0..bs {
            let vrow = &vd[bi * q..(bi + 1) * q];
            for i in 0..p {
                let row = &md[(bi * p + i) * q..(bi * p + i + 1) * q];
                out[bi * p + i] = kernels::dot(row, vrow);
            }
        }
        self.push_op(Op::BMatVec(m, v), vec![bs, p], out)
    }

    /// Batched dot product: [B,p] × [B,p] -> [B].
    pub fn bdot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        contract!(
            sa.len() == 2 && self.shape(b) == sa,
            "bdot needs two matching [B,p], got {:?} and {:?}",
            sa,
            self.shape(b)
        );
        let (bs, p) = (sa[0], sa[1]);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); bs];
        for bi in 0..bs {
            out[bi] = kernels::dot(&ad[bi * p..(bi + 1) * p], &bd[bi * p..(bi + 1) * p]);
        }
        self.push_op(Op::BDot(a, b), vec![bs], out)
    }

    /// x[B,rest...] scaled per batch element by s[B].
    pub fn mul_bcast_b(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(
            !xs.is_empty() && self.shape(s) == [xs[0]],
            "mul_bcast_b needs x[B,...] and s[B], got {:?} and {:?}",
            xs,
            self.shape(s)
        );
        let b = xs[0];
        let n = self.numel(x) / b;
        let xd = self.data(x);
        let sd = self.data(s);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let sv = sd[bi];
            for i in 0..n {
                out[bi * n + i] = xd[bi * n + i] * sv;
            }
        }
        self.push_op(Op::MulBcastB(x, s), xs, out)
    }

    /// Sum of all elements as a [1] scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: T = self.data(x).iter().copied().sum();
        self.push_op(Op::SumAll(x), vec![1], vec![s])
    }

    /// Mean of all elements as a [1] scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x);
        contract!(n > 0, "mean_all of an empty tensor");
        let s: T = self.data(x).iter().copied().sum();
        let m = s * T::from_f64(1.0 / n as f64);
        self.push_op(Op::MeanAll(x), vec![1], vec![m])
    }

    /// Sum over every axis after the channel axis: [B,C,...] -> [B,C].
    pub fn spatial_sum(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() >= 2, "spatial_sum input must be [B,C,...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * c];
        for bc in 0..b * c {
            out[bc] = xd[bc * s..(bc + 1) * s].iter().copied().sum();
        }
        self.push_op(Op::SpatialSum(x), vec![b, c], out)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn conv_with_identity_kernel_is_identity() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf((0..8).map(|v| v as f32).collect(), &[1, 1, 2, 2, 2]);
        let w = t.leaf(vec![1.0], &[1, 1, 1, 1, 1]);
        let y = t.conv3d(x, w, 1, 0);
        assert_eq!(t.data(y), t.data(x), "1³ unit kernel must copy the input");
    }

    #[test]
    fn conv_ones_kernel_counts_neighbors() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0; 125], &[1, 1, 5, 5, 5]);
        let w = t.leaf(vec![1.0; 27], &[1, 1, 3, 3, 3]);
        let y = t.conv3d(x, w, 1, 1);
        // Interior voxel (2,2,2) sees all 27 ones; the corner only 8.
        let yd = t.data(y);
        assert_eq!(yd[(2 * 5 + 2) * 5 + 2], 27.0, "interior voxel must sum 27 ones");
        assert_eq!(yd[0], 8.0, "corner voxel must sum its 2³ in-bounds block");
    }

    #[test]
    fn conv_strided_output_extents_follow_floor_formula() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![0.0; 2 * 7 * 7 * 7], &[1, 2, 7, 7, 7]);
        let w = t.leaf(vec![0.0; 4 * 2 * 27], &[4, 2, 3, 3, 3]);
        let y = t.conv3d(x, w, 2, 1);
        assert_eq!(t.shape(y), &[1, 4, 4, 4, 4], "(7+2-3)/2+1 = 4");
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn conv_rejects_channel_mismatch() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![0.0; 8], &[1, 1, 2, 2, 2]);
        let w = t.leaf(vec![0.0; 2], &[2, 1, 1, 1, 1]);
        let w_bad = t.leaf(vec![0.0; 6], &[2, 3, 1, 1, 1]);
        let _ = (t.conv3d(x, w, 1, 0), t.conv3d(x, w_bad, 1, 0));
    }

    #[test]
    fn linear_identity_weight_zero_bias_is_identity() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t.leaf(vec![0.0, 0.0], &[2]);
        let y = t.linear(x, w, b);
        assert_eq!(t.data(y), t.data(x), "identity weight must copy the input");
    }

    #[test]
    fn linear_matches_hand_matrix_product() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[1, 2]);
        let w = t.leaf(vec![1.0, 1.0, 0.0, 1.0], &[2, 2]);
        let b = t.leaf(vec![0.0, 0.0], &[2]);
        let y = t.linear(x, w, b);
        assert_eq!(t.data(y), &[3.0, 2.0], "[1,2]·[[1,1],[0,1]]ᵀ = [3,2]");
    }

    #[test]
    fn linear_applies_to_trailing_axis_of_higher_rank_input() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0], &[1, 3, 2]);
        let w = t.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = t.leaf(vec![10.0], &[1]);
        let y = t.linear(x, w, b);
        assert_eq!(t.shape(y), &[1, 3, 1]);
        assert_eq!(t.data(y), &[11.0, 12.0, 16.0]);
    }

    #[test]
    fn sigmoid_matches_scalar_oracle() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![-1.0, 0.0, 1.0], &[3]);
        let y = t.sigmoid(x);
        let want = [0.26894f32, 0.5, 0.73106];
        for (got, want) in t.data(y).iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "sigmoid: got {got}, want {want}");
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform_and_sums_to_one() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![0.0, 0.0], &[2]);
        let y = t.softmax_axis(x, 0);
        assert_eq!(t.data(y), &[0.5, 0.5], "softmax([0,0]) must be uniform");
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t: Tape<f64> = Tape::new();
        let vals = vec![0.3, -1.2, 2.5, 0.0];
        let x = t.leaf(vals.clone(), &[4]);
        let xs = t.leaf(vals.iter().map(|v| v + 123.0).collect(), &[4]);
        let y = t.softmax_axis(x, 0);
        let ys = t.softmax_axis(xs, 0);
        for (a, b) in t.data(y).iter().zip(t.data(ys)) {
            assert!((a - b).abs() < 1e-12, "softmax(x+c) must equal softmax(x)");
        }
        let sum: f64 = t.data(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "softmax must sum to 1, got {sum}");
    }

    #[test]
    fn softmax_normalizes_the_requested_axis_only() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        let y = t.softmax_axis(x, 1);
        let yd = t.data(y);
        for i in 0..2 {
            let s: f32 = (0..3).map(|j| yd[j * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6, "column {i} must sum to 1, got {s}");
        }
    }

    #[test]
    fn stabilized_nonlinearities_stay_finite_at_extreme_inputs() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![-1000.0, -17.0, 0.0, 17.0, 1000.0], &[5]);
        let a = t.sigmoid(x);
        let b = t.logsigmoid(x);
        let c = t.exp(x);
        let d = t.softmax_axis(x, 0);
        for id in [a, b, c, d] {
            assert!(
                t.data(id).iter().all(|v| v.is_finite()),
                "{:?} produced a non-finite value",
                t.data(id)
            );
        }
        assert!(t.poison().is_none(), "no op should have poisoned the tape");
    }

    #[test]
    fn sigmoid_output_stays_strictly_inside_unit_interval() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf((-15..=15).map(|v| v as f32).collect(), &[31]);
        let y = t.sigmoid(x);
        for v in t.data(y) {
            assert!(*v > 0.0 && *v < 1.0, "sigmoid({v}) escaped (0,1)");
        }
    }

    #[test]
    fn group_norm_zeroes_constant_input_and_affine_shifts() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![3.25; 2 * 4 * 8], &[2, 4, 8]);
        let gamma = t.leaf(vec![1.0; 4], &[4]);
        let beta = t.leaf(vec![0.0; 4], &[4]);
        let y = t.group_norm(x, gamma, beta, 2, 1e-5);
        assert!(
            t.data(y).iter().all(|v| v.abs() < 1e-4),
            "constant input must normalize to ~0"
        );

        let gamma0 = t.leaf(vec![0.0; 4], &[4]);
        let beta_b = t.leaf(vec![7.0; 4], &[4]);
        let y2 = t.group_norm(x, gamma0, beta_b, 2, 1e-5);
        assert!(
            t.data(y2).iter().all(|v| (v - 7.0).abs() < 1e-6),
            "gamma=0 must produce the beta constant"
        );
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut t: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..48).map(|v| (v as f64) * 0.37 - 3.0).collect();
        let x = t.leaf(vals, &[2, 4, 6]);
        let gamma = t.leaf(vec![1.0; 4], &[4]);
        let beta = t.leaf(vec![0.0; 4], &[4]);
        let y = t.group_norm(x, gamma, beta, 2, 1e-9);
        let yd = t.data(y);
        for bi in 0..2 {
            for g in 0..2 {
                let slice: Vec<f64> = (0..12).map(|i| yd[bi * 24 + g * 12 + i]).collect();
                let m: f64 = slice.iter().sum::<f64>() / 12.0;
                let v: f64 = slice.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 12.0;
                assert!(m.abs() < 1e-9, "group mean must be ~0, got {m}");
                assert!((v - 1.0).abs() < 1e-6, "group variance must be ~1, got {v}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn group_norm_rejects_indivisible_groups() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![0.0; 6], &[1, 3, 2]);
        let gamma = t.leaf(vec![1.0; 3], &[3]);
        let beta = t.leaf(vec![0.0; 3], &[3]);
        let _ = t.group_norm(x, gamma, beta, 2, 1e-5);
    }

    #[test]
    fn tokenize_roundtrips_through_detokenize() {
        let mut t: Tape<f32> = Tape::new();
        let vals: Vec<f32> = (0..2 * 3 * 8).map(|v| v as f32).collect();
        let x = t.leaf(vals, &[2, 3, 2, 2, 2]);
        let tok = t.tokenize(x);
        assert_eq!(t.shape(tok), &[2, 8, 3]);
        // Voxel (d,h,w)=(1,0,1) of batch 0, channel 2 lands at token 5.
        let xd = t.data(x);
        let td = t.data(tok);
        assert_eq!(td[(5 * 3) + 2], xd[(2 * 8) + 5], "token order must be d·H·W + h·W + w");
        let back = t.detokenize(tok, [2, 2, 2]);
        assert_eq!(t.data(back), t.data(x), "detokenize must invert tokenize");
    }

    #[test]
    fn flip_tokens_reverses_the_sequence() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        let y = t.flip_tokens(x);
        assert_eq!(t.data(y), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        let z = t.flip_tokens(y);
        assert_eq!(t.data(z), t.data(x), "double flip must be identity");
    }

    #[test]
    fn select_and_stack_tokens_are_inverse() {
        let mut t: Tape<f32> = Tape::new();
        let vals: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        let x = t.leaf(vals, &[2, 3, 2]);
        let toks: Vec<_> = (0..3).map(|i| t.select_token(x, i)).collect();
        assert_eq!(t.data(toks[1]), &[2.0, 3.0, 8.0, 9.0]);
        let y = t.stack_tokens(&toks);
        assert_eq!(t.data(y), t.data(x), "stack(select_i) must rebuild the sequence");
    }

    #[test]
    fn batched_linear_algebra_matches_hand_values() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let outer = t.bouter(a, b);
        assert_eq!(
            t.data(outer),
            &[5.0, 6.0, 10.0, 12.0, 21.0, 24.0, 28.0, 32.0],
            "bouter batch 0 = [1,2]ᵀ[5,6]"
        );
        let dot = t.bdot(a, b);
        assert_eq!(t.data(dot), &[17.0, 53.0]);
        let mv = t.bmatvec(outer, b);
        // batch 0: [[5,6],[10,12]]·[5,6] = [61, 122]
        assert_eq!(t.data(mv), &[61.0, 122.0, 339.0, 452.0]);
    }

    #[test]
    fn concat_c_stacks_channel_blocks() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[2, 2, 2]);
        let y = t.concat_c(a, b);
        assert_eq!(t.shape(y), &[2, 3, 2]);
        assert_eq!(
            t.data(y),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn channel_pools_and_gates_broadcast_correctly() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 8.0], &[1, 2, 2]);
        let mean = t.channel_mean(x);
        assert_eq!(t.data(mean), &[2.0, 5.0]);
        let mx = t.channel_max(x);
        assert_eq!(t.data(mx), &[3.0, 8.0]);

        let gate = t.leaf(vec![0.5, 2.0], &[1, 1, 2]);
        let gated = t.mul_gate_spatial(x, gate);
        assert_eq!(t.data(gated), &[0.5, 4.0, 1.5, 16.0]);

        let scale = t.leaf(vec![10.0, 0.1], &[1, 2]);
        let scaled = t.mul_gate_channel(x, scale);
        assert_eq!(t.data(scaled), &[10.0, 20.0, 0.3, 0.8]);
    }

    #[test]
    fn reductions_match_hand_sums() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
        let s = t.sum_all(x);
        assert_eq!(t.data(s), &[21.0]);
        let m = t.mean_all(x);
        assert_eq!(t.data(m), &[3.5]);
        let ss = t.spatial_sum(x);
        assert_eq!(t.data(ss), &[6.0, 15.0]);
    }

    #[test]
    fn non_finite_output_poisons_the_tape_once() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![0.0, 1.0], &[2]);
        assert!(t.poison().is_none());
        let y = t.ln(x);
        let p = t.poison().expect("ln(0) must poison the tape");
        assert_eq!(p.node, y, "poison must name the offending node");
        assert_eq!(p.op, "ln");
        let z = t.recip(x);
        let _ = z;
        assert_eq!(
            t.poison().expect("still poisoned").node,
            y,
            "first poison must be kept"
        );
    }

    #[test]
    fn clamp_bounds_values_inclusively() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(vec![-20.0, -10.0, 0.5, 10.0, 20.0], &[5]);
        let y = t.clamp(x, -10.0, 10.0);
        assert_eq!(t.data(y), &[-10.0, -10.0, 0.5, 10.0, 10.0]);
    }
}
