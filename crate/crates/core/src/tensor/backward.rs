//! Backward rules, one arm per [`Op`] variant.

use super::kernels::{self, ConvGeom};
use super::ops::{log_sigmoid, split_axis, unary_derivative, Op};
use super::{Graph, Var};
use crate::scalar::Scalar;

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub(super) fn backward_op(&mut self, out: Var, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                self.with_grad(a, |this, ga| {
                    let bd = this.data(b);
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
                self.with_grad(b, |this, gb| {
                    let ad = this.data(a);
                    for bi in 0..batch {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                });
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                geom,
                groups,
            } => self.conv2d_backward(x, w, bias, &geom, groups, g),
            &Op::Add(a, b) => {
                self.with_grad(a, |_, ga| add_into(ga, g));
                self.with_grad(b, |_, gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.with_grad(a, |_, ga| add_into(ga, g));
                self.with_grad(b, |_, gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            &Op::Mul(a, b) => {
                self.with_grad(a, |this, ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(this.data(b)) {
                        *d += s * o;
                    }
                });
                self.with_grad(b, |this, gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(this.data(a)) {
                        *d += s * o;
                    }
                });
            }
            &Op::AddBias { x, bias, axis } => {
                self.with_grad(x, |_, gx| add_into(gx, g));
                let shape = self.shape(x).to_vec();
                self.with_grad(bias, |_, gb| {
                    let (outer, len, inner) = split_axis(&shape, axis);
                    for o in 0..outer {
                        for c in 0..len {
                            let base = (o * len + c) * inner;
                            gb[c] += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            &Op::MulBias { x, scale, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                self.with_grad(x, |this, gx| {
                    let sd = this.data(scale);
                    for o in 0..outer {
                        for c in 0..len {
                            let base = (o * len + c) * inner;
                            for i in base..base + inner {
                                gx[i] += g[i] * sd[c];
                            }
                        }
                    }
                });
                self.with_grad(scale, |this, gs| {
                    let xd = this.data(x);
                    for o in 0..outer {
                        for c in 0..len {
                            let base = (o * len + c) * inner;
                            let mut acc = T::zero();
                            for i in base..base + inner {
                                acc += g[i] * xd[i];
                            }
                            gs[c] += acc;
                        }
                    }
                });
            }
            &Op::Scale(x, c) => self.with_grad(x, |_, gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s * c;
                }
            }),
            &Op::AddScalar(x) | &Op::Reshape(x) => self.with_grad(x, |_, gx| add_into(gx, g)),
            &Op::Unary(x, kind) => self.with_grad(x, |this, gx| {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(this.data(x)) {
                    *d += s * unary_derivative(kind, v);
                }
            }),
            &Op::Softmax(x) => self.with_grad(x, |this, gx| {
                let y = this.data(out);
                let d = *this.shape(out).last().unwrap_or(&1);
                for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap_or(&1);
                let dn = T::from_count(d);
                if let Some((gamma, beta)) = *affine {
                    self.with_grad(gamma, |_, gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                                *o += gi * hi;
                            }
                        }
                    });
                    self.with_grad(beta, |_, gb| {
                        for gr in g.chunks(d) {
                            add_into(gb, gr);
                        }
                    });
                }
                self.with_grad(*x, |this, gx| {
                    let gamma = affine.map(|(gm, _)| this.data(gm));
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((gr, hr), gxr)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = match gamma {
                                Some(gm) => gr[j] * gm[j],
                                None => gr[j],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let shape = self.shape(*x).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                self.with_grad(*gamma, |_, gg| {
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * inner;
                            for i in base..base + inner {
                                gg[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                });
                self.with_grad(*beta, |_, gb| {
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * inner;
                            gb[ch] += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
                let train = *train;
                self.with_grad(*x, |this, gx| {
                    let gd = this.data(*gamma);
                    if !train {
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * inner;
                                for i in base..base + inner {
                                    gx[i] += g[i] * gd[ch] * rstd[ch];
                                }
                            }
                        }
                        return;
                    }
                    let m = T::from_count(n * inner);
                    for ch in 0..c {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for ni in 0..n {
                            let base = (ni * c + ch) * inner;
                            for i in base..base + inner {
                                let dxh = g[i] * gd[ch];
                                sum_d += dxh;
                                sum_dh += dxh * xhat[i];
                            }
                        }
                        for ni in 0..n {
                            let base = (ni * c + ch) * inner;
                            for i in base..base + inner {
                                let dxh = g[i] * gd[ch];
                                gx[i] += rstd[ch] / m * (m * dxh - sum_d - xhat[i] * sum_dh);
                            }
                        }
                    }
                });
            }
            &Op::AvgPool2d { x, k, s } => {
                let sh = self.shape(x).to_vec();
                let (h, w) = (sh[2], sh[3]);
                let osh = self.shape(out).to_vec();
                let (oh, ow) = (osh[2], osh[3]);
                let inv = T::one() / T::from_count(k * k);
                self.with_grad(x, |_, gx| {
                    for p in 0..sh[0] * sh[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(p * oh + oy) * ow + ox] * inv;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        gx[p * h * w + (oy * s + ky) * w + ox * s + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => self.with_grad(*x, |_, gx| {
                for (&i, &gv) in argmax.iter().zip(g) {
                    gx[i] += gv;
                }
            }),
            &Op::GlobalAvgPool(x) => {
                let sh = self.shape(x).to_vec();
                let hw = sh[2] * sh[3];
                let inv = T::one() / T::from_count(hw);
                self.with_grad(x, |_, gx| {
                    for (p, &gv) in g.iter().enumerate() {
                        for v in &mut gx[p * hw..(p + 1) * hw] {
                            *v += gv * inv;
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                let map = kernels::permute_index(self.shape(*x), axes);
                self.with_grad(*x, |_, gx| {
                    for (&src, &gv) in map.iter().zip(g) {
                        gx[src] += gv;
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.with_grad(v, |_, gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let sh = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&sh, axis);
                let width = self.shape(out)[axis];
                self.with_grad(x, |_, gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            &Op::Flip { x, axis } => {
                let sh = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&sh, axis);
                self.with_grad(x, |_, gx| {
                    for o in 0..outer {
                        for i in 0..len {
                            let j = len - 1 - i;
                            add_into(
                                &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner],
                                &g[(o * len + i) * inner..(o * len + i + 1) * inner],
                            );
                        }
                    }
                });
            }
            &Op::Sum(x) => self.with_grad(x, |_, gx| {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }),
            &Op::Mean(x) => self.with_grad(x, |_, gx| {
                let s = g[0] / T::from_count(gx.len());
                for v in gx.iter_mut() {
                    *v += s;
                }
            }),
            Op::Gather { x, idx } => self.with_grad(*x, |_, gx| {
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let scale = g[0] / T::from_count(n);
                let off = *smoothing / T::from_count(k);
                let on = T::one() - *smoothing + off;
                self.with_grad(*logits, |_, gl| {
                    for i in 0..n {
                        for j in 0..k {
                            let q = if j == targets[i] { on } else { off };
                            gl[i * k + j] += (probs[i * k + j] - q) * scale;
                        }
                    }
                });
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let (alpha, gamma) = (*alpha, *gamma);
                self.with_grad(*logits, |this, gl| {
                    let n = T::from_count(targets.len());
                    let scale = g[0] / n;
                    for ((o, &z), &y) in gl.iter_mut().zip(this.data(*logits)).zip(targets) {
                        let (u, at, sgn) = if y {
                            (z, alpha, T::one())
                        } else {
                            (-z, T::one() - alpha, -T::one())
                        };
                        let log_pt = log_sigmoid(u);
                        let pt = log_pt.exp();
                        let q = T::one() - pt;
                        // d/du of −α_t q^γ log p_t, with dp_t/du = p_t q.
                        let d_du = if gamma == T::zero() {
                            -at * q
                        } else {
                            -at * (q.powf(gamma + T::one()) - gamma * q.powf(gamma) * pt * log_pt)
                        };
                        *o += sgn * d_du * scale;
                    }
                });
            }
            &Op::L2Dist(x) => {
                let sh = self.shape(x).to_vec();
                let (n, d) = (sh[0], sh[1]);
                self.with_grad(x, |this, gx| {
                    let xd = this.data(x);
                    let dist = this.data(out);
                    for i in 0..n {
                        for j in 0..n {
                            let dij = dist[i * n + j];
                            if i == j || dij == T::zero() {
                                continue;
                            }
                            let coef = (g[i * n + j] + g[j * n + i]) / dij;
                            if coef == T::zero() {
                                continue;
                            }
                            for p in 0..d {
                                gx[i * d + p] += coef * (xd[i * d + p] - xd[j * d + p]);
                            }
                        }
                    }
                });
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                reverse,
                states,
            } => self.scan_backward([*u, *delta, *a, *b, *c, *d], *reverse, states, g),
        }
    }

    fn conv2d_backward(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        groups: usize,
        g: &[T],
    ) {
        let sx = self.shape(x).to_vec();
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = self.shape(w)[0];
        let cig = ci / groups;
        let cog = co / groups;
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        if let Some(bv) = bias {
            self.with_grad(bv, |_, gb| {
                for ni in 0..n {
                    for c in 0..co {
                        gb[c] += g[(ni * co + c) * plane..(ni * co + c + 1) * plane]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                }
            });
        }
        self.with_grad(w, |this, gw| {
            let xd = this.data(x);
            let mut cols = vec![T::zero(); rows * plane];
            for ni in 0..n {
                for gi in 0..groups {
                    let img = &xd[(ni * ci + gi * cig) * h * wd..(ni * ci + (gi + 1) * cig) * h * wd];
                    kernels::im2col(geom, img, &mut cols);
                    let go = &g[(ni * co + gi * cog) * plane..(ni * co + (gi + 1) * cog) * plane];
                    kernels::gemm_nt(
                        cog,
                        plane,
                        rows,
                        go,
                        &cols,
                        &mut gw[gi * cog * rows..(gi + 1) * cog * rows],
                    );
                }
            }
        });
        self.with_grad(x, |this, gx| {
            let wdat = this.data(w);
            let mut dcols = vec![T::zero(); rows * plane];
            for ni in 0..n {
                for gi in 0..groups {
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    let go = &g[(ni * co + gi * cog) * plane..(ni * co + (gi + 1) * cog) * plane];
                    kernels::gemm_tn(
                        rows,
                        cog,
                        plane,
                        &wdat[gi * cog * rows..(gi + 1) * cog * rows],
                        go,
                        &mut dcols,
                    );
                    let dst = &mut gx[(ni * ci + gi * cig) * h * wd..(ni * ci + (gi + 1) * cig) * h * wd];
                    kernels::col2im(geom, &dcols, dst);
                }
            }
        });
    }

    fn scan_backward(&mut self, inputs: [Var; 6], reverse: bool, states: &[T], g: &[T]) {
        let [u, delta, a, b, c, d] = inputs;
        let su = self.shape(u).to_vec();
        let (bs, l, ch) = (su[0], su[1], su[2]);
        let st = self.shape(a)[1];
        let mut du = vec![T::zero(); bs * l * ch];
        let mut ddelta = vec![T::zero(); bs * l * ch];
        let mut da = vec![T::zero(); ch * st];
        let mut db = vec![T::zero(); bs * l * st];
        let mut dc = vec![T::zero(); bs * l * st];
        let mut dd = vec![T::zero(); ch];
        {
            let (ud, dtd, ad, bd, cd, skip) = (
                self.data(u),
                self.data(delta),
                self.data(a),
                self.data(b),
                self.data(c),
                self.data(d),
            );
            let order = |step: usize| if reverse { l - 1 - step } else { step };
            let zeros = vec![T::zero(); st];
            let mut dh = vec![T::zero(); st];
            for bi in 0..bs {
                for k in 0..ch {
                    dh.iter_mut().for_each(|v| *v = T::zero());
                    for step in (0..l).rev() {
                        let row = bi * l + order(step);
                        let x = ud[row * ch + k];
                        let dt = dtd[row * ch + k];
                        let gy = g[row * ch + k];
                        let h_t = &states[(row * ch + k) * st..(row * ch + k + 1) * st];
                        let h_prev = if step > 0 {
                            let prow = bi * l + order(step - 1);
                            &states[(prow * ch + k) * st..(prow * ch + k + 1) * st]
                        } else {
                            &zeros[..]
                        };
                        dd[k] += gy * x;
                        let mut du_acc = gy * skip[k];
                        let mut ddt_acc = T::zero();
                        for s in 0..st {
                            dh[s] += gy * cd[row * st + s];
                            dc[row * st + s] += gy * h_t[s];
                            let av = ad[k * st + s];
                            let bv = bd[row * st + s];
                            let decay = (dt * av).exp();
                            du_acc += dh[s] * dt * bv;
                            db[row * st + s] += dh[s] * dt * x;
                            ddt_acc += dh[s] * (av * decay * h_prev[s] + bv * x);
                            da[k * st + s] += dh[s] * dt * decay * h_prev[s];
                            dh[s] *= decay;
                        }
                        du[row * ch + k] += du_acc;
                        ddelta[row * ch + k] += ddt_acc;
                    }
                }
            }
        }
        for (v, grad) in [(u, du), (delta, ddelta), (a, da), (b, db), (c, dc), (d, dd)] {
            self.with_grad(v, |_, gv| add_into(gv, &grad));
        }
    }
}
