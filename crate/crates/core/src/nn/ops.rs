//! Differentiable tensor ops recorded on a [`Graph`].

use super::kernels::{add_assign, col2im, gemm, im2col, sigmoid, Mat};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn dims3(g: &Graph, v: Var, op: &str) -> Result<(usize, usize, usize)> {
    g.value(v)
        .dims3()
        .map_err(|e| Error::Shape(format!("{op}: {e}")))
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink.add(a, g.to_vec());
                sink.add(b, g.to_vec());
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink.add(a, g.to_vec());
                sink.add(b, g.iter().map(|x| -x).collect());
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |graph, g, sink| {
                if sink.wants(a) {
                    let vb = graph.value(b).data();
                    sink.add(a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if sink.wants(b) {
                    let va = graph.value(a).data();
                    sink.add(b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * s).collect(),
        )
        .expect("same length");
        self.push_op(
            out,
            &[a],
            Box::new(move |_, g, sink| sink.add(a, g.iter().map(|x| x * s).collect())),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same length");
        self.push_op(
            out,
            &[a],
            Box::new(move |graph, g, sink| {
                let x = graph.value(a).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                sink.add(a, dx);
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data: Vec<f32> = va.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same length");
        let y = out.data().to_vec();
        self.push_op(
            out,
            &[a],
            Box::new(move |_, g, sink| {
                sink.add(
                    a,
                    g.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                )
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let total = va.data().iter().map(|&x| x as f64).sum::<f64>() as f32;
        let n = va.len();
        self.push_op(
            Tensor::scalar(total),
            &[a],
            Box::new(move |_, g, sink| sink.add(a, vec![g[0]; n])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// `sum(a * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs {:?}",
                va.shape(),
                weights.shape()
            )));
        }
        let total = va
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x as f64 * w as f64)
            .sum::<f64>() as f32;
        let w = weights.data().to_vec();
        Ok(self.push_op(
            Tensor::scalar(total),
            &[a],
            Box::new(move |_, g, sink| sink.add(a, w.iter().map(|w| w * g[0]).collect())),
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len();
        let diff: Vec<f32> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let total = diff.iter().map(|&d| d as f64 * d as f64).sum::<f64>() / n as f64;
        Ok(self.push_op(
            Tensor::scalar(total as f32),
            &[a, b],
            Box::new(move |_, g, sink| {
                let k = 2.0 * g[0] / n as f32;
                if sink.wants(a) {
                    sink.add(a, diff.iter().map(|d| d * k).collect());
                }
                if sink.wants(b) {
                    sink.add(b, diff.iter().map(|d| -d * k).collect());
                }
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_, g, sink| sink.add(a, g.to_vec())),
        ))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let (b, x, y) = dims3(self, a, "transpose12")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            let s = &src[bi * x * y..(bi + 1) * x * y];
            let d = &mut data[bi * x * y..(bi + 1) * x * y];
            for i in 0..x {
                for j in 0..y {
                    d[j * x + i] = s[i * y + j];
                }
            }
        }
        let out = Tensor::new(vec![b, y, x], data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_, g, sink| {
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    let s = &g[bi * x * y..(bi + 1) * x * y];
                    let d = &mut dx[bi * x * y..(bi + 1) * x * y];
                    for i in 0..x {
                        for j in 0..y {
                            d[i * y + j] = s[j * x + i];
                        }
                    }
                }
                sink.add(a, dx);
            }),
        ))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + sz * inner]
                    .copy_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
            offset += sz;
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let parts = parts.to_vec();
        Ok(self.push_op(
            out,
            &parts.clone(),
            Box::new(move |_, g, sink| {
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(&sizes) {
                    if sink.wants(p) {
                        let mut dp = vec![0.0; outer * sz * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp[o * sz * inner..(o + 1) * sz * inner]
                                .copy_from_slice(&g[src..src + sz * inner]);
                        }
                        sink.add(p, dp);
                    }
                    offset += sz;
                }
            }),
        ))
    }

    /// Nearest-neighbour repeat along the time axis of `[B, C, L]`.
    pub fn repeat_time(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("repeat factor must be >= 1".into()));
        }
        let (b, c, l) = dims3(self, a, "repeat_time")?;
        if factor == 1 {
            return Ok(a);
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len() * factor);
        for &v in src {
            data.extend(std::iter::repeat_n(v, factor));
        }
        let out = Tensor::new(vec![b, c, l * factor], data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |_, g, sink| {
                sink.add(
                    a,
                    g.chunks_exact(factor).map(|ch| ch.iter().sum()).collect(),
                )
            }),
        ))
    }

    /// 1D cross-correlation. `x` is `[B, Cin, L]`, `weight` is `[Cout, Cin, K]`,
    /// `bias` is `[Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv1d stride must be positive".into(),
            ));
        }
        let (b, cin, len) = dims3(self, x, "conv1d input")?;
        let (cout, wcin, k) = dims3(self, weight, "conv1d weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv1d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::Shape(format!(
                    "conv1d bias {:?}, expected [{cout}]",
                    self.shape(bv)
                )));
            }
        }
        if len + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv1d: length {len} with padding {pad} shorter than kernel {k}"
            )));
        }
        let out_len = (len + 2 * pad - k) / stride + 1;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0f32; b * cout * out_len];
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![0.0; cin * k * out_len]
        };
        for bi in 0..b {
            let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
            let ob = &mut out[bi * cout * out_len..(bi + 1) * cout * out_len];
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (o, row) in ob.chunks_exact_mut(out_len).enumerate() {
                    row.fill(bias[o]);
                }
            }
            let colm = if direct {
                xb
            } else {
                im2col(xb, cin, len, k, stride, pad, out_len, &mut cols);
                &cols[..]
            };
            gemm(
                cout,
                cin * k,
                out_len,
                1.0,
                Mat::rows(wv, cin * k),
                Mat::rows(colm, out_len),
                1.0,
                ob,
                out_len,
            );
        }
        let out = Tensor::new(vec![b, cout, out_len], out)?;
        let inputs: Vec<Var> = [Some(x), Some(weight), bias]
            .into_iter()
            .flatten()
            .collect();
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(move |graph, g, sink| {
                let xv = graph.value(x).data();
                let wv = graph.value(weight).data();
                let want_x = sink.wants(x);
                let want_w = sink.wants(weight);
                let mut dw = if want_w {
                    vec![0.0; cout * cin * k]
                } else {
                    Vec::new()
                };
                let mut dx = if want_x {
                    vec![0.0; b * cin * len]
                } else {
                    Vec::new()
                };
                let mut cols = vec![0.0; if direct { 0 } else { cin * k * out_len }];
                let mut dcols = vec![
                    0.0;
                    if direct || !want_x {
                        0
                    } else {
                        cin * k * out_len
                    }
                ];
                for bi in 0..b {
                    let gb = &g[bi * cout * out_len..(bi + 1) * cout * out_len];
                    let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
                    if want_w {
                        let colm = if direct {
                            xb
                        } else {
                            im2col(xb, cin, len, k, stride, pad, out_len, &mut cols);
                            &cols[..]
                        };
                        gemm(
                            cout,
                            out_len,
                            cin * k,
                            1.0,
                            Mat::rows(gb, out_len),
                            Mat::rows_t(colm, out_len),
                            1.0,
                            &mut dw,
                            cin * k,
                        );
                    }
                    if want_x {
                        let dxb = &mut dx[bi * cin * len..(bi + 1) * cin * len];
                        if direct {
                            gemm(
                                cin,
                                cout,
                                out_len,
                                1.0,
                                Mat::rows_t(wv, cin * k),
                                Mat::rows(gb, out_len),
                                1.0,
                                dxb,
                                out_len,
                            );
                        } else {
                            gemm(
                                cin * k,
                                cout,
                                out_len,
                                1.0,
                                Mat::rows_t(wv, cin * k),
                                Mat::rows(gb, out_len),
                                0.0,
                                &mut dcols,
                                out_len,
                            );
                            col2im(&dcols, cin, len, k, stride, pad, out_len, dxb);
                        }
                    }
                }
                if want_x {
                    sink.add(x, dx);
                }
                if want_w {
                    sink.add(weight, dw);
                }
                if let Some(bv) = bias {
                    sink.with(bv, |db| {
                        for bi in 0..b {
                            for o in 0..cout {
                                let row =
                                    &g[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                                db[o] += row.iter().sum::<f32>();
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Affine map over the last axis: `[B, T, F] · [F, G] + [G]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, t, f) = dims3(self, x, "linear input")?;
        let ws = self.shape(weight).to_vec();
        let [wf, gdim] = ws[..] else {
            return Err(Error::Shape(format!(
                "linear weight must be rank 2, got {ws:?}"
            )));
        };
        if wf != f {
            return Err(Error::Shape(format!(
                "linear: input has {f} features, weight expects {wf}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [gdim] {
                return Err(Error::Shape(format!(
                    "linear bias {:?}, expected [{gdim}]",
                    self.shape(bv)
                )));
            }
        }
        let rows = b * t;
        let mut out = vec![0.0; rows * gdim];
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            for row in out.chunks_exact_mut(gdim) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            f,
            gdim,
            1.0,
            Mat::rows(self.value(x).data(), f),
            Mat::rows(self.value(weight).data(), gdim),
            1.0,
            &mut out,
            gdim,
        );
        let out = Tensor::new(vec![b, t, gdim], out)?;
        let inputs: Vec<Var> = [Some(x), Some(weight), bias]
            .into_iter()
            .flatten()
            .collect();
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(move |graph, g, sink| {
                if sink.wants(x) {
                    let mut dx = vec![0.0; rows * f];
                    gemm(
                        rows,
                        gdim,
                        f,
                        1.0,
                        Mat::rows(g, gdim),
                        Mat::rows_t(graph.value(weight).data(), gdim),
                        0.0,
                        &mut dx,
                        f,
                    );
                    sink.add(x, dx);
                }
                if sink.wants(weight) {
                    let mut dw = vec![0.0; f * gdim];
                    gemm(
                        f,
                        rows,
                        gdim,
                        1.0,
                        Mat::rows_t(graph.value(x).data(), f),
                        Mat::rows(g, gdim),
                        0.0,
                        &mut dw,
                        gdim,
                    );
                    sink.add(weight, dw);
                }
                if let Some(bv) = bias {
                    sink.with(bv, |db| {
                        for row in g.chunks_exact(gdim) {
                            add_assign(db, row);
                        }
                    });
                }
            }),
        ))
    }

    /// Group normalisation of `[B, C, L]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var> {
        let (b, c, l) = dims3(self, x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("group_norm affine must be [{c}]")));
        }
        let per = c / groups;
        let span = per * l;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; b * groups];
        let mut out = vec![0.0f32; xv.len()];
        for bg in 0..b * groups {
            let s = &xv[bg * span..(bg + 1) * span];
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std[bg] = inv as f32;
            let ch0 = (bg % groups) * per;
            for (j, &v) in s.iter().enumerate() {
                let h = ((v as f64 - mean) * inv) as f32;
                let ch = ch0 + j / l;
                xhat[bg * span + j] = h;
                out[bg * span + j] = h * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::new(vec![b, c, l], out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |graph, g, sink| {
                let gv = graph.value(gamma).data();
                if sink.wants(x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for bg in 0..b * groups {
                        let ch0 = (bg % groups) * per;
                        let (mut m1, mut m2) = (0.0f64, 0.0f64);
                        for j in 0..span {
                            let d = g[bg * span + j] * gv[ch0 + j / l];
                            m1 += d as f64;
                            m2 += d as f64 * xhat[bg * span + j] as f64;
                        }
                        let m1 = (m1 / span as f64) as f32;
                        let m2 = (m2 / span as f64) as f32;
                        let inv = inv_std[bg];
                        for j in 0..span {
                            let i = bg * span + j;
                            let d = g[i] * gv[ch0 + j / l];
                            dx[i] = inv * (d - m1 - xhat[i] * m2);
                        }
                    }
                    sink.add(x, dx);
                }
                if sink.wants(gamma) || sink.wants(beta) {
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * l;
                            for i in base..base + l {
                                dg[ch] += g[i] * xhat[i];
                                db[ch] += g[i];
                            }
                        }
                    }
                    sink.add(gamma, dg);
                    sink.add(beta, db);
                }
            }),
        ))
    }

    /// `x * (1 + scale) + shift` per channel, where `scale_shift` is
    /// `[B, 1, 2C]` holding the scales followed by the shifts.
    pub fn modulate(&mut self, x: Var, scale_shift: Var) -> Result<Var> {
        let (b, c, l) = dims3(self, x, "modulate")?;
        let ss = self.shape(scale_shift).to_vec();
        if ss != [b, 1, 2 * c] {
            return Err(Error::Shape(format!(
                "modulate: scale/shift {ss:?}, expected [{b}, 1, {}]",
                2 * c
            )));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale_shift).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let scale = 1.0 + sv[bi * 2 * c + ch];
                let shift = sv[bi * 2 * c + c + ch];
                let base = (bi * c + ch) * l;
                for i in base..base + l {
                    out[i] = xv[i] * scale + shift;
                }
            }
        }
        let out = Tensor::new(vec![b, c, l], out)?;
        Ok(self.push_op(
            out,
            &[x, scale_shift],
            Box::new(move |graph, g, sink| {
                let xv = graph.value(x).data();
                let sv = graph.value(scale_shift).data();
                if sink.wants(x) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let scale = 1.0 + sv[bi * 2 * c + ch];
                            let base = (bi * c + ch) * l;
                            for i in base..base + l {
                                dx[i] = g[i] * scale;
                            }
                        }
                    }
                    sink.add(x, dx);
                }
                if sink.wants(scale_shift) {
                    let mut ds = vec![0.0; b * 2 * c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * l;
                            let (mut dsc, mut dsh) = (0.0f32, 0.0f32);
                            for i in base..base + l {
                                dsc += g[i] * xv[i];
                                dsh += g[i];
                            }
                            ds[bi * 2 * c + ch] = dsc;
                            ds[bi * 2 * c + c + ch] = dsh;
                        }
                    }
                    sink.add(scale_shift, ds);
                }
            }),
        ))
    }
}
