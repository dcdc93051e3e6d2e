//! Fused multi-head scaled dot-product attention.

use super::kernels::{gemm, Mat};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

impl Graph {
    /// `softmax(Q·Kᵀ/√d)·V` per head.
    ///
    /// `q` is `[B, Tq, H·D]`, `k` and `v` are `[B, Tk, H·D]`. `mask` (length
    /// `B·Tk`) marks valid keys. A batch row with no valid key attends only to
    /// the `null_kv` pair (each `[H·D]`); without one, a fully masked row is an error.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
        null_kv: Option<(Var, Var)>,
    ) -> Result<Var> {
        let (b, tq, hd) = self.value(q).dims3()?;
        let (kb, tk, khd) = self.value(k).dims3()?;
        if self.shape(v) != [kb, tk, khd] || kb != b || khd != hd {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || hd % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {hd} features not divisible by {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.len() != b * tk {
                return Err(Error::Shape(format!(
                    "attention: mask length {} != context length {} x batch {b}",
                    m.len(),
                    tk
                )));
            }
        }
        if let Some((nk, nv)) = null_kv {
            if self.shape(nk) != [hd] || self.shape(nv) != [hd] {
                return Err(Error::Shape(format!(
                    "attention: null key/value must be [{hd}]"
                )));
            }
        }
        let mask: Vec<bool> = mask.map_or_else(|| vec![true; b * tk], <[bool]>::to_vec);
        let valid: Vec<bool> = (0..b)
            .map(|bi| mask[bi * tk..(bi + 1) * tk].iter().any(|&m| m))
            .collect();
        if null_kv.is_none() && valid.iter().any(|v| !v) {
            return Err(Error::Shape(
                "attention: fully masked context without a null key/value".into(),
            ));
        }
        let d = hd / heads;
        let scale = 1.0 / (d as f32).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0f32; b * heads * tq * tk];
        let mut out = vec![0.0f32; b * tq * hd];
        for bi in 0..b {
            for h in 0..heads {
                let ob = &mut out[bi * tq * hd + h * d..];
                if !valid[bi] {
                    let nv = self.value(null_kv.expect("checked above").1).data();
                    for i in 0..tq {
                        ob[i * hd..i * hd + d].copy_from_slice(&nv[h * d..(h + 1) * d]);
                    }
                    continue;
                }
                let p = &mut probs[(bi * heads + h) * tq * tk..(bi * heads + h + 1) * tq * tk];
                gemm(
                    tq,
                    d,
                    tk,
                    scale,
                    Mat::strided(&qv[bi * tq * hd + h * d..], hd, 1),
                    Mat::strided(&kv[bi * tk * hd + h * d..], 1, hd),
                    0.0,
                    p,
                    tk,
                );
                let m = &mask[bi * tk..(bi + 1) * tk];
                for row in p.chunks_exact_mut(tk) {
                    let max = row
                        .iter()
                        .zip(m)
                        .filter(|(_, &ok)| ok)
                        .fold(f32::NEG_INFINITY, |a, (&x, _)| a.max(x));
                    let mut total = 0.0f32;
                    for (x, &ok) in row.iter_mut().zip(m) {
                        *x = if ok { (*x - max).exp() } else { 0.0 };
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                gemm(
                    tq,
                    tk,
                    d,
                    1.0,
                    Mat::rows(p, tk),
                    Mat::strided(&vv[bi * tk * hd + h * d..], hd, 1),
                    0.0,
                    ob,
                    hd,
                );
            }
        }
        let out = Tensor::new(vec![b, tq, hd], out)?;
        let mut inputs = vec![q, k, v];
        if let Some((nk, nv)) = null_kv {
            inputs.extend([nk, nv]);
        }
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(move |graph, g, sink| {
                let qv = graph.value(q).data();
                let kv = graph.value(k).data();
                let vv = graph.value(v).data();
                let mut dq = vec![0.0f32; b * tq * hd];
                let mut dk = vec![0.0f32; b * tk * hd];
                let mut dv = vec![0.0f32; b * tk * hd];
                let mut dnv = vec![0.0f32; hd];
                let mut dp = vec![0.0f32; tq * tk];
                for bi in 0..b {
                    for h in 0..heads {
                        let gb = &g[bi * tq * hd + h * d..];
                        if !valid[bi] {
                            for i in 0..tq {
                                for j in 0..d {
                                    dnv[h * d + j] += gb[i * hd + j];
                                }
                            }
                            continue;
                        }
                        let p = &probs[(bi * heads + h) * tq * tk..(bi * heads + h + 1) * tq * tk];
                        // dV = Pᵀ·dO
                        gemm(
                            tk,
                            tq,
                            d,
                            1.0,
                            Mat::rows_t(p, tk),
                            Mat::strided(gb, hd, 1),
                            1.0,
                            &mut dv[bi * tk * hd + h * d..],
                            hd,
                        );
                        // dP = dO·Vᵀ
                        gemm(
                            tq,
                            d,
                            tk,
                            1.0,
                            Mat::strided(gb, hd, 1),
                            Mat::strided(&vv[bi * tk * hd + h * d..], 1, hd),
                            0.0,
                            &mut dp,
                            tk,
                        );
                        for (drow, prow) in dp.chunks_exact_mut(tk).zip(p.chunks_exact(tk)) {
                            let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (dx, &px) in drow.iter_mut().zip(prow) {
                                *dx = px * (*dx - dot);
                            }
                        }
                        gemm(
                            tq,
                            tk,
                            d,
                            scale,
                            Mat::rows(&dp, tk),
                            Mat::strided(&kv[bi * tk * hd + h * d..], hd, 1),
                            1.0,
                            &mut dq[bi * tq * hd + h * d..],
                            hd,
                        );
                        gemm(
                            tk,
                            tq,
                            d,
                            scale,
                            Mat::rows_t(&dp, tk),
                            Mat::strided(&qv[bi * tq * hd + h * d..], hd, 1),
                            1.0,
                            &mut dk[bi * tk * hd + h * d..],
                            hd,
                        );
                    }
                }
                sink.add(q, dq);
                sink.add(k, dk);
                sink.add(v, dv);
                if let Some((nk, nv)) = null_kv {
                    sink.with(nk, |_| {});
                    sink.add(nv, dnv);
                }
            }),
        ))
    }
}
