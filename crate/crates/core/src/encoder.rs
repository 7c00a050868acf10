//! Transformer encoder with explicit backpropagation.
//!
//! Pre-LN blocks (multi-head self-attention, GELU feed-forward), learned
//! positional embeddings, a final layer norm, mean pooling and a linear
//! output map. Weights live in a flat slice addressed through
//! [`EncoderIndex`]; the backward pass accumulates into a slice of the same
//! length.

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub tokens: usize,
    pub input: usize,
    pub embed: usize,
    pub heads: usize,
    pub ff: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    pub ln1: (usize, usize),
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub o: (usize, usize),
    pub ln2: (usize, usize),
    pub ff1: (usize, usize),
    pub ff2: (usize, usize),
}

/// Offsets of every tensor, as `(weight, bias)` pairs of flat offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderIndex {
    pub dims: EncoderDims,
    pub embed: (usize, usize),
    pub pos: usize,
    pub blocks: Vec<BlockIndex>,
    pub final_ln: (usize, usize),
    pub head: (usize, usize),
}

struct LnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct EncoderCache {
    tokens: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    pooled: Vec<f64>,
}

/// `y[r] = W x[r] + b` for `n` rows; `W` is `[out, inp]` row-major.
fn linear(w: &[f64], b: &[f64], x: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            y[r * out + o] = b[o] + row.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

/// Accumulates `dW`, `db` (at offsets `p` of `dw`); returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    w: &[f64],
    p: (usize, usize),
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    n: usize,
    inp: usize,
    out: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * inp];
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g == 0.0 {
                continue;
            }
            dw[p.1 + o] += g;
            let row = &w[p.0 + o * inp..p.0 + (o + 1) * inp];
            let drow = &mut dw[p.0 + o * inp..p.0 + (o + 1) * inp];
            for i in 0..inp {
                drow[i] += g * xr[i];
                dxr[i] += g * row[i];
            }
        }
    }
    dx
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, e: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * e];
    let mut xhat = vec![0.0; n * e];
    let mut inv = vec![0.0; n];
    for r in 0..n {
        let xr = &x[r * e..(r + 1) * e];
        let mean = xr.iter().sum::<f64>() / e as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = s;
        for d in 0..e {
            let h = (xr[d] - mean) * s;
            xhat[r * e + d] = h;
            y[r * e + d] = h * g[d] + b[d];
        }
    }
    (y, LnCache { xhat, inv })
}

fn layer_norm_back(dy: &[f64], c: &LnCache, w: &[f64], p: (usize, usize), dw: &mut [f64], n: usize, e: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * e];
    let mut dxh = vec![0.0; e];
    for r in 0..n {
        let xh = &c.xhat[r * e..(r + 1) * e];
        let dyr = &dy[r * e..(r + 1) * e];
        for d in 0..e {
            dw[p.0 + d] += dyr[d] * xh[d];
            dw[p.1 + d] += dyr[d];
            dxh[d] = dyr[d] * w[p.0 + d];
        }
        let m1 = dxh.iter().sum::<f64>() / e as f64;
        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / e as f64;
        for d in 0..e {
            dx[r * e + d] = c.inv[r] * (dxh[d] - m1 - xh[d] * m2);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

impl EncoderIndex {
    fn t<'a>(&self, w: &'a [f64], off: usize, len: usize) -> &'a [f64] {
        &w[off..off + len]
    }

    /// Output vector plus the cache needed by [`EncoderIndex::backward`].
    pub fn forward(&self, w: &[f64], tokens: &[f64]) -> (Vec<f64>, EncoderCache) {
        let EncoderDims {
            tokens: n,
            input,
            embed: e,
            heads,
            ff,
            output,
        } = self.dims;
        assert_eq!(tokens.len(), n * input, "token block has wrong size");
        let hd = e / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = linear(
            self.t(w, self.embed.0, e * input),
            self.t(w, self.embed.1, e),
            tokens,
            n,
            input,
            e,
        );
        for (xv, p) in x.iter_mut().zip(self.t(w, self.pos, n * e)) {
            *xv += p;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = layer_norm(&x, self.t(w, b.ln1.0, e), self.t(w, b.ln1.1, e), n, e);
            let lin = |p: (usize, usize), inp: &[f64]| linear(self.t(w, p.0, e * e), self.t(w, p.1, e), inp, n, e, e);
            let (q, k, v) = (lin(b.q, &h1), lin(b.k, &h1), lin(b.v, &h1));
            let mut att = vec![0.0; heads * n * n];
            let mut ctx = vec![0.0; n * e];
            for h in 0..heads {
                for i in 0..n {
                    let a = &mut att[(h * n + i) * n..(h * n + i + 1) * n];
                    for j in 0..n {
                        a[j] = scale * (0..hd).map(|d| q[i * e + h * hd + d] * k[j * e + h * hd + d]).sum::<f64>();
                    }
                    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in a.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    a.iter_mut().for_each(|s| *s /= total);
                    for d in 0..hd {
                        ctx[i * e + h * hd + d] = (0..n).map(|j| a[j] * v[j * e + h * hd + d]).sum();
                    }
                }
            }
            let o = lin(b.o, &ctx);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
            let (h2, ln2) = layer_norm(&x, self.t(w, b.ln2.0, e), self.t(w, b.ln2.1, e), n, e);
            let pre = linear(self.t(w, b.ff1.0, ff * e), self.t(w, b.ff1.1, ff), &h2, n, e, ff);
            let act: Vec<f64> = pre.iter().map(|z| gelu(*z)).collect();
            let f2 = linear(self.t(w, b.ff2.0, e * ff), self.t(w, b.ff2.1, e), &act, n, ff, e);
            for (xv, fv) in x.iter_mut().zip(&f2) {
                *xv += fv;
            }
            blocks.push(BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                h2,
                pre,
                act,
            });
        }
        let (normed, final_ln) = layer_norm(&x, self.t(w, self.final_ln.0, e), self.t(w, self.final_ln.1, e), n, e);
        let mut pooled = vec![0.0; e];
        for r in 0..n {
            for d in 0..e {
                pooled[d] += normed[r * e + d] / n as f64;
            }
        }
        let out = linear(
            self.t(w, self.head.0, output * e),
            self.t(w, self.head.1, output),
            &pooled,
            1,
            e,
            output,
        );
        let cache = EncoderCache {
            tokens: tokens.to_vec(),
            blocks,
            final_ln,
            pooled,
        };
        (out, cache)
    }

    /// Backpropagate `d_out`: accumulates weight gradients into `dw` (same
    /// length as the weight slice) and returns the token gradient.
    pub fn backward(&self, w: &[f64], cache: &EncoderCache, d_out: &[f64], dw: &mut [f64]) -> Vec<f64> {
        let EncoderDims {
            tokens: n,
            input,
            embed: e,
            heads,
            ff,
            output,
        } = self.dims;
        let hd = e / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let d_pooled = linear_back(w, self.head, &cache.pooled, d_out, dw, 1, e, output);
        let mut d_normed = vec![0.0; n * e];
        for r in 0..n {
            for d in 0..e {
                d_normed[r * e + d] = d_pooled[d] / n as f64;
            }
        }
        let mut dx = layer_norm_back(&d_normed, &cache.final_ln, w, self.final_ln, dw, n, e);

        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_act = linear_back(w, b.ff2, &c.act, &dx, dw, n, ff, e);
            let d_pre: Vec<f64> = d_act.iter().zip(&c.pre).map(|(g, z)| g * gelu_derivative(*z)).collect();
            let d_h2 = linear_back(w, b.ff1, &c.h2, &d_pre, dw, n, e, ff);
            let d_mid = layer_norm_back(&d_h2, &c.ln2, w, b.ln2, dw, n, e);
            for (a, m) in dx.iter_mut().zip(&d_mid) {
                *a += m;
            }

            let d_ctx = linear_back(w, b.o, &c.ctx, &dx, dw, n, e, e);
            let mut dq = vec![0.0; n * e];
            let mut dk = vec![0.0; n * e];
            let mut dv = vec![0.0; n * e];
            let mut da = vec![0.0; n];
            for h in 0..heads {
                for i in 0..n {
                    let a = &c.att[(h * n + i) * n..(h * n + i + 1) * n];
                    for j in 0..n {
                        da[j] = 0.0;
                        for d in 0..hd {
                            let col = h * hd + d;
                            dv[j * e + col] += a[j] * d_ctx[i * e + col];
                            da[j] += d_ctx[i * e + col] * c.v[j * e + col];
                        }
                    }
                    let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        let ds = a[j] * (da[j] - dot) * scale;
                        for d in 0..hd {
                            let col = h * hd + d;
                            dq[i * e + col] += ds * c.k[j * e + col];
                            dk[j * e + col] += ds * c.q[i * e + col];
                        }
                    }
                }
            }
            let mut d_h1 = vec![0.0; n * e];
            for (p, dp) in [(b.q, &dq), (b.k, &dk), (b.v, &dv)] {
                let part = linear_back(w, p, &c.h1, dp, dw, n, e, e);
                for (a, v) in d_h1.iter_mut().zip(&part) {
                    *a += v;
                }
            }
            let d_in = layer_norm_back(&d_h1, &c.ln1, w, b.ln1, dw, n, e);
            for (a, v) in dx.iter_mut().zip(&d_in) {
                *a += v;
            }
        }

        for (g, d) in dw[self.pos..self.pos + n * e].iter_mut().zip(&dx) {
            *g += d;
        }
        linear_back(w, self.embed, &cache.tokens, &dx, dw, n, input, e)
    }

    /// `∂out_o/∂token_t` as a `[output][tokens·input]` table.
    pub fn token_jacobian(&self, w: &[f64], cache: &EncoderCache) -> Vec<Vec<f64>> {
        let mut scratch = vec![0.0; w.len()];
        (0..self.dims.output)
            .map(|o| {
                let mut d = vec![0.0; self.dims.output];
                d[o] = 1.0;
                self.backward(w, cache, &d, &mut scratch)
            })
            .collect()
    }
}
