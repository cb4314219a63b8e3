//! Straightforward f64 forward passes, written without the tape, used as
//! the smooth function that finite differences are taken of.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mogo_core::hct::{relative_table, HctConfig};
use mogo_core::rvq::{RvqConfig, TokenGrid};
use mogo_core::ParamStore;

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_f64(ps: &ParamStore) -> Params {
    ps.iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `[m, k] @ [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

pub fn linear(
    x: &[f64],
    rows: usize,
    w: &[f64],
    din: usize,
    dout: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = matmul(x, w, rows, din, dout);
    if let Some(b) = b {
        for r in 0..rows {
            for j in 0..dout {
                y[r * dout + j] += b[j];
            }
        }
    }
    y
}

pub fn layer_norm(x: &[f64], n: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / n {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for i in 0..n {
            out[r * n + i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
    }
    out
}

/// Softmax of each length-`n` row; with `causal = Some((rows, off))`,
/// entries past `i + off` (i = row within each `rows`-row matrix) get zero.
pub fn softmax(x: &[f64], n: usize, causal: Option<(usize, usize)>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / n {
        let limit = causal.map_or(n, |(rows, off)| (r % rows + off + 1).min(n));
        let row = &x[r * n..r * n + limit];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..limit {
            out[r * n + j] = (row[j] - m).exp() / z;
        }
    }
    out
}

/// `x [c, l]`, `w [o, c, k]` -> `[o, lout]`.
pub fn conv1d(
    x: &[f64],
    c: usize,
    l: usize,
    w: &[f64],
    o: usize,
    k: usize,
    b: &[f64],
    pad: (usize, usize),
    stride: usize,
) -> (Vec<f64>, usize) {
    let lout = (l + pad.0 + pad.1 - k) / stride + 1;
    let mut y = vec![0.0; o * lout];
    for oc in 0..o {
        for t in 0..lout {
            let mut s = b[oc];
            for ic in 0..c {
                for kk in 0..k {
                    let pos = (t * stride + kk) as isize - pad.0 as isize;
                    if pos >= 0 && (pos as usize) < l {
                        s += w[(oc * c + ic) * k + kk] * x[ic * l + pos as usize];
                    }
                }
            }
            y[oc * lout + t] = s;
        }
    }
    (y, lout)
}

pub fn cross_entropy(logits: &[f64], k: usize, targets: &[u32], weights: &[f64]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            weights[r] * (lse - row[t as usize])
        })
        .sum()
}

fn coder(
    p: &Params,
    prefix: &str,
    x: &[f64],
    cin: usize,
    cout: usize,
    l: usize,
    cfg: &RvqConfig,
    causal: bool,
) -> Vec<f64> {
    let k = cfg.kernel;
    let pad = if causal {
        (k - 1, 0)
    } else {
        ((k - 1) / 2, k - 1 - (k - 1) / 2)
    };
    let hd = cfg.hidden;
    let conv = |x: &[f64], name: &str, ci: usize, co: usize, kk: usize, pad| {
        conv1d(
            x,
            ci,
            l,
            &p[&format!("{prefix}.{name}.w")],
            co,
            kk,
            &p[&format!("{prefix}.{name}.b")],
            pad,
            1,
        )
        .0
    };
    let mut h: Vec<f64> = conv(x, "in", cin, hd, k, pad)
        .into_iter()
        .map(gelu)
        .collect();
    for i in 0..cfg.res_blocks {
        let a: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        let a: Vec<f64> = conv(&a, &format!("res{i}.c1"), hd, hd, k, pad)
            .into_iter()
            .map(gelu)
            .collect();
        let a = conv(&a, &format!("res{i}.c2"), hd, hd, 1, (0, 0));
        h.iter_mut().zip(a).for_each(|(h, a)| *h += a);
    }
    conv(&h, "out", hd, cout, k, pad)
}

/// Encoder output for a channels-first batch `[b, D, l]`, as `[b, d, l]`.
pub fn rvq_encode(p: &Params, cfg: &RvqConfig, x: &[f64], b: usize, l: usize) -> Vec<f64> {
    let n = cfg.input_dim * l;
    (0..b)
        .flat_map(|i| {
            coder(
                p,
                "enc",
                &x[i * n..(i + 1) * n],
                cfg.input_dim,
                cfg.code_dim,
                l,
                cfg,
                false,
            )
        })
        .collect()
}

pub fn rvq_decode(p: &Params, cfg: &RvqConfig, z: &[f64], b: usize, l: usize) -> Vec<f64> {
    let n = cfg.code_dim * l;
    (0..b)
        .flat_map(|i| {
            coder(
                p,
                "dec",
                &z[i * n..(i + 1) * n],
                cfg.code_dim,
                cfg.input_dim,
                l,
                cfg,
                cfg.decoder_causal,
            )
        })
        .collect()
}

pub fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Per-layer logits `[inputs.n + 1, K]` of the hierarchical transformer.
pub fn hct_logits(
    p: &Params,
    cfg: &HctConfig,
    text_raw: &[f32],
    inputs: &TokenGrid,
) -> Vec<Vec<f64>> {
    let dm = cfg.d_model;
    let n = inputs.n;
    let pre = cfg.prefix_len();
    let len = pre + n;
    let pv = linear(
        &to_f64(text_raw),
        1,
        &p["text.w"],
        cfg.text_dim,
        dm,
        Some(&p["text.b"]),
    );
    let dists = len.min(cfg.max_rel + 1);
    let rel = to_f64(&relative_table(cfg.max_rel, dm)[..dists * dm]);
    let tok = &p["tok_emb"];
    let le = &p["layer_emb"];
    let mut out = Vec::new();
    for v in 0..cfg.num_layers {
        let q = &le[v * dm..(v + 1) * dm];
        let mut x: Vec<f64> = if cfg.pnq {
            pv.iter().zip(q).map(|(a, b)| a + b).collect()
        } else {
            pv.iter().chain(q).cloned().collect()
        };
        for j in 0..n {
            let mut cum = vec![0.0; dm];
            for u in 0..=v {
                let id = inputs.get(j, u) as usize;
                cum.iter_mut()
                    .zip(&tok[id * dm..(id + 1) * dm])
                    .for_each(|(c, e)| *c += e);
            }
            x.extend(cum);
        }
        let heads = cfg.heads[v];
        let hd = dm / heads;
        let aw = heads * hd;
        for i in 0..cfg.depths[v] {
            let g = |s: &str| &p[&format!("l{v}.b{i}.{s}")];
            let h = layer_norm(&x, dm, g("ln1.g"), g("ln1.b"));
            let qm = linear(&h, len, g("wq"), dm, aw, None);
            let km = linear(&h, len, g("wk"), dm, aw, None);
            let vm = linear(&h, len, g("wv"), dm, aw, None);
            let rk = linear(&rel, dists, g("wkr"), dm, aw, None);
            let (u, vb) = (g("u"), g("vb"));
            let mut merged = vec![0.0; len * aw];
            for hh in 0..heads {
                let off = hh * hd;
                let mut scores = vec![0.0; len * len];
                for a in 0..len {
                    for b in 0..=a {
                        let d = (a - b).min(dists - 1);
                        let mut s = 0.0;
                        for e in 0..hd {
                            let qa = qm[a * aw + off + e];
                            s += (qa + u[off + e]) * km[b * aw + off + e];
                            s += (qa + vb[off + e]) * rk[d * aw + off + e];
                        }
                        scores[a * len + b] = s / (hd as f64).sqrt();
                    }
                }
                let probs = softmax(&scores, len, Some((len, 0)));
                for a in 0..len {
                    for b in 0..=a {
                        for e in 0..hd {
                            merged[a * aw + off + e] += probs[a * len + b] * vm[b * aw + off + e];
                        }
                    }
                }
            }
            let o = linear(&merged, len, g("wo"), aw, dm, Some(g("bo")));
            x.iter_mut().zip(o).for_each(|(x, o)| *x += o);
            let h2 = layer_norm(&x, dm, g("ln2.g"), g("ln2.b"));
            let ff = dm * cfg.ffn_mult;
            let f: Vec<f64> = linear(&h2, len, g("ff1.w"), dm, ff, Some(g("ff1.b")))
                .into_iter()
                .map(gelu)
                .collect();
            let f = linear(&f, len, g("ff2.w"), ff, dm, Some(g("ff2.b")));
            x.iter_mut().zip(f).for_each(|(x, f)| *x += f);
        }
        let h = &x[(pre - 1) * dm..];
        let h = layer_norm(
            h,
            dm,
            &p[&format!("l{v}.lnf.g")],
            &p[&format!("l{v}.lnf.b")],
        );
        out.push(linear(
            &h,
            n + 1,
            &p[&format!("l{v}.head.w")],
            dm,
            cfg.codebook_size,
            Some(&p[&format!("l{v}.head.b")]),
        ));
    }
    out
}

/// Clean teacher-forced loss: next-token cross-entropy summed over
/// positions and layers, averaged over the batch.
pub fn hct_loss(p: &Params, cfg: &HctConfig, batch: &[(TokenGrid, Vec<f32>)]) -> f64 {
    let k = cfg.codebook_size;
    let mut total = 0.0;
    for (grid, text) in batch {
        let logits = hct_logits(p, cfg, text, &grid.prefix(grid.n - 1));
        for (v, lg) in logits.iter().enumerate() {
            let t: Vec<u32> = (0..grid.n).map(|j| grid.get(j, v)).collect();
            total += cross_entropy(lg, k, &t, &vec![1.0; grid.n]);
        }
    }
    total / batch.len() as f64
}
