use super::reference::{self as r, Params};
use super::{check_hct, check_op, check_params, check_rvq, named_grads, rel_err, tensor, Check, H};
use mogo_core::hct::{HctConfig, HctModel};
use mogo_core::rng;
use mogo_core::rvq::{QuantizerPath, RvqConfig, RvqVae, TokenGrid};
use mogo_core::{ConvSpec, ParamStore, Tape, Tensor};
use rand::Rng as _;

const TOL: f64 = 1e-3;

pub fn assert_check(name: &str, c: Check) {
    assert!(
        c.forward < 1e-5,
        "{name}: forward disagrees with reference by {:.2e}",
        c.forward
    );
    assert!(
        c.grad < TOL,
        "{name}: max relative gradient error {:.2e} over {} coords",
        c.grad,
        c.coords
    );
}

pub fn zip2(x: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x[0].iter().zip(&x[1]).map(|(&a, &b)| f(a, b)).collect()
}

pub fn elementwise_ops() {
    let a = tensor(&[3, 4], 1);
    let b = tensor(&[3, 4], 2);
    let ab = [a.clone(), b.clone()];
    assert_check(
        "add",
        check_op(&ab, &|t, v| t.add(v[0], v[1]), &|x| zip2(x, |a, b| a + b)),
    );
    assert_check(
        "sub",
        check_op(&ab, &|t, v| t.sub(v[0], v[1]), &|x| zip2(x, |a, b| a - b)),
    );
    assert_check(
        "mul",
        check_op(&ab, &|t, v| t.mul(v[0], v[1]), &|x| zip2(x, |a, b| a * b)),
    );
    assert_check(
        "scale",
        check_op(&[a.clone()], &|t, v| t.scale(v[0], -1.7), &|x| {
            x[0].iter().map(|a| a * -1.7f32 as f64).collect()
        }),
    );
    assert_check(
        "gelu",
        check_op(&[a.clone()], &|t, v| t.gelu(v[0]), &|x| {
            x[0].iter().map(|&a| r::gelu(a)).collect()
        }),
    );
    assert_check(
        "add_row",
        check_op(&[a, tensor(&[4], 3)], &|t, v| t.add_row(v[0], v[1]), &|x| {
            x[0].iter()
                .enumerate()
                .map(|(i, a)| a + x[1][i % 4])
                .collect()
        }),
    );
}

pub fn reductions_and_losses() {
    let a = tensor(&[2, 5], 4);
    let b = tensor(&[2, 5], 5);
    assert_check(
        "sum",
        check_op(&[a.clone()], &|t, v| t.sum(v[0]), &|x| {
            vec![x[0].iter().sum()]
        }),
    );
    assert_check(
        "mean",
        check_op(&[a.clone()], &|t, v| t.mean(v[0]), &|x| {
            vec![x[0].iter().sum::<f64>() / 10.0]
        }),
    );
    assert_check(
        "mse_mean",
        check_op(
            &[a.clone(), b.clone()],
            &|t, v| t.mse_mean(v[0], v[1]),
            &|x| vec![zip2(x, |a, b| (a - b) * (a - b)).iter().sum::<f64>() / 10.0],
        ),
    );
    // every |a - b| stays well away from the kink at zero
    let shifted = Tensor::new(&[2, 5], a.data().iter().map(|x| x + 3.0).collect()).unwrap();
    assert_check(
        "l1_mean",
        check_op(&[shifted, b], &|t, v| t.l1_mean(v[0], v[1]), &|x| {
            vec![r::l1_mean(&x[0], &x[1])]
        }),
    );
    let targets = [0u32, 5, 2, 3];
    let weights = [1.0f32, 0.5, 0.0, 2.0];
    assert_check(
        "cross_entropy",
        check_op(
            &[tensor(&[4, 6], 6)],
            &|t, v| t.cross_entropy(v[0], &targets, &weights),
            &|x| {
                vec![r::cross_entropy(
                    &x[0],
                    6,
                    &targets,
                    &weights.map(|w| w as f64),
                )]
            },
        ),
    );
}

pub fn bmm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    (0..batch)
        .flat_map(|i| {
            r::matmul(
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            )
        })
        .collect()
}

pub fn transpose_last(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
            }
        }
    }
    out
}

pub fn matrix_products() {
    assert_check(
        "matmul",
        check_op(
            &[tensor(&[3, 4], 7), tensor(&[4, 2], 8)],
            &|t, v| t.matmul(v[0], v[1]),
            &|x| r::matmul(&x[0], &x[1], 3, 4, 2),
        ),
    );
    assert_check(
        "matmul batched",
        check_op(
            &[tensor(&[2, 3, 4], 9), tensor(&[2, 4, 2], 10)],
            &|t, v| t.matmul(v[0], v[1]),
            &|x| bmm(&x[0], &x[1], 2, 3, 4, 2),
        ),
    );
    assert_check(
        "matmul_nt",
        check_op(
            &[tensor(&[2, 3, 4], 11), tensor(&[2, 5, 4], 12)],
            &|t, v| t.matmul_nt(v[0], v[1]),
            &|x| bmm(&x[0], &transpose_last(&x[1], 2, 5, 4), 2, 3, 4, 5),
        ),
    );
    assert_check(
        "linear",
        check_op(
            &[tensor(&[3, 4], 13), tensor(&[4, 5], 14), tensor(&[5], 15)],
            &|t, v| t.linear(v[0], v[1], Some(v[2])),
            &|x| r::linear(&x[0], 3, &x[1], 4, 5, Some(&x[2])),
        ),
    );
    assert_check(
        "transpose",
        check_op(&[tensor(&[2, 3, 4], 16)], &|t, v| t.transpose(v[0]), &|x| {
            transpose_last(&x[0], 2, 3, 4)
        }),
    );
}

pub fn normalization_and_attention_pieces() {
    assert_check(
        "layer_norm",
        check_op(
            &[tensor(&[3, 6], 17), tensor(&[6], 18), tensor(&[6], 19)],
            &|t, v| t.layer_norm(v[0], v[1], v[2]),
            &|x| r::layer_norm(&x[0], 6, &x[1], &x[2]),
        ),
    );
    assert_check(
        "softmax",
        check_op(
            &[tensor(&[2, 3, 4], 20)],
            &|t, v| t.softmax(v[0], None),
            &|x| r::softmax(&x[0], 4, None),
        ),
    );
    assert_check(
        "softmax causal",
        check_op(
            &[tensor(&[2, 3, 4], 21)],
            &|t, v| t.softmax(v[0], Some(1)),
            &|x| r::softmax(&x[0], 4, Some((3, 1))),
        ),
    );
    // [L=3, H*hd=6] -> [H=2, L, hd=3]
    let split = |x: &[f64]| -> Vec<f64> {
        let mut o = vec![0.0; 18];
        for l in 0..3 {
            for h in 0..2 {
                for e in 0..3 {
                    o[(h * 3 + l) * 3 + e] = x[l * 6 + h * 3 + e];
                }
            }
        }
        o
    };
    assert_check(
        "split_heads",
        check_op(
            &[tensor(&[3, 6], 22)],
            &|t, v| t.split_heads(v[0], 2),
            &move |x| split(&x[0]),
        ),
    );
    assert_check(
        "merge_heads",
        check_op(
            &[tensor(&[2, 3, 3], 23)],
            &|t, v| t.merge_heads(v[0]),
            &|x| {
                let mut o = vec![0.0; 18];
                for h in 0..2 {
                    for l in 0..3 {
                        for e in 0..3 {
                            o[l * 6 + h * 3 + e] = x[0][(h * 3 + l) * 3 + e];
                        }
                    }
                }
                o
            },
        ),
    );
    // x [H=2, q=3, D=5], offset 1, kv_len 4
    assert_check(
        "rel_shift",
        check_op(
            &[tensor(&[2, 3, 5], 24)],
            &|t, v| t.rel_shift(v[0], 1, 4),
            &|x| {
                let mut o = vec![0.0; 2 * 3 * 4];
                for h in 0..2 {
                    for i in 0..3 {
                        for j in 0..=(i + 1).min(3) {
                            o[(h * 3 + i) * 4 + j] = x[0][(h * 3 + i) * 5 + (i + 1 - j).min(4)];
                        }
                    }
                }
                o
            },
        ),
    );
}

pub fn structural_ops() {
    assert_check(
        "reshape",
        check_op(
            &[tensor(&[2, 6], 25)],
            &|t, v| t.reshape(v[0], &[3, 4]),
            &|x| x[0].clone(),
        ),
    );
    assert_check(
        "concat_rows",
        check_op(
            &[tensor(&[2, 3], 26), tensor(&[1, 3], 27)],
            &|t, v| t.concat_rows(&[v[0], v[1]]),
            &|x| x[0].iter().chain(&x[1]).cloned().collect(),
        ),
    );
    assert_check(
        "slice_rows",
        check_op(
            &[tensor(&[4, 3], 28)],
            &|t, v| t.slice_rows(v[0], 1, 2),
            &|x| x[0][3..9].to_vec(),
        ),
    );
    let ids = [4u32, 0, 4, 2];
    assert_check(
        "embedding",
        check_op(
            &[tensor(&[5, 3], 29)],
            &|t, v| t.embedding(v[0], &ids),
            &|x| {
                ids.iter()
                    .flat_map(|&i| x[0][i as usize * 3..i as usize * 3 + 3].to_vec())
                    .collect()
            },
        ),
    );
    let mask: Vec<f64> = {
        let mut g = rng::seeded(3);
        (0..20)
            .map(|_| {
                if g.random::<f32>() < 0.3 {
                    0.0
                } else {
                    1.0 / (1.0 - 0.3f32) as f64
                }
            })
            .collect()
    };
    assert!(mask.iter().any(|&m| m == 0.0) && mask.iter().any(|&m| m > 0.0));
    assert_check(
        "dropout",
        check_op(
            &[tensor(&[4, 5], 30)],
            &|t, v| t.dropout(v[0], 0.3, &mut rng::seeded(3)),
            &|x| x[0].iter().zip(&mask).map(|(a, m)| a * m).collect(),
        ),
    );
}

pub fn convolutions() {
    let x = tensor(&[2, 3, 7], 31);
    let w = tensor(&[4, 3, 3], 32);
    let b = tensor(&[4], 33);
    for spec in [
        ConvSpec::same(3),
        ConvSpec::causal(3),
        ConvSpec {
            stride: 2,
            pad_left: 1,
            pad_right: 0,
        },
    ] {
        let c = check_op(
            &[x.clone(), w.clone(), b.clone()],
            &move |t, v| t.conv1d(v[0], v[1], v[2], spec),
            &move |x| {
                (0..2)
                    .flat_map(|i| {
                        r::conv1d(
                            &x[0][i * 21..(i + 1) * 21],
                            3,
                            7,
                            &x[1],
                            4,
                            3,
                            &x[2],
                            (spec.pad_left, spec.pad_right),
                            spec.stride,
                        )
                        .0
                    })
                    .collect()
            },
        );
        assert_check("conv1d", c);
    }
    assert_check(
        "conv1d unbatched",
        check_op(
            &[
                tensor(&[3, 6], 34),
                tensor(&[2, 3, 1], 35),
                tensor(&[2], 36),
            ],
            &|t, v| t.conv1d(v[0], v[1], v[2], ConvSpec::same(1)),
            &|x| r::conv1d(&x[0], 3, 6, &x[1], 2, 1, &x[2], (0, 0), 1).0,
        ),
    );
}

pub fn small_mlp() {
    let mut ps = ParamStore::new();
    let w1 = ps.add("w1", tensor(&[4, 8], 40));
    let b1 = ps.add("b1", tensor(&[8], 41));
    let w2 = ps.add("w2", tensor(&[8, 3], 42));
    let b2 = ps.add("b2", tensor(&[3], 43));
    let x = tensor(&[5, 4], 44);
    let y = tensor(&[5, 3], 45);
    let analytic = {
        let mut t = Tape::with_params(&ps);
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let (a, b, c, d) = (t.param(w1), t.param(b1), t.param(w2), t.param(b2));
        let h = t.linear(xv, a, Some(b)).unwrap();
        let h = t.gelu(h).unwrap();
        let o = t.linear(h, c, Some(d)).unwrap();
        let l = t.mse_mean(o, yv).unwrap();
        named_grads(&ps, &t, l)
    };
    let (xr, yr) = (r::to_f64(x.data()), r::to_f64(y.data()));
    let mut p = r::params_f64(&ps);
    let c = check_params(&mut p, &analytic, 1000, &|_| true, &|p: &Params| {
        let h: Vec<f64> = r::linear(&xr, 5, &p["w1"], 4, 8, Some(&p["b1"]))
            .into_iter()
            .map(r::gelu)
            .collect();
        let o = r::linear(&h, 5, &p["w2"], 8, 3, Some(&p["b2"]));
        o.iter()
            .zip(&yr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / o.len() as f64
    });
    assert_eq!(c.coords, 4 * 8 + 8 + 8 * 3 + 3);
    assert!(c.grad < TOL, "mlp: {:.2e}", c.grad);
}

pub fn toy_rvq(layers: usize) -> RvqVae {
    let cfg = RvqConfig {
        input_dim: 3,
        num_layers: layers,
        codebook_size: 4,
        code_dim: 2,
        hidden: 4,
        res_blocks: 1,
        dropout: 0.0,
        ..RvqConfig::desk(3)
    };
    let mut m = RvqVae::new(cfg).unwrap();
    let mut t = Tape::with_params(&m.params);
    let x = t.constant(tensor(&[3, 6], 50));
    let z = m.encode_on(&mut t, x, None).unwrap();
    let mut rows = vec![0f32; 12];
    for (i, v) in t.value(z).iter().enumerate() {
        rows[(i % 6) * 2 + i / 6] = *v;
    }
    m.codebook.init_from(&rows, &mut rng::seeded(5)).unwrap();
    m
}

pub fn rvq_loss_bypass_path() {
    let m = toy_rvq(2);
    let c = check_rvq(&m, &tensor(&[2, 3, 6], 51), QuantizerPath::Bypass, 8);
    assert!(c.coords > 40);
    assert_check("rvq bypass", c);
}

pub fn rvq_loss_codebook_path_decoder() {
    let m = toy_rvq(3);
    let c = check_rvq(&m, &tensor(&[2, 3, 6], 52), QuantizerPath::Codebook, 8);
    assert!(c.coords > 20);
    assert_check("rvq codebook path", c);
}

pub fn straight_through_matches_decoder_side_difference() {
    let m = toy_rvq(1);
    let x = tensor(&[1, 3, 6], 53);
    let mut t = Tape::with_params(&m.params);
    let xv = t.constant(x.clone());
    let f = m
        .forward_loss(&mut t, xv, QuantizerPath::Codebook, None)
        .unwrap();
    let st = t.backward(f.loss).unwrap().wrt(f.latent).unwrap().to_vec();
    let lat = m.codebook.dequantize(&f.tokens, 0).unwrap();
    let mut q = vec![0f64; 12];
    for i in 0..6 {
        for e in 0..2 {
            q[e * 6 + i] = lat.values[i * 2 + e] as f64;
        }
    }
    let p = r::params_f64(&m.params);
    let xr = r::to_f64(x.data());
    let loss_at = |q: &[f64]| r::l1_mean(&r::rvq_decode(&p, &m.cfg, q, 1, 6), &xr);
    let mut worst = 0f64;
    for k in 0..q.len() {
        let mut pq = q.clone();
        pq[k] += H as f64;
        let up = loss_at(&pq);
        pq[k] -= 2.0 * H as f64;
        let dn = loss_at(&pq);
        worst = worst.max(rel_err(st[k] as f64, (up - dn) / (2.0 * H as f64)));
    }
    assert!(worst < 1e-2, "straight-through: {worst:.2e}");
}

pub fn toy_hct(pnq: bool) -> HctModel {
    let cfg = HctConfig {
        d_model: 8,
        num_layers: 2,
        heads: vec![2, 1],
        depths: vec![2, 1],
        codebook_size: 5,
        text_dim: 4,
        max_rel: 8,
        pnq,
        ..HctConfig::desk()
    };
    let mut m = HctModel::new(cfg).unwrap();
    // Spread the weights so attention is far from uniform and every
    // parameter receives a gradient well above the error floor.
    let mut g = rng::seeded(11);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng::normal(&mut g);
        }
    }
    m
}

pub fn hct_loss_all_parameters() {
    for pnq in [true, false] {
        let m = toy_hct(pnq);
        let text = m.embed_text("a figure sways").unwrap();
        let g = TokenGrid::new(4, 2, vec![1, 2, 3, 4, 0, 1, 2, 3]).unwrap();
        let c = check_hct(&m, &[(g, text)], 6);
        assert!(c.coords > 100);
        assert_check("hct", c);
    }
}
