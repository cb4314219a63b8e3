use super::spread_hct;
use mogo_core::generate::{greedy_by_recomputation, GenRequest, Generator, NoClock, Policy};
use mogo_core::hct::{HctConfig, HctModel};
use mogo_core::motion::NormStats;
use mogo_core::rng;
use mogo_core::rvq::{RvqConfig, RvqVae, TokenGrid};
use mogo_core::{Tape, Tensor};
use rand::Rng as _;

/// One block, one head, d_model 2.
pub fn tiny() -> HctModel {
    let cfg = HctConfig {
        d_model: 2,
        num_layers: 1,
        heads: vec![1],
        depths: vec![1],
        codebook_size: 3,
        text_dim: 2,
        max_rel: 8,
        ..HctConfig::desk()
    };
    HctModel::new(cfg).unwrap()
}

pub struct Weights {
    wq: [f32; 4],
    wk: [f32; 4],
    wkr: [f32; 4],
    u: [f32; 2],
    vb: [f32; 2],
}

const FULL: Weights = Weights {
    wq: [0.7, -0.3, 0.2, 1.1],
    wk: [-0.5, 0.9, 1.3, 0.4],
    wkr: [0.6, 0.25, -0.8, 0.45],
    u: [0.35, -0.6],
    vb: [-0.15, 0.8],
};

pub fn row_times(x: &[f32], w: &[f32; 4]) -> [f64; 2] {
    let x = [x[0] as f64, x[1] as f64];
    [
        x[0] * w[0] as f64 + x[1] * w[2] as f64,
        x[0] * w[1] as f64 + x[1] * w[3] as f64,
    ]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Raw scores from the model, `[L, L]`, lower triangle meaningful.
pub fn model_scores(w: &Weights, h: &[f32], rel: &[f32], len: usize) -> Vec<f32> {
    let mut m = tiny();
    let p = &mut m.params;
    p.set_data("l0.b0.wq", &[2, 2], w.wq.to_vec()).unwrap();
    p.set_data("l0.b0.wk", &[2, 2], w.wk.to_vec()).unwrap();
    p.set_data("l0.b0.wkr", &[2, 2], w.wkr.to_vec()).unwrap();
    p.set_data("l0.b0.u", &[1, 2], w.u.to_vec()).unwrap();
    p.set_data("l0.b0.vb", &[1, 2], w.vb.to_vec()).unwrap();
    let mut tape = Tape::with_params(&m.params);
    let hv = tape.constant(Tensor::new(&[len, 2], h.to_vec()).unwrap());
    let rv = tape.constant(Tensor::new(&[len, 2], rel.to_vec()).unwrap());
    let (s, _) = m.attention_scores(&mut tape, hv, rv, 1, (0, 0)).unwrap();
    tape.value(s).to_vec()
}

/// The four score terms for query `i`, key `j`, written out by hand:
/// content-content, content-position, global content bias, global
/// position bias.
pub fn terms(w: &Weights, h: &[f32], rel: &[f32], i: usize, j: usize) -> [f64; 4] {
    let q = row_times(&h[2 * i..2 * i + 2], &w.wq);
    let k = row_times(&h[2 * j..2 * j + 2], &w.wk);
    let r = row_times(&rel[2 * (i - j)..2 * (i - j) + 2], &w.wkr);
    let u = [w.u[0] as f64, w.u[1] as f64];
    let vb = [w.vb[0] as f64, w.vb[1] as f64];
    [dot(q, k), dot(q, r), dot(u, k), dot(vb, r)]
}

pub fn inputs(len: usize, salt: u32) -> (Vec<f32>, Vec<f32>) {
    (
        super::probe(2 * len, salt),
        super::probe(2 * len, salt + 100),
    )
}

pub fn four_terms_sum() {
    for len in 2..=4 {
        let (h, rel) = inputs(len, len as u32);
        let s = model_scores(&FULL, &h, &rel, len);
        for i in 0..len {
            for j in 0..=i {
                let want: f64 = terms(&FULL, &h, &rel, i, j).iter().sum();
                assert!(
                    (s[i * len + j] as f64 - want).abs() < 1e-6,
                    "len {len} ({i},{j})"
                );
            }
        }
    }
}

pub fn each_term_in_isolation() {
    let z4 = [0.0; 4];
    let z2 = [0.0; 2];
    let only: [Weights; 4] = [
        Weights {
            wkr: z4,
            u: z2,
            vb: z2,
            ..FULL
        },
        Weights {
            wk: z4,
            u: z2,
            vb: z2,
            ..FULL
        },
        Weights {
            wq: z4,
            wkr: z4,
            vb: z2,
            ..FULL
        },
        Weights {
            wq: z4,
            wk: z4,
            u: z2,
            ..FULL
        },
    ];
    for len in 2..=4 {
        let (h, rel) = inputs(len, 10 + len as u32);
        for (t, w) in only.iter().enumerate() {
            let s = model_scores(w, &h, &rel, len);
            let mut nonzero = false;
            for i in 0..len {
                for j in 0..=i {
                    let all = terms(&FULL, &h, &rel, i, j);
                    assert!(
                        (s[i * len + j] as f64 - all[t]).abs() < 1e-6,
                        "term {t} len {len} ({i},{j})"
                    );
                    nonzero |= all[t].abs() > 1e-3;
                }
            }
            assert!(nonzero, "term {t} is vacuous at len {len}");
        }
    }
}

pub fn without_position_terms_scores_are_content_only() {
    let w = Weights {
        wkr: [0.0; 4],
        u: [0.0; 2],
        ..FULL
    };
    let len = 4;
    let (h, rel) = inputs(len, 30);
    let s = model_scores(&w, &h, &rel, len);
    for i in 0..len {
        for j in 0..=i {
            let q = row_times(&h[2 * i..2 * i + 2], &w.wq);
            let k = row_times(&h[2 * j..2 * j + 2], &w.wk);
            assert!((s[i * len + j] as f64 - dot(q, k)).abs() < 1e-6);
        }
    }
}

pub fn small_cfg(pnq: bool, seed: u64) -> HctConfig {
    HctConfig {
        d_model: 8,
        num_layers: 3,
        heads: vec![2, 1, 2],
        depths: vec![2, 1, 1],
        codebook_size: 6,
        text_dim: 8,
        max_rel: 16,
        pnq,
        seed,
        ..HctConfig::desk()
    }
}

pub fn random_grid(n: usize, layers: usize, k: u32, g: &mut mogo_core::rng::Rng) -> TokenGrid {
    TokenGrid::new(
        n,
        layers,
        (0..n * layers).map(|_| g.random_range(0..k)).collect(),
    )
    .unwrap()
}

/// Changing input tokens at position `p` or later, or in layer `u` or
/// above, leaves logits for positions `<= p` and for layers `< u`
/// bit-identical.
pub fn causal_in_time_and_depth() {
    let mut g = rng::seeded(40);
    let mut moved = (0, 0);
    for case in 0..50 {
        let m = spread_hct(small_cfg(case % 2 == 0, case), 100 + case, 0.3);
        let text = m.embed_text("a figure turns left").unwrap();
        let n = g.random_range(2..8usize);
        let grid = random_grid(n, 3, 6, &mut g);
        let base = m.logits(&text, &grid).unwrap();

        let p = g.random_range(0..n);
        let mut later = grid.clone();
        for j in p..n {
            for v in 0..3 {
                later.ids[j * 3 + v] = (grid.get(j, v) + 1 + g.random_range(0..5u32)) % 6;
            }
        }
        let lt = m.logits(&text, &later).unwrap();
        for v in 0..3 {
            let (a, b) = (base[v].data(), lt[v].data());
            assert_eq!(
                &a[..(p + 1) * 6],
                &b[..(p + 1) * 6],
                "case {case} layer {v} p {p}"
            );
            if a[(p + 1) * 6..] != b[(p + 1) * 6..] {
                moved.0 += 1;
            }
        }

        let u = g.random_range(1..3usize);
        let mut upper = grid.clone();
        for j in 0..n {
            for v in u..3 {
                upper.ids[j * 3 + v] = (grid.get(j, v) + 1) % 6;
            }
        }
        let up = m.logits(&text, &upper).unwrap();
        for v in 0..u {
            assert_eq!(
                base[v].data(),
                up[v].data(),
                "case {case} layer {v} below {u}"
            );
        }
        if (u..3).any(|v| base[v].data() != up[v].data()) {
            moved.1 += 1;
        }
    }
    // the perturbations do reach the positions and layers allowed to see them
    assert!(moved.0 > 50 && moved.1 > 40, "{moved:?}");
}

pub fn stream_matches_full_recomputation() {
    let hct = spread_hct(small_cfg(true, 7), 77, 0.5);
    let rcfg = RvqConfig {
        num_layers: 3,
        codebook_size: 6,
        code_dim: 4,
        hidden: 8,
        res_blocks: 1,
        ..RvqConfig::desk(5)
    };
    let rvq = RvqVae::new(rcfg).unwrap();
    let stats = NormStats::identity(5);
    let gen = Generator::new(&hct, &rvq, &stats, 20.0).unwrap();
    let verbs = ["walks", "jumps", "spins", "waves", "kicks"];
    let dirs = ["forward", "left", "right", "back"];
    let mut distinct = std::collections::BTreeSet::new();
    for r in 0..20 {
        let text = format!("a person {} {} slowly", verbs[r % 5], dirs[r / 5]);
        let req = GenRequest {
            text: text.clone(),
            target_frames: 12,
            policy: Policy::Greedy,
            seed: r as u64,
        };
        let (tokens, timings, warnings) = gen.tokens(&req, &NoClock).unwrap();
        let full = greedy_by_recomputation(&hct, &text, 12).unwrap();
        assert_eq!(tokens, full, "request {r}");
        assert_eq!(timings.len(), 36);
        assert!(warnings.is_empty());
        distinct.insert(tokens.ids);
    }
    assert!(distinct.len() > 1, "all prompts produced the same tokens");
}

pub fn long_requests_warn_about_clamped_distances() {
    let hct = spread_hct(small_cfg(false, 3), 5, 0.3);
    let rcfg = RvqConfig {
        num_layers: 3,
        codebook_size: 6,
        code_dim: 4,
        hidden: 8,
        res_blocks: 1,
        ..RvqConfig::desk(5)
    };
    let rvq = RvqVae::new(rcfg).unwrap();
    let stats = NormStats::identity(5);
    let gen = Generator::new(&hct, &rvq, &stats, 20.0).unwrap();
    let req = GenRequest {
        text: "a person walks".into(),
        target_frames: 20,
        policy: Policy::Greedy,
        seed: 0,
    };
    let (tokens, _, warnings) = gen.tokens(&req, &NoClock).unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(
        tokens,
        greedy_by_recomputation(&hct, "a person walks", 20).unwrap()
    );
}
