use mogo_core::rng::{self, Rng};
use mogo_core::rvq::{Codebook, LatentSequence, RvqConfig};

pub fn random_codebook(layers: usize, k: usize, d: usize, g: &mut Rng) -> Codebook {
    let tables = (0..layers)
        .map(|v| {
            let scale = 0.6f32.powi(v as i32);
            (0..k * d).map(|_| scale * rng::normal(g)).collect()
        })
        .collect();
    Codebook::from_codes(k, d, tables).unwrap()
}

pub fn random_latents(n: usize, d: usize, g: &mut Rng) -> LatentSequence {
    LatentSequence::new(n, d, (0..n * d).map(|_| 1.5 * rng::normal(g)).collect()).unwrap()
}

/// Sum of every layer's code plus the final residual reproduces each latent
/// coordinate exactly.
pub fn identity_holds(cb: &Codebook, lat: &LatentSequence) -> bool {
    let (_, stack) = cb.residual_quantize(lat).unwrap();
    let layers = cb.num_layers();
    lat.values.iter().enumerate().all(|(i, &z)| {
        let mut sum = 0f64;
        for v in 0..layers {
            sum += stack.quantized[v][i];
        }
        sum += stack.residuals[layers][i];
        sum == z as f64
    })
}

pub fn code_sum_plus_residual_is_exact() {
    let mut g = rng::seeded(1);
    for layers in 1..=6 {
        let cb = random_codebook(layers, 64, 8, &mut g);
        let lat = random_latents(1000, 8, &mut g);
        assert!(identity_holds(&cb, &lat), "{layers} layers");
    }
}

pub fn identity_at_configured_shapes() {
    let mut g = rng::seeded(2);
    for cfg in [RvqConfig::desk(16), RvqConfig::paper(263)] {
        let cb = random_codebook(cfg.num_layers, cfg.codebook_size, cfg.code_dim, &mut g);
        let lat = random_latents(1000, cfg.code_dim, &mut g);
        assert!(
            identity_holds(&cb, &lat),
            "{} layers, K={}",
            cfg.num_layers,
            cfg.codebook_size
        );
    }
}

/// Greedy residual search written directly: exhaustive distance to every
/// code, strict improvement keeps the lowest index.
pub fn brute_force(tables: &[Vec<f32>], k: usize, d: usize, z: &[f32]) -> Vec<u32> {
    let mut r: Vec<f64> = z.iter().map(|&x| x as f64).collect();
    let mut out = Vec::new();
    for t in tables {
        let dists: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|e| (r[e] - t[j * d + e] as f64).powi(2)).sum())
            .collect();
        let best = (0..k).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
        for e in 0..d {
            r[e] -= t[best * d + e] as f64;
        }
        out.push(best as u32);
    }
    out
}

pub fn matches_exhaustive_search() {
    let mut g = rng::seeded(3);
    for k in [2, 5, 16] {
        let (layers, d) = (3, 4);
        let cb = random_codebook(layers, k, d, &mut g);
        let tables: Vec<Vec<f32>> = cb.layers.iter().map(|l| l.codes.clone()).collect();
        let lat = random_latents(1000, d, &mut g);
        let (grid, _) = cb.residual_quantize(&lat).unwrap();
        for i in 0..1000 {
            assert_eq!(
                grid.position(i),
                brute_force(&tables, k, d, lat.row(i)).as_slice(),
                "K={k} row {i}"
            );
        }
    }
}

pub fn ties_go_to_lowest_index() {
    let codes = vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0];
    let cb = Codebook::from_codes(3, 2, vec![codes]).unwrap();
    // equidistant from codes 0, 1 and 2 (code 2 duplicates code 0)
    let lat = LatentSequence::new(1, 2, vec![0.0, 0.0]).unwrap();
    assert_eq!(cb.residual_quantize(&lat).unwrap().0.ids, vec![0]);
}

pub fn dequantize_matches_stack() {
    let mut g = rng::seeded(4);
    let cb = random_codebook(4, 16, 6, &mut g);
    let lat = random_latents(50, 6, &mut g);
    let (grid, stack) = cb.residual_quantize(&lat).unwrap();
    for up in 0..4 {
        let deq = cb.dequantize(&grid, up).unwrap();
        for (i, &x) in deq.values.iter().enumerate() {
            let s: f64 = (0..=up).map(|v| stack.quantized[v][i]).sum();
            assert_eq!(x, s as f32);
        }
    }
    assert!(cb.dequantize(&grid, 4).is_err());
}
