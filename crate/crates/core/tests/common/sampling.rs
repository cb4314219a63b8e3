use mogo_core::generate::{sample_token, Policy};
use mogo_core::hct::corrupt_tokens;
use mogo_core::rng;
use mogo_core::rvq::TokenGrid;

pub fn huge_temperature_is_uniform_over_the_top_k() {
    let logits = [3.0f32, -1.0, 0.5, 2.0, 9.0, -4.0, 1.5, 0.0];
    let k = 5;
    let draws = 10_000;
    let mut g = rng::seeded(1);
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        counts[sample_token(
            &logits,
            Policy::TopK {
                k,
                temperature: 1e6,
            },
            &mut g,
        )
        .unwrap() as usize] += 1;
    }
    // the three smallest logits (-1, -4, 0) are outside the top five
    assert_eq!(counts[1] + counts[5] + counts[7], 0);
    let p = 1.0 / k as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for &i in &[0, 2, 3, 4, 6] {
        let dev = (counts[i] as f64 - draws as f64 * p).abs();
        assert!(
            dev <= 3.0 * sigma,
            "token {i}: {} draws, {dev} from expectation",
            counts[i]
        );
    }
}

pub fn unit_temperature_follows_softmax() {
    let logits = [1.0f32, 0.0, 2.0];
    let z: f64 = logits.iter().map(|&l| (l as f64).exp()).sum();
    let draws = 20_000;
    let mut g = rng::seeded(2);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[sample_token(
            &logits,
            Policy::TopK {
                k: 3,
                temperature: 1.0,
            },
            &mut g,
        )
        .unwrap() as usize] += 1;
    }
    for i in 0..3 {
        let p = (logits[i] as f64).exp() / z;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (counts[i] as f64 - draws as f64 * p).abs() <= 4.0 * sigma,
            "{counts:?}"
        );
    }
}

pub fn tiny_temperature_is_greedy() {
    let mut g = rng::seeded(3);
    for _ in 0..200 {
        assert_eq!(
            sample_token(
                &[0.1, 0.3, 0.2],
                Policy::TopK {
                    k: 3,
                    temperature: 1e-3
                },
                &mut g
            )
            .unwrap(),
            1
        );
    }
}

pub fn equal_seeds_draw_equal_tokens() {
    let logits: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
    let pol = Policy::TopK {
        k: 6,
        temperature: 0.8,
    };
    let run = |seed| {
        let mut g = rng::seeded(seed);
        (0..100)
            .map(|_| sample_token(&logits, pol, &mut g).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

pub fn grid(n: usize, layers: usize) -> TokenGrid {
    TokenGrid::new(n, layers, (0..n * layers).map(|i| (i % 7) as u32).collect()).unwrap()
}

pub fn half_corruption_rate() {
    let g0 = grid(2500, 4);
    let (out, mask) = corrupt_tokens(&g0, 0.5, 7, &mut rng::seeded(4));
    let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    assert_eq!(mask.len(), 10_000);
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    for ((a, b), m) in g0.ids.iter().zip(&out.ids).zip(&mask) {
        assert!(*b < 7);
        if !m {
            assert_eq!(a, b);
        }
    }
}

pub fn zero_and_full_corruption_are_exact() {
    let g0 = grid(2500, 4);
    let (out, mask) = corrupt_tokens(&g0, 0.0, 7, &mut rng::seeded(5));
    assert_eq!(out, g0);
    assert!(mask.iter().all(|m| !m));
    let (out, mask) = corrupt_tokens(&g0, 1.0, 7, &mut rng::seeded(5));
    assert!(mask.iter().all(|&m| m));
    // replacements are uniform, so about 1/7 coincide with the original
    let kept = g0.ids.iter().zip(&out.ids).filter(|(a, b)| a == b).count() as f64 / 10_000.0;
    assert!((kept - 1.0 / 7.0).abs() < 0.02, "{kept}");
}
