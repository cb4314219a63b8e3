use mogo_core::eval::{
    frechet_distance, frechet_from_stats, identity_pool, mean_pairwise_distance, nn_retrieval,
    FeatureExtractor,
};
use mogo_core::linalg::Sym;
use mogo_core::motion::{make_synthetic_dataset, MotionSequence, SynthConfig};
use mogo_core::rng::{self, Rng};
use nalgebra::DMatrix;

pub fn cloud(n: usize, d: usize, shift: f32, g: &mut Rng) -> Vec<Vec<f32>> {
    // correlated columns so the covariances are far from diagonal
    let mix: Vec<f32> = (0..d * d).map(|_| rng::normal(g) * 0.5).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f32> = (0..d).map(|_| rng::normal(g)).collect();
            (0..d)
                .map(|i| shift + z[i] + (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f32>())
                .collect()
        })
        .collect()
}

/// Same distance through a different route: unsymmetrised product Σa·Σb,
/// general (complex) eigenvalues, square roots of their real parts.
pub fn frechet_general(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let stats = |x: &[Vec<f32>]| {
        let (n, d) = (x.len(), x[0].len());
        let m = DMatrix::from_fn(n, d, |i, j| x[i][j] as f64);
        let mu = m.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
        (mu, c.transpose() * &c / (n as f64 - 1.0))
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let tr_sqrt: f64 = (&ca * &cb)
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.max(0.0).sqrt())
        .sum();
    (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt
}

pub fn agrees_with_general_eigen_route() {
    let mut g = rng::seeded(1);
    for (d, shift) in [(2, 0.0), (4, 0.3), (6, 1.0), (8, -0.5)] {
        let a = cloud(80, d, 0.0, &mut g);
        let b = cloud(70, d, shift, &mut g);
        let ours = frechet_distance(&a, &b).unwrap();
        let theirs = frechet_general(&a, &b);
        assert!(
            (ours - theirs).abs() < 1e-6 * theirs.abs().max(1.0),
            "d={d}: {ours} vs {theirs}"
        );
    }
}

pub fn identical_sets_are_at_zero() {
    let mut g = rng::seeded(2);
    let a = cloud(50, 5, 0.2, &mut g);
    assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
}

pub fn translated_set_costs_squared_shift() {
    let mut g = rng::seeded(3);
    let a = cloud(60, 4, 0.0, &mut g);
    let shift = [0.5f32, -1.0, 2.0, 0.25];
    let b: Vec<Vec<f32>> = a
        .iter()
        .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
        .collect();
    let want: f64 = shift.iter().map(|&s| (s as f64).powi(2)).sum();
    let got = frechet_distance(&a, &b).unwrap();
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
}

/// Population statistics: N(0, S) against N(mu, S) costs exactly |mu|^2,
/// for the identity and for a dense shared covariance.
pub fn population_shift_costs_squared_norm() {
    let mut g = rng::seeded(9);
    for d in [1, 3, 8, 24] {
        let m: Vec<f64> = (0..d * d).map(|_| rng::normal(&mut g) as f64).collect();
        let mut dense = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                dense[i * d + j] = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum::<f64>()
                    + if i == j { 0.5 } else { 0.0 };
            }
        }
        for cov in [Sym::identity(d), Sym::new(d, dense.clone()).unwrap()] {
            let mu: Vec<f64> = (0..d).map(|_| 2.0 * rng::normal(&mut g) as f64).collect();
            let want: f64 = mu.iter().map(|x| x * x).sum();
            let got = frechet_from_stats(&vec![0.0; d], &cov, &mu, &cov).unwrap();
            assert!((got - want).abs() < 1e-6, "d={d}: {got} vs {want}");
        }
    }
}

pub fn too_few_samples_or_mixed_widths_fail() {
    let one = vec![vec![1.0f32, 2.0]];
    assert!(frechet_distance(&one, &one).is_err());
    let mixed = vec![vec![1.0f32, 2.0], vec![1.0]];
    assert!(frechet_distance(&mixed, &mixed).is_err());
}

pub fn shuffle_channels(seq: &MotionSequence, perm: &[usize]) -> MotionSequence {
    let d = seq.dim();
    let data: Vec<f32> = (0..seq.frames())
        .flat_map(|t| perm.iter().map(move |&c| seq.frame(t)[c]))
        .collect();
    debug_assert_eq!(data.len(), seq.frames() * d);
    MotionSequence::new(seq.frames(), d, seq.fps(), data).unwrap()
}

pub fn separates_shuffled_channels_from_resampled_halves() {
    let ds = make_synthetic_dataset(&SynthConfig {
        count: 240,
        ..SynthConfig::default()
    })
    .unwrap();
    let seqs: Vec<&MotionSequence> = ds.items.iter().map(|i| &i.motion).collect();
    let (a, b) = seqs.split_at(seqs.len() / 2);
    let d = seqs[0].dim();
    let perm: Vec<usize> = (0..d).rev().collect();
    let fa: Vec<Vec<f32>> = a.iter().map(|s| identity_pool(s)).collect();
    let fb: Vec<Vec<f32>> = b.iter().map(|s| identity_pool(s)).collect();
    let fs: Vec<Vec<f32>> = b
        .iter()
        .map(|s| identity_pool(&shuffle_channels(s, &perm)))
        .collect();
    let same = frechet_distance(&fa, &fb).unwrap();
    let shuffled = frechet_distance(&fa, &fs).unwrap();
    assert!(shuffled >= 5.0 * same, "halves {same}, shuffled {shuffled}");
}

pub fn pairwise_distance_of_known_points() {
    let pts = vec![vec![0.0f32, 0.0], vec![3.0, 4.0], vec![0.0, 4.0]];
    let (m, pairs) = mean_pairwise_distance(&pts);
    assert_eq!(pairs, 3);
    assert!((m - 4.0).abs() < 1e-12);
    assert_eq!(mean_pairwise_distance(&pts[..1]), (0.0, 0));
}

pub fn retrieval_counts_same_label_neighbours() {
    let f = vec![vec![0.0f32], vec![0.1], vec![5.0], vec![5.2], vec![9.0]];
    let labels = ['a', 'a', 'b', 'b', 'a'];
    // the last point's neighbour (5.2) carries the other label
    assert!((nn_retrieval(&f, &labels) - 0.8).abs() < 1e-12);
}

pub fn extractor_rejects_mixed_widths() {
    let a = MotionSequence::new(3, 4, 20.0, vec![0.0; 12]).unwrap();
    let b = MotionSequence::new(3, 5, 20.0, vec![0.0; 15]).unwrap();
    assert!(FeatureExtractor::IdentityPool.extract_all(&[a, b]).is_err());
    assert!(FeatureExtractor::IdentityPool.extract_all(&[]).is_err());
}
