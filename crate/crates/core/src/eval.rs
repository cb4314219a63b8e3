//! Reconstruction metrics, Fréchet distance and MultiModality.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::generate::Policy;
use crate::linalg::{self, Sym};
use crate::motion::MotionSequence;
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::rng;
use crate::rvq::RvqVae;
use crate::tape::Tape;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Eigenvalue clamp tolerance, relative to `max(1, max|λ|)`.
pub const EIG_TOL: f64 = 1e-6;

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_cov(feats: &[Vec<f32>]) -> Result<(Vec<f64>, Sym)> {
    if feats.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples, got {}",
            feats.len()
        )));
    }
    let d = feats[0].len();
    if let Some(bad) = feats.iter().find(|f| f.len() != d) {
        return Err(Error::shape("features", &[bad.len()], &[d]));
    }
    let n = feats.len() as f64;
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, &x) in mu.iter_mut().zip(f) {
            *m += x as f64;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut c = vec![0.0; d * d];
    for f in feats {
        for i in 0..d {
            let di = f[i] as f64 - mu[i];
            for j in 0..d {
                c[i * d + j] += di * (f[j] as f64 - mu[j]);
            }
        }
    }
    c.iter_mut().for_each(|x| *x /= n - 1.0);
    Ok((mu, Sym::new(d, c)?))
}

/// `||μa − μb||² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`. The trace of the square
/// root is taken from the eigenvalues of the symmetric `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_from_stats(mu_a: &[f64], cov_a: &Sym, mu_b: &[f64], cov_b: &Sym) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.n != d || cov_b.n != d {
        return Err(Error::shape(
            "frechet",
            &[d, cov_a.n],
            &[mu_b.len(), cov_b.n],
        ));
    }
    let dm: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let sa = linalg::sqrt_psd(cov_a, EIG_TOL)?;
    let prod = sa.matmul(cov_b).matmul(&sa).symmetrized();
    let (vals, _) = linalg::eigh(&prod);
    let tr_sqrt: f64 = linalg::clamp_roots(&vals, EIG_TOL)?.iter().sum();
    let fid = dm + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

pub fn frechet_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

/// Per-channel mean, population std and mean absolute first difference.
pub fn identity_pool(seq: &MotionSequence) -> Vec<f32> {
    let (n, d) = (seq.frames(), seq.dim());
    let x = seq.data();
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    let mut diff = vec![0f64; d];
    for t in 0..n {
        for c in 0..d {
            let v = x[t * d + c] as f64;
            mean[c] += v;
            sq[c] += v * v;
            if t > 0 {
                diff[c] += (v - x[(t - 1) * d + c] as f64).abs();
            }
        }
    }
    let mut out = Vec::with_capacity(3 * d);
    let nf = n as f64;
    out.extend(mean.iter().map(|m| (m / nf) as f32));
    out.extend((0..d).map(|c| {
        let m = mean[c] / nf;
        libm::sqrt((sq[c] / nf - m * m).max(0.0)) as f32
    }));
    out.extend(
        diff.iter()
            .map(|s| if n > 1 { (s / (nf - 1.0)) as f32 } else { 0.0 }),
    );
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bottleneck: 16,
            steps: 1500,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Small MLP autoencoder over standardized pooled features; the bottleneck
/// activations are the feature vector.
#[derive(Clone, Debug)]
pub struct MotionAutoencoder {
    pub cfg: AutoencoderConfig,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
    pub params: ParamStore,
    ids: [ParamId; 8],
}

impl MotionAutoencoder {
    const NAMES: [&'static str; 8] = [
        "enc1.w", "enc1.b", "enc2.w", "enc2.b", "dec1.w", "dec1.b", "dec2.w", "dec2.b",
    ];

    fn init(cfg: AutoencoderConfig, dim: usize) -> Self {
        let mut r = rng::fork(cfg.seed, 0xae);
        let shapes = [
            vec![dim, cfg.hidden],
            vec![cfg.hidden],
            vec![cfg.hidden, cfg.bottleneck],
            vec![cfg.bottleneck],
            vec![cfg.bottleneck, cfg.hidden],
            vec![cfg.hidden],
            vec![cfg.hidden, dim],
            vec![dim],
        ];
        let mut params = ParamStore::new();
        let ids = core::array::from_fn(|i| {
            let s = &shapes[i];
            let n: usize = s.iter().product();
            let data = if s.len() == 2 {
                let g = libm::sqrtf(1.0 / s[0] as f32);
                (0..n).map(|_| g * rng::normal(&mut r)).collect()
            } else {
                vec![0.0; n]
            };
            params.add(Self::NAMES[i], Tensor::new(s, data).expect("sized"))
        });
        Self {
            cfg,
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            params,
            ids,
        }
    }

    /// Full-batch training on the pooled features of `seqs`.
    pub fn train(seqs: &[MotionSequence], cfg: AutoencoderConfig) -> Result<Self> {
        if seqs.len() < 2 {
            return Err(Error::invalid(
                "autoencoder needs at least 2 training sequences",
            ));
        }
        let pooled: Vec<Vec<f32>> = seqs.iter().map(identity_pool).collect();
        let dim = pooled[0].len();
        let mut m = Self::init(cfg, dim);
        let n = pooled.len() as f32;
        // centred per feature, one shared scale: per-feature scaling would
        // inflate near-constant noise features
        let mut total = 0.0f32;
        for c in 0..dim {
            let mu = pooled.iter().map(|p| p[c]).sum::<f32>() / n;
            total += pooled
                .iter()
                .map(|p| (p[c] - mu) * (p[c] - mu))
                .sum::<f32>()
                / n;
            m.input_mean[c] = mu;
        }
        let sd = libm::sqrtf(total / dim as f32);
        m.input_std = vec![if sd < 1e-6 { 1.0 } else { sd }; dim];
        let x: Vec<f32> = pooled.iter().flat_map(|p| m.standardize(p)).collect();
        let x = Tensor::new(&[pooled.len(), dim], x)?;
        let sched = CosineSchedule::new(cfg.lr, cfg.lr * 0.1, cfg.steps as u64)?;
        let mut opt = AdamW::new(AdamWConfig::default(), &m.params);
        for step in 0..cfg.steps {
            m.params.zero_grad();
            let grads = {
                let mut tape = Tape::with_params(&m.params);
                let xin = tape.constant(x.clone());
                let z = m.encode_on(&mut tape, xin)?;
                let y = m.decode_on(&mut tape, z)?;
                let loss = tape.mse_mean(y, xin)?;
                tape.backward(loss)?
            };
            m.params.accumulate(&grads)?;
            m.params.clip_grad_norm(1.0);
            opt.step(&mut m.params, sched.lr(step as u64))?;
        }
        Ok(m)
    }

    fn standardize(&self, p: &[f32]) -> Vec<f32> {
        p.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    fn encode_on(&self, tape: &mut Tape, x: crate::Var) -> Result<crate::Var> {
        let p: [crate::Var; 4] = core::array::from_fn(|i| tape.param(self.ids[i]));
        let h = tape.linear(x, p[0], Some(p[1]))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p[2], Some(p[3]))
    }

    fn decode_on(&self, tape: &mut Tape, z: crate::Var) -> Result<crate::Var> {
        let p: [crate::Var; 4] = core::array::from_fn(|i| tape.param(self.ids[4 + i]));
        let h = tape.linear(z, p[0], Some(p[1]))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p[2], Some(p[3]))
    }

    pub fn features(&self, seq: &MotionSequence) -> Result<Vec<f32>> {
        let p = identity_pool(seq);
        if p.len() != self.input_mean.len() {
            return Err(Error::shape(
                "autoencoder input",
                &[p.len()],
                &[self.input_mean.len()],
            ));
        }
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(Tensor::new(&[1, p.len()], self.standardize(&p))?);
        let z = self.encode_on(&mut tape, x)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let d = self.input_mean.len();
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.into(), t.clone()))
            .collect();
        out.push((
            "input.mean".into(),
            Tensor::new(&[d], self.input_mean.clone()).expect("sized"),
        ));
        out.push((
            "input.std".into(),
            Tensor::new(&[d], self.input_std.clone()).expect("sized"),
        ));
        out
    }

    pub fn from_tensors(cfg: AutoencoderConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("autoencoder checkpoint lacks {name}")))
        };
        let mean = get("input.mean")?.data().to_vec();
        let mut m = Self::init(cfg, mean.len());
        m.input_std = get("input.std")?.data().to_vec();
        m.input_mean = mean;
        for name in Self::NAMES {
            let t = get(name)?;
            m.params.set_data(name, t.shape(), t.data().to_vec())?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    IdentityPool,
    Trained(MotionAutoencoder),
}

impl FeatureExtractor {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureExtractor::IdentityPool => "identity-pool",
            FeatureExtractor::Trained(_) => "trained-encoder",
        }
    }

    pub fn extract(&self, seq: &MotionSequence) -> Result<Vec<f32>> {
        match self {
            FeatureExtractor::IdentityPool => Ok(identity_pool(seq)),
            FeatureExtractor::Trained(m) => m.features(seq),
        }
    }

    pub fn extract_all(&self, seqs: &[MotionSequence]) -> Result<Vec<Vec<f32>>> {
        if seqs.is_empty() {
            return Err(Error::invalid("no sequences to extract features from"));
        }
        let d = seqs[0].dim();
        if let Some(s) = seqs.iter().find(|s| s.dim() != d) {
            return Err(Error::shape("extract_features", &[s.dim()], &[d]));
        }
        seqs.iter().map(|s| self.extract(s)).collect()
    }
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    libm::sqrt(
        a.iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64) * ((x - y) as f64))
            .sum(),
    )
}

/// Mean pairwise Euclidean distance and the number of pairs.
pub fn mean_pairwise_distance(feats: &[Vec<f32>]) -> (f64, usize) {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            total += euclid(&feats[i], &feats[j]);
            pairs += 1;
        }
    }
    (
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        },
        pairs,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct MModality {
    pub value: f64,
    pub prompts: usize,
    pub repeats: usize,
    pub pairs_per_prompt: usize,
}

/// For each prompt, `generate(prompt, repeat)` is called `repeats` times;
/// the score averages the per-prompt mean pairwise feature distance.
pub fn mmodality(
    prompts: &[String],
    repeats: usize,
    policy: Policy,
    extractor: &FeatureExtractor,
    generate: &mut dyn FnMut(&str, usize) -> Result<MotionSequence>,
) -> Result<MModality> {
    if !policy.is_stochastic() {
        return Err(Error::invalid(
            "multimodality needs a stochastic policy; greedy decoding has no diversity",
        ));
    }
    if repeats < 2 {
        return Err(Error::invalid(format!(
            "repeats must be >= 2, got {repeats}"
        )));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let mut sum = 0.0;
    let mut pairs_per_prompt = 0;
    for p in prompts {
        let seqs = (0..repeats)
            .map(|r| generate(p, r))
            .collect::<Result<Vec<_>>>()?;
        let (d, pairs) = mean_pairwise_distance(&extractor.extract_all(&seqs)?);
        sum += d;
        pairs_per_prompt = pairs;
    }
    Ok(MModality {
        value: sum / prompts.len() as f64,
        prompts: prompts.len(),
        repeats,
        pairs_per_prompt,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub l1: f64,
    pub mse: f64,
    pub fid: Option<f64>,
    pub sequences: usize,
    pub frames: usize,
}

/// L1 and MSE (per element, averaged over all frames) between `seqs` and
/// their reconstructions, plus identity-pool FID when there are at least
/// two sequences.
pub fn reconstruction_report(
    tokenizer: &RvqVae,
    seqs: &[MotionSequence],
    up_to_layer: usize,
) -> Result<ReconReport> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty split"));
    }
    let recon = seqs
        .iter()
        .map(|s| tokenizer.reconstruct(s, up_to_layer))
        .collect::<Result<Vec<_>>>()?;
    recon_metrics(seqs, &recon)
}

pub fn recon_metrics(orig: &[MotionSequence], recon: &[MotionSequence]) -> Result<ReconReport> {
    if orig.is_empty() || orig.len() != recon.len() {
        return Err(Error::shape("recon_metrics", &[orig.len()], &[recon.len()]));
    }
    let (mut l1, mut mse, mut count, mut frames) = (0.0f64, 0.0f64, 0usize, 0usize);
    for (a, b) in orig.iter().zip(recon) {
        if a.frames() != b.frames() || a.dim() != b.dim() {
            return Err(Error::shape(
                "reconstruction",
                &[b.frames(), b.dim()],
                &[a.frames(), a.dim()],
            ));
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            let e = (*x as f64) - (*y as f64);
            l1 += e.abs();
            mse += e * e;
        }
        count += a.data().len();
        frames += a.frames();
    }
    let fid = if orig.len() >= 2 {
        let fx = FeatureExtractor::IdentityPool;
        Some(frechet_distance(
            &fx.extract_all(orig)?,
            &fx.extract_all(recon)?,
        )?)
    } else {
        None
    };
    Ok(ReconReport {
        l1: l1 / count as f64,
        mse: mse / count as f64,
        fid,
        sequences: orig.len(),
        frames,
    })
}

/// Top-1 nearest-neighbour agreement: fraction of rows whose closest other
/// row carries the same label.
pub fn nn_retrieval<L: PartialEq>(feats: &[Vec<f32>], labels: &[L]) -> f64 {
    let n = feats.len();
    if n < 2 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let best = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    euclid(&feats[i], &feats[a]).total_cmp(&euclid(&feats[i], &feats[b]))
                })
                .expect("n >= 2");
            labels[best] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

/// Evaluation summary; absent metrics were not requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub recon_l1: Option<f64>,
    pub recon_mse: Option<f64>,
    pub recon_fid: Option<f64>,
    pub gen_fid: Option<f64>,
    pub mmodality: Option<f64>,
    pub extractor: String,
    pub counts: Vec<(String, usize)>,
}
