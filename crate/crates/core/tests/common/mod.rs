//! Finite-difference gradient oracles shared by the test targets. Central
//! differences are taken of independent f64 forward passes (`reference`),
//! so rounding in the f32 engine does not pollute the numeric side.
#![allow(dead_code)]

pub mod attention;
pub mod gradients;
pub mod metrics;
pub mod quantizer;
pub mod reference;
pub mod sampling;

use std::collections::BTreeMap;

use mogo_core::hct::HctModel;
use mogo_core::rvq::{QuantizerPath, RvqVae, TokenGrid};
use mogo_core::{ParamStore, Result, Tape, Tensor, Var};
use reference::Params;

pub const H: f32 = 1e-3;
/// Gradients smaller than this (in absolute value) are compared against
/// this floor rather than their own magnitude.
pub const FLOOR: f64 = 1e-4;

/// Elementwise relative error with a small absolute floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Deterministic, sign-varying projection weights.
pub fn probe(n: usize, salt: u32) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = (i as u32)
                .wrapping_mul(2654435761)
                .wrapping_add(salt.wrapping_mul(40503))
                >> 8;
            (x % 2001) as f32 / 1000.0 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], salt: u32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, probe(n, salt)).unwrap()
}

pub type OpFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;
pub type RefFn<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

/// Result of one oracle comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct Check {
    /// Max relative error between autodiff and central differences.
    pub grad: f64,
    /// Max relative error between the engine's forward and the reference.
    pub forward: f64,
    pub coords: usize,
}

fn fwd_err(engine: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(engine.len(), reference.len(), "forward length");
    engine
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks `op` through the projection `sum(w * op(x))` with fixed weights:
/// autodiff on the tape against central differences of `reference`.
pub fn check_op(inputs: &[Tensor], op: &OpFn<'_>, reference: &RefFn<'_>) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars).unwrap();
    let xs: Vec<Vec<f64>> = inputs.iter().map(|t| reference::to_f64(t.data())).collect();
    let base = reference(&xs);
    let forward = fwd_err(tape.value(out), &base);
    let w = probe(base.len(), 7);
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(Tensor::new(&shape, w.clone()).unwrap());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let project = |xs: &[Vec<f64>]| -> f64 {
        reference(xs)
            .iter()
            .zip(&w)
            .map(|(a, &b)| a * b as f64)
            .sum()
    };
    let mut c = Check {
        forward,
        ..Check::default()
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        for k in 0..x.numel() {
            let mut p = xs.clone();
            p[i][k] += H as f64;
            let up = project(&p);
            p[i][k] -= 2.0 * H as f64;
            let dn = project(&p);
            c.grad = c
                .grad
                .max(rel_err(analytic[k] as f64, (up - dn) / (2.0 * H as f64)));
            c.coords += 1;
        }
    }
    c
}

/// Named analytic parameter gradients from a reverse pass.
pub fn named_grads(store: &ParamStore, tape: &Tape, loss: Var) -> BTreeMap<String, Vec<f32>> {
    tape.backward(loss)
        .unwrap()
        .param_grads()
        .map(|(id, g)| (store.name(id).to_string(), g.to_vec()))
        .collect()
}

/// Central differences on `params` (at most `per_tensor` evenly spaced
/// coordinates of every selected tensor) of the f64 loss `eval`.
pub fn check_params(
    params: &mut Params,
    analytic: &BTreeMap<String, Vec<f32>>,
    per_tensor: usize,
    select: &dyn Fn(&str) -> bool,
    eval: &dyn Fn(&Params) -> f64,
) -> Check {
    let mut c = Check::default();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        if !select(&name) {
            continue;
        }
        let n = params[&name].len();
        let zeros = vec![0.0; n];
        let g = analytic.get(&name).unwrap_or(&zeros);
        let stride = (n / per_tensor).max(1);
        for k in (0..n).step_by(stride).take(per_tensor) {
            let orig = params[&name][k];
            params.get_mut(&name).unwrap()[k] = orig + H as f64;
            let up = eval(params);
            params.get_mut(&name).unwrap()[k] = orig - H as f64;
            let dn = eval(params);
            params.get_mut(&name).unwrap()[k] = orig;
            c.grad = c
                .grad
                .max(rel_err(g[k] as f64, (up - dn) / (2.0 * H as f64)));
            c.coords += 1;
        }
    }
    c
}

/// Clean transformer loss: autodiff against the f64 reference.
pub fn check_hct(model: &HctModel, batch: &[(TokenGrid, Vec<f32>)], per_tensor: usize) -> Check {
    let mut tape = Tape::with_params(&model.params);
    let loss = model.loss_on(&mut tape, batch, None).unwrap();
    let engine = tape.scalar_value(loss).unwrap();
    let analytic = named_grads(&model.params, &tape, loss);
    let mut p = reference::params_f64(&model.params);
    let cfg = model.cfg.clone();
    let base = reference::hct_loss(&p, &cfg, batch);
    let mut c = check_params(&mut p, &analytic, per_tensor, &|_| true, &|p| {
        reference::hct_loss(p, &cfg, batch)
    });
    c.forward = (engine as f64 - base).abs() / base.abs().max(1.0);
    c
}

/// Tokenizer loss through `path`, batch `x` of shape `[b, D, l]`. With the
/// codebook path only decoder parameters are compared: the encoder gradient
/// there is the straight-through estimate, which has no finite-difference
/// counterpart, and the commitment terms do not depend on the decoder.
pub fn check_rvq(model: &RvqVae, x: &Tensor, path: QuantizerPath, per_tensor: usize) -> Check {
    let (b, l) = (x.shape()[0], x.shape()[2]);
    let cfg = model.cfg.clone();
    let mut tape = Tape::with_params(&model.params);
    let xv = tape.constant(x.clone());
    let f = model.forward_loss(&mut tape, xv, path, None).unwrap();
    let engine_recon = tape.value(f.recon).to_vec();
    let analytic = named_grads(&model.params, &tape, f.loss);
    let xr = reference::to_f64(x.data());
    let mut p = reference::params_f64(&model.params);
    let (select, quantized): (&dyn Fn(&str) -> bool, Option<Vec<f64>>) = match path {
        QuantizerPath::Bypass => (&|_| true, None),
        QuantizerPath::Codebook => {
            let lat = model
                .codebook
                .dequantize(&f.tokens, cfg.num_layers - 1)
                .unwrap();
            let d = cfg.code_dim;
            let mut q = vec![0.0; b * d * l];
            for bi in 0..b {
                for t in 0..l {
                    for e in 0..d {
                        q[(bi * d + e) * l + t] = lat.values[(bi * l + t) * d + e] as f64;
                    }
                }
            }
            (&|n: &str| n.starts_with("dec."), Some(q))
        }
    };
    let recon = |p: &Params| match &quantized {
        Some(q) => reference::rvq_decode(p, &cfg, q, b, l),
        None => reference::rvq_decode(p, &cfg, &reference::rvq_encode(p, &cfg, &xr, b, l), b, l),
    };
    let forward = fwd_err(&engine_recon, &recon(&p));
    let mut c = check_params(&mut p, &analytic, per_tensor, select, &|p| {
        reference::l1_mean(&recon(p), &xr)
    });
    c.forward = forward;
    c
}

/// Random transformer with every parameter pushed off its initialisation by
/// `spread`-scaled normal noise, so logits and attention are far from flat.
pub fn spread_hct(cfg: mogo_core::hct::HctConfig, seed: u64, spread: f32) -> HctModel {
    let mut m = HctModel::new(cfg).unwrap();
    let mut g = mogo_core::rng::seeded(seed);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += spread * mogo_core::rng::normal(&mut g);
        }
    }
    m
}
