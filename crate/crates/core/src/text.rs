//! Deterministic bag-of-words sentence encoder.
//!
//! Tokens are hashed into a seeded Gaussian table, averaged and
//! L2-normalized. The learned projection to the model width lives in the
//! transformer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub seed: u64,
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Strips a plural or verb "s" ("walks" -> "walk", but not "across").
fn stem(word: &str) -> &str {
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        &word[..word.len() - 1]
    } else {
        word
    }
}

/// Lowercase words with surrounding punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .map(|w| String::from(stem(&w)))
        .collect()
}

impl TextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn token_vector(&self, token: &str, out: &mut [f32]) {
        let mut r = rng::fork(self.seed, fnv1a(token.as_bytes()));
        for v in out.iter_mut() {
            *v = rng::normal(&mut r);
        }
    }

    /// Unit-norm sentence vector before the learned projection.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut acc = vec![0f64; self.dim];
        let mut tv = vec![0f32; self.dim];
        for t in &toks {
            self.token_vector(t, &mut tv);
            for (a, &x) in acc.iter_mut().zip(&tv) {
                *a += x as f64;
            }
        }
        let norm = libm::sqrt(acc.iter().map(|a| a * a).sum::<f64>());
        if !(norm > 0.0) {
            return Err(Error::NumericFault(String::from(
                "text embedding has zero norm",
            )));
        }
        Ok(acc.iter().map(|a| (a / norm) as f32).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = libm::sqrt(a.iter().map(|&x| x as f64 * x as f64).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|&x| x as f64 * x as f64).sum::<f64>());
    (dot / (na * nb)) as f32
}
