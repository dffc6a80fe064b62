//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcrgen::model::{batch_loss, loss_and_grad, EncodedPair, ModelConfig, ModelParams};
use tcrgen::params::Parameters;
use tcrgen::physchem::DescriptorTable;

pub const RESIDUES: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

pub fn random_residues(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| RESIDUES[rng.gen_range(0..20)] as char).collect()
}

/// Plain recursive edit distance, no memoization.
pub fn levenshtein_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ar)), Some((y, br))) => {
            let sub = levenshtein_oracle(ar, br) + usize::from(x != y);
            let del = levenshtein_oracle(ar, b) + 1;
            let ins = levenshtein_oracle(a, br) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Plain recursive LCS length.
pub fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) | (_, None) => 0,
        (Some((x, ar)), Some((y, br))) => {
            if x == y {
                1 + lcs_oracle(ar, br)
            } else {
                lcs_oracle(ar, b).max(lcs_oracle(a, br))
            }
        }
    }
}

/// Worst gradient discrepancy against central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<(String, usize, f64, f64)>,
    pub worst_rel: f64,
    pub tensors: usize,
}

/// Compares every analytic gradient component with a central difference of
/// step `h`. A component passes when `|a - n| <= abs_floor` or the relative
/// error `|a - n| / max(|a|, |n|)` is at most `rel_tol`.
pub fn gradient_check(
    params: &ModelParams,
    batch: &[EncodedPair],
    table: &DescriptorTable,
    eps: f64,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheck {
    let (_, grads) = loss_and_grad(batch, params, table, eps).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        grads.named_tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let mut work = params.clone();
    let mut out = GradCheck { checked: 0, failures: vec![], worst_rel: 0.0, tensors: analytic.len() };
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let orig = tensor_value(&work, ti, k);
            set_tensor_value(&mut work, ti, k, orig + h);
            let up = batch_loss(batch, &work, table, eps).unwrap();
            set_tensor_value(&mut work, ti, k, orig - h);
            let down = batch_loss(batch, &work, table, eps).unwrap();
            set_tensor_value(&mut work, ti, k, orig);
            let numeric = (up - down) / (2.0 * h);
            let diff = (a[k] - numeric).abs();
            let rel = diff / a[k].abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            out.checked += 1;
            if diff > abs_floor {
                out.worst_rel = out.worst_rel.max(rel);
                if rel > rel_tol {
                    out.failures.push((name.clone(), k, a[k], numeric));
                }
            }
        }
    }
    out
}

fn tensor_value(p: &ModelParams, ti: usize, k: usize) -> f64 {
    p.named_tensors()[ti].1.data[k]
}

fn set_tensor_value(p: &mut ModelParams, ti: usize, k: usize, v: f64) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == ti {
            t.data[k] = v;
        }
        i += 1;
    });
}

/// Replaces every parameter with a draw that exercises the nonlinearities:
/// weights N(0, std²), LayerNorm scales around 1.
pub fn randomize(p: &mut ModelParams, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("", &mut |name, t| {
        let centre = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for x in t.data.iter_mut() {
            *x = centre + std * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7;
        }
    });
}

pub fn grad_check_config(phys: bool) -> ModelConfig {
    ModelConfig {
        d_tok: 8,
        d_phys: 4,
        d_pos: 4,
        n_head: 1,
        n_enc: 2,
        n_dec: 2,
        phys_enabled: phys,
        seed: 5,
        ..ModelConfig::default()
    }
}
