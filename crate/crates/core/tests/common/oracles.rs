//! Slow, obviously-correct reference implementations.

use lorawhisper::expansion::MoeGate;
use lorawhisper::lora::{AttachmentSite, Component, LoraAdapter, Matrix};
use lorawhisper::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows());
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.data_mut()[i * b.cols() + j] = s;
        }
    }
    out
}

/// `s · B · A` by explicit loops.
pub fn dense_delta(ad: &LoraAdapter) -> Tensor {
    naive_matmul(&ad.b, &ad.a).scale(ad.scaling)
}

/// `y_i = W x_i + b` row by row.
pub fn dense_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        for o in 0..w.rows() {
            let mut s = b.get(0, o);
            for j in 0..x.cols() {
                s += w.get(o, j) * x.get(i, j);
            }
            y.data_mut()[i * w.rows() + o] = s;
        }
    }
    y
}

pub fn add_scaled(a: &Tensor, b: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + s * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

pub struct Instance {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub new: LoraAdapter,
    pub donor: LoraAdapter,
    pub gate: MoeGate,
}

fn random_adapter(rng: &mut ChaCha8Rng, site: AttachmentSite, rank: usize) -> LoraAdapter {
    LoraAdapter {
        site,
        rank,
        a: random_tensor(rng, rank, site.d_in, 1.0),
        b: random_tensor(rng, site.d_out, rank, 1.0),
        scaling: rng.random_range(0.25..2.0),
    }
}

/// A random linear site with two adapters of random rank and a random gate.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d_out = rng.random_range(2..10);
    let d_in = rng.random_range(2..10);
    let site = AttachmentSite { layer: 0, component: Component::EncSelf, matrix: Matrix::Q, d_out, d_in };
    let max_rank = d_out.min(d_in) - 1;
    let rows = rng.random_range(1..5);
    Instance {
        x: random_tensor(rng, rows, d_in, 1.0),
        w: random_tensor(rng, d_out, d_in, 1.0),
        b: random_tensor(rng, 1, d_out, 1.0),
        new: {
            let r = rng.random_range(1..=max_rank);
            random_adapter(rng, site, r)
        },
        donor: {
            let r = rng.random_range(1..=max_rank);
            random_adapter(rng, site, r)
        },
        gate: MoeGate::from_logits(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
    }
}

/// Levenshtein distance by the defining recursion. Exponential; keep inputs short.
pub fn recursive_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = recursive_levenshtein(ra, rb) + usize::from(x != y);
            let del = recursive_levenshtein(ra, b) + 1;
            let ins = recursive_levenshtein(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// `sim_k` by counting, for each language, the segments whose maximum it
/// holds with no lower-indexed language at least as large.
pub fn counting_similarity(profiles: &[Vec<f64>]) -> Vec<f64> {
    let n = profiles[0].len();
    (0..n)
        .map(|k| {
            let wins = profiles
                .iter()
                .filter(|p| (0..n).all(|j| if j < k { p[j] < p[k] } else { p[j] <= p[k] }))
                .count();
            wins as f64 / profiles.len() as f64
        })
        .collect()
}
