#![allow(dead_code)]

pub mod oracles;

use region_embed::tensor::{ParamStore, Tape, Var};
use region_embed::Result;

/// Central finite differences against the tape's analytic gradient.
///
/// Returns the worst per-parameter relative error
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
pub fn gradcheck<F>(store: &ParamStore, h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    gradcheck_sampled(store, h, usize::MAX, f)
}

/// Like [`gradcheck`] but perturbs at most `per_param` evenly spaced entries
/// of each parameter.
pub fn gradcheck_sampled<F>(store: &ParamStore, h: f64, per_param: usize, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    gradcheck_errors(store, h, per_param, f).0
}

/// Relative error over the concatenated gradient of every parameter.
///
/// Per-parameter errors are ill-conditioned for tensors whose true gradient
/// is zero (finite-difference noise over a vanishing norm); this one is not.
pub fn gradcheck_global<F>(store: &ParamStore, h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    gradcheck_errors(store, h, usize::MAX, f).1
}

fn gradcheck_errors<F>(store: &ParamStore, h: f64, per_param: usize, f: F) -> (f64, f64)
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, store).expect("forward");
        tape.backward(loss).expect("backward");
        analytic.accumulate_grads(&tape);
    }
    let eval = |s: &ParamStore| {
        let tape = Tape::new();
        f(&tape, s).expect("forward").item()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let (mut g_diff, mut g_na, mut g_nn) = (0.0, 0.0, 0.0);
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(per_param.min(n)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let grad = analytic.get(id).grad.as_ref().unwrap();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &k in &idx {
            let x0 = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x0 + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = x0 - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = x0;
            let num = (up - down) / (2.0 * h);
            diff += (grad[k] - num).powi(2);
            na += grad[k] * grad[k];
            nn += num * num;
        }
        let denom = f64::sqrt(na).max(f64::sqrt(nn));
        let rel = if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom };
        worst = worst.max(rel);
        g_diff += diff;
        g_na += na;
        g_nn += nn;
    }
    let denom = f64::sqrt(g_na).max(f64::sqrt(g_nn));
    (worst, if denom < 1e-12 { g_diff.sqrt() } else { g_diff.sqrt() / denom })
}

pub fn uniform_store(
    shapes: &[(&str, usize, usize)],
    lo: f64,
    hi: f64,
    seed: u64,
) -> ParamStore {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        let t = region_embed::tensor::Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi));
        store.add(name, t);
    }
    store
}

/// Random `n`-region instance with every graph present: random trips for AC,
/// a ring adjacency for VC and random functionality vectors for FC.
pub fn random_inputs(n: usize, k: usize, seed: u64) -> region_embed::training::ModelInputs {
    use rand::{Rng, SeedableRng};
    use region_embed::correlation::*;
    use region_embed::ingest::{AdjacencySet, TripRecord};
    use region_embed::tensor::Tensor;
    use region_embed::training::{GraphInput, ModelInputs};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let trips: Vec<TripRecord> = (0..4 * n)
        .map(|_| TripRecord {
            origin: rng.random_range(0..n),
            destination: rng.random_range(0..n),
            count: rng.random_range(1..4),
        })
        .collect();
    let counts = cooccurrence_counts(&trips, n);
    let ac = accessibility_correlation(&od_distributions(&counts), 0.5).unwrap();
    let mut adj = AdjacencySet::new(n);
    for i in 0..n {
        adj.insert(i, (i + 1) % n);
    }
    let vc = vicinity_correlation(&adj);
    let kg = ndarray::Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0));
    let fc = functionality_correlation(&kg);
    let t = |m: &ndarray::Array2<f64>| Tensor::from_array(m).unwrap();
    ModelInputs {
        n,
        ac: Some(GraphInput {
            graph: knn_graph(&ac, k).unwrap(),
            target: Tensor::from_fn(n, n, |i, j| counts.0[[i, j]] as f64),
        }),
        vc: Some(GraphInput {
            graph: knn_graph(&vc, k).unwrap(),
            target: t(&vc.values),
        }),
        fc: Some(GraphInput {
            graph: knn_graph(&fc, k).unwrap(),
            target: t(&fc.values),
        }),
        kg_vectors: Some(t(&kg)),
    }
}

/// A small configuration that keeps every architectural piece.
pub fn small_training_config() -> region_embed::training::TrainingConfig {
    region_embed::training::TrainingConfig {
        epochs: 20,
        dim: 8,
        gat_heads: 2,
        fusion_heads: 2,
        ffn_width: 12,
        ..Default::default()
    }
}
