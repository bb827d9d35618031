#![allow(dead_code)]

use std::collections::BTreeMap;

use horizon_core::corpus::Modality;
use horizon_core::trainer::{EdgeSample, EmbeddingStore, Gradients, MaskSample};
use horizon_core::trainer::{edge_loss, mask_loss};
use horizon_core::{Curvature, EdgeType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL: f64 = 1e-4;

pub fn hier() -> EdgeType {
    EdgeType::Hier(Modality::Dx)
}

pub fn cross() -> EdgeType {
    EdgeType::Cross {
        src: Modality::Dx,
        dst: Modality::Med,
        delta: 1,
    }
}

pub fn toy_store(n: usize, dim: usize, c: f64, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = 0.8 / c.sqrt();
    let points = (0..n)
        .map(|i| {
            let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = rng.random_range(0.05..limit);
            p.iter_mut().for_each(|x| *x *= r / norm);
            (format!("n{i:02}"), p)
        })
        .collect();
    let gamma = BTreeMap::from([(hier(), 0.7), (cross(), 1.3)]);
    EmbeddingStore::from_points(points, gamma, Curvature::new(c).unwrap()).unwrap()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL * analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn check<F: Fn(&EmbeddingStore) -> (f64, Gradients)>(store: &EmbeddingStore, loss: F) {
    let (_, g) = loss(store);
    let id = |i: usize| store.ids()[i].clone();
    for i in 0..store.len() {
        for k in 0..store.dim() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut p = store.point(i).to_vec();
            p[k] += H;
            plus.set_point(&id(i), &p).unwrap();
            p[k] -= 2.0 * H;
            minus.set_point(&id(i), &p).unwrap();
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * H);
            let analytic = g.point(i)[k];
            assert!(close(analytic, numeric), "point {i}[{k}]: {analytic} vs {numeric}");
        }
    }
    for t in [hier(), cross()] {
        let base = store.gamma(t).unwrap();
        let mut plus = store.clone();
        let mut minus = store.clone();
        plus.set_gamma(t, base + H).unwrap();
        minus.set_gamma(t, base - H).unwrap();
        let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * H);
        assert!(close(g.gamma(t), numeric), "gamma {t}: {} vs {numeric}", g.gamma(t));
    }
    let c = store.curvature().get();
    let mut plus = store.clone();
    let mut minus = store.clone();
    plus.set_curvature(Curvature::new(c + H).unwrap());
    minus.set_curvature(Curvature::new(c - H).unwrap());
    let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * H);
    assert!(close(g.curvature(), numeric), "curvature: {} vs {numeric}", g.curvature());
}


pub fn edge_instance() -> Vec<EdgeSample> {
    vec![
        EdgeSample {
            src: 0,
            dst: 1,
            etype: hier(),
            negatives: vec![2, 3, 4],
        },
        EdgeSample {
            src: 5,
            dst: 6,
            etype: cross(),
            negatives: vec![7, 1, 0],
        },
        EdgeSample {
            src: 1,
            dst: 0,
            etype: hier(),
            negatives: vec![6],
        },
    ]
}

pub fn mask_instance() -> MaskSample {
    MaskSample {
        kept: vec![0, 1, 2],
        masked: vec![(3, vec![4, 5, 6]), (7, vec![8, 4])],
    }
}

/// Finite-difference checks of both objectives over a few curvatures.
pub fn check_all_gradients() {
    for (seed, c) in [(1, 1.0), (2, 0.4), (3, 2.5)] {
        let store = toy_store(8, 4, c, seed);
        let samples = edge_instance();
        check(&store, |s| edge_loss(&samples, s));
    }
    for (seed, c, tau) in [(4, 1.0, 1.0), (5, 0.6, 0.5), (6, 1.8, 2.0)] {
        let store = toy_store(9, 3, c, seed);
        let sample = mask_instance();
        check(&store, |s| mask_loss(&sample, s, tau));
    }
}
