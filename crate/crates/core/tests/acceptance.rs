//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero on any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use horizon_core::central_event::barycenter;
use horizon_core::corpus::{
    generate_synthetic, load_cohort, Cohort, Modality, PlantedRule, SynthSpec, Visit,
};
use horizon_core::graph::{
    self, assemble_graph, build_graph_with, build_hierarchy_edges, build_vocabulary_with,
    count_lagged, lagged_pmi, ClinicalGraph, GraphConfig, Vocabulary,
};
use horizon_core::manifold::{self, Curvature};
use horizon_core::metrics::{
    ancestor_match, ndcg_at_k, recall_at_k, reciprocal_rank, top_k_accuracy, tree_distance,
};
use horizon_core::pipeline::{self, forecast_cohort, Forecast, InferenceConfig, PipelineConfig};
use horizon_core::rerank::{OracleScorer, RerankConfig, Scorer, ScorerError, ScorerRequest, ScorerResponse};
use horizon_core::retrieval::{cone_direction, geo_score, in_cone, RetrievalConfig};
use horizon_core::trainer::{self, mask_visit, EmbeddingStore, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

// ---------------------------------------------------------------------------
// 1. geometry
// ---------------------------------------------------------------------------

fn random_point(rng: &mut ChaCha8Rng, dim: usize, c: f64, max_frac: f64) -> Vec<f64> {
    let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = p.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let r = rng.random_range(0.0..max_frac) / c.sqrt();
    p.iter_mut().for_each(|x| *x *= r / n);
    p
}

fn arccosh_dist(x: &[f64], y: &[f64], c: f64) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum();
    let ny: f64 = y.iter().map(|a| a * a).sum();
    (1.0 + 2.0 * c * diff / ((1.0 - c * nx) * (1.0 - c * ny))).acosh() / c.sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_geometry() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = 10_000;
    let mut worst = [0.0f64; 4];
    for _ in 0..samples {
        let dim = rng.random_range(2..=16);
        let c_val = rng.random_range(0.1..3.0);
        let c = Curvature::new(c_val).unwrap();
        let x = random_point(&mut rng, dim, c_val, 0.9);
        let y = random_point(&mut rng, dim, c_val, 0.9);
        let z = random_point(&mut rng, dim, c_val, 0.9);
        let dxy = manifold::dist(&x, &y, c).unwrap();
        let dyx = manifold::dist(&y, &x, c).unwrap();
        ensure((dxy - dyx).abs() <= 1e-9, format!("symmetry {dxy} vs {dyx}"))?;
        ensure(manifold::dist(&x, &x, c).unwrap().abs() <= 1e-9, "identity")?;
        let dxz = manifold::dist(&x, &z, c).unwrap();
        let dyz = manifold::dist(&y, &z, c).unwrap();
        ensure(dxz <= dxy + dyz + 1e-9, "triangle inequality")?;
        worst[0] = worst[0].max((dxy - dyx).abs());

        let v = manifold::log0(&x, c).unwrap();
        let back = manifold::exp0(&v, c).unwrap();
        worst[1] = worst[1].max(max_abs_diff(&back, &x));
        ensure(max_abs_diff(&back, &x) <= 1e-9, "exp0(log0(x)) != x")?;
        let t: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t_back = manifold::log0(&manifold::exp0(&t, c).unwrap(), c).unwrap();
        ensure(max_abs_diff(&t_back, &t) <= 1e-9, "log0(exp0(v)) != v")?;

        let zero = vec![0.0; dim];
        let neg_x: Vec<f64> = x.iter().map(|a| -a).collect();
        let id_r = manifold::mobius_add(&x, &zero, c).unwrap();
        let id_l = manifold::mobius_add(&zero, &x, c).unwrap();
        let inv = manifold::mobius_add(&neg_x, &x, c).unwrap();
        let cancel = manifold::mobius_add(&neg_x, &manifold::mobius_add(&x, &y, c).unwrap(), c).unwrap();
        let mob = max_abs_diff(&id_r, &x)
            .max(max_abs_diff(&id_l, &x))
            .max(max_abs_diff(&inv, &zero))
            .max(max_abs_diff(&cancel, &y));
        worst[2] = worst[2].max(mob);
        ensure(mob <= 1e-12, format!("Möbius identity error {mob:e}"))?;

        let oracle = arccosh_dist(&x, &y, c_val);
        worst[3] = worst[3].max((oracle - dxy).abs());
        ensure((oracle - dxy).abs() <= 1e-9, format!("arccosh form {oracle} vs {dxy}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{samples} samples, max errors sym {:.1e} inverse {:.1e} mobius {:.1e} arccosh {:.1e}, {:.2?}",
        worst[0], worst[1], worst[2], worst[3], elapsed
    ))
}

// ---------------------------------------------------------------------------
// 2. gradients
// ---------------------------------------------------------------------------

fn criterion_gradients() -> Check {
    let started = Instant::now();
    common::check_all_gradients();
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("central differences h={:e}, rel tol {:e}, {elapsed:.2?}", common::H, common::REL))
}

// ---------------------------------------------------------------------------
// 3. PMI oracle
// ---------------------------------------------------------------------------

fn brute_force_pmi(cohort: &Cohort, delta: u32) -> BTreeMap<(String, String), f64> {
    let all = |v: &Visit| -> Vec<(Modality, String)> {
        v.all_codes().map(|(m, c)| (m, c.to_owned())).collect()
    };
    let mut n_visits = 0u64;
    let mut marginal: BTreeMap<String, u64> = BTreeMap::new();
    let mut pairs = 0u64;
    let mut joint: BTreeMap<(String, String), u64> = BTreeMap::new();
    for tr in cohort.trajectories() {
        for v in &tr.visits {
            n_visits += 1;
            for (_, c) in all(v) {
                *marginal.entry(c).or_default() += 1;
            }
        }
        let d = delta as usize;
        for t in 0..tr.visits.len() {
            if t + d >= tr.visits.len() {
                continue;
            }
            pairs += 1;
            for (ma, a) in all(&tr.visits[t]) {
                for (mb, b) in all(&tr.visits[t + d]) {
                    if ma != mb {
                        *joint.entry((a.clone(), b)).or_default() += 1;
                    }
                }
            }
        }
    }
    joint
        .into_iter()
        .map(|((a, b), n)| {
            let pa = marginal[&a] as f64 / n_visits as f64;
            let pb = marginal[&b] as f64 / n_visits as f64;
            let value = ((n as f64 / pairs as f64) / (pa * pb)).ln();
            ((a, b), value)
        })
        .collect()
}

fn criterion_pmi() -> Check {
    let spec = SynthSpec {
        patients: 30,
        ..SynthSpec::default()
    };
    let cohort = generate_synthetic(&spec, 3).map_err(|e| e.to_string())?.cohort;
    ensure(cohort.num_visits() <= 200, format!("{} visits", cohort.num_visits()))?;
    let counts = count_lagged(&cohort, 2);
    let table = lagged_pmi(&counts);
    let mut compared = 0;
    let mut worst = 0.0f64;
    for delta in 0..=2 {
        let oracle = brute_force_pmi(&cohort, delta);
        let ours: BTreeMap<(String, String), f64> = table
            .entries(&counts)
            .into_iter()
            .filter(|e| e.2 == delta)
            .map(|(a, b, _, p)| ((a.to_owned(), b.to_owned()), p))
            .collect();
        ensure(
            ours.keys().eq(oracle.keys()),
            format!("Δ={delta}: {} entries vs {} brute force", ours.len(), oracle.len()),
        )?;
        for (k, v) in &oracle {
            let diff = (ours[k] - v).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-12, format!("{k:?} Δ={delta}: {} vs {v}", ours[k]))?;
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} (a,b,Δ) entries over {} visits, max |diff| {worst:.1e}",
        cohort.num_visits()
    ))
}

// ---------------------------------------------------------------------------
// 4. graph recovery
// ---------------------------------------------------------------------------

fn criterion_graph_recovery() -> Check {
    let started = Instant::now();
    let synth = generate_synthetic(&SynthSpec::default(), 0).map_err(|e| e.to_string())?;
    let rules = &synth.rules;
    ensure(rules.len() == 10 && rules.iter().all(|r| r.prob >= 0.9), "expected 10 strong rules")?;
    let cfg = GraphConfig {
        kappa: 50,
        tau_pmi: 0.0,
        bootstrap: 10,
        q: 0.8,
        ..GraphConfig::default()
    };
    let vocab = build_vocabulary_with(&synth.cohort, &synth.vocab).map_err(|e| e.to_string())?;
    let g = build_graph_with(&synth.cohort, None, vocab, &cfg).map_err(|e| e.to_string())?;
    let planted: BTreeSet<(&str, &str, u32)> = rules
        .iter()
        .map(|r| (r.src.as_str(), r.dst.as_str(), r.delta as u32))
        .collect();
    let retained: BTreeSet<(&str, &str, u32)> = g
        .cross_edges()
        .map(|e| (e.src.as_str(), e.dst.as_str(), e.etype.delta()))
        .collect();
    let recovered = planted.intersection(&retained).count();
    let false_edges = retained.difference(&planted).count();
    let rate = false_edges as f64 / retained.len().max(1) as f64;
    let elapsed = started.elapsed();
    let detail = format!(
        "{recovered}/10 planted recovered, {false_edges} false of {} retained ({:.1}%), {elapsed:.1?}",
        retained.len(),
        100.0 * rate
    );
    ensure(recovered == 10, detail.clone())?;
    ensure(rate <= 0.05, detail.clone())?;
    ensure(elapsed < Duration::from_secs(120), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5. hierarchy embedding
// ---------------------------------------------------------------------------

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_hierarchy() -> Check {
    let started = Instant::now();
    let synth = generate_synthetic(&SynthSpec::default(), 0).map_err(|e| e.to_string())?;
    let vocab = synth.vocab.clone();
    let tree = assemble_graph(vocab.clone(), build_hierarchy_edges(&vocab), vec![])
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        dim: 64,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let empty = Cohort::new(vec![]).map_err(|e| e.to_string())?;
    let (store, _) = trainer::train(&tree, &empty, &cfg).map_err(|e| e.to_string())?;
    let c = store.curvature();
    let (mut tree_d, mut emb_d) = (Vec::new(), Vec::new());
    for m in Modality::ALL {
        let nodes = vocab.modality_nodes(m);
        for (a, &i) in nodes.iter().enumerate() {
            for &j in &nodes[a + 1..] {
                tree_d.push(f64::from(tree_distance(vocab.id(i), vocab.id(j), &vocab).unwrap()));
                emb_d.push(manifold::dist(store.point(i), store.point(j), c).unwrap());
            }
        }
    }
    let rho = spearman(&tree_d, &emb_d);
    let max_level = vocab.concepts().iter().map(|k| k.level).max().unwrap_or(0);
    let norms: Vec<f64> = (0..=max_level)
        .map(|l| {
            let v: Vec<f64> = (0..vocab.len())
                .filter(|&i| vocab.concept(i).level == l)
                .map(|i| store.point(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let elapsed = started.elapsed();
    let detail = format!(
        "Spearman {rho:.3} over {} pairs, mean norm by level {:?}, {elapsed:.1?}",
        tree_d.len(),
        norms.iter().map(|n| format!("{n:.3}")).collect::<Vec<_>>()
    );
    ensure(rho > 0.6, detail.clone())?;
    ensure(norms.windows(2).all(|w| w[0] < w[1]), detail.clone())?;
    ensure(elapsed < Duration::from_secs(300), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Shared end-to-end run (criteria 6, 7, 8 and 10)
// ---------------------------------------------------------------------------

struct Trained {
    config: PipelineConfig,
    graph: ClinicalGraph,
    store: EmbeddingStore,
    test: Cohort,
    rules: Vec<PlantedRule>,
}

fn load_trained(config: &PipelineConfig) -> Result<Trained, String> {
    let s = |e: &dyn std::fmt::Display| e.to_string();
    let path = |p: &Path| config.path(p);
    let open = |p: &Path| fs::File::open(path(p)).map(std::io::BufReader::new).map_err(|e| s(&e));
    let vocab = graph::read_vocab(open(&config.paths.vocab)?).map_err(|e| s(&e))?;
    let (graph, _) = graph::read_graph(vocab, open(&config.paths.graph)?).map_err(|e| s(&e))?;
    let (mut store, _) = trainer::read_store(open(&config.paths.embeddings)?).map_err(|e| s(&e))?;
    trainer::read_gamma(&mut store, open(&config.paths.gamma)?).map_err(|e| s(&e))?;
    Ok(Trained {
        config: config.clone(),
        graph,
        store,
        test: load_cohort(path(&config.paths.test)).map_err(|e| s(&e))?,
        rules: pipeline::read_rules(&path(&config.paths.rules)).map_err(|e| s(&e))?,
    })
}

struct EndToEnd {
    first: Result<Trained, String>,
    determinism: Check,
}

fn end_to_end(root: &Path) -> EndToEnd {
    let run = |dir: &str| -> Result<(PipelineConfig, Vec<u8>, Duration), String> {
        let config = PipelineConfig {
            out_dir: root.join(dir),
            deterministic: true,
            ..PipelineConfig::default()
        }
        .with_seed(7);
        let started = Instant::now();
        pipeline::run_all(&config).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        let bytes = fs::read(config.path(&config.paths.report_json)).map_err(|e| e.to_string())?;
        Ok((config, bytes, elapsed))
    };
    let a = guarded(|| run("a"));
    let determinism = match &a {
        Err(e) => Err(e.clone()),
        Ok((_, bytes_a, t_a)) => guarded(|| {
            let (_, bytes_b, t_b) = run("b")?;
            let detail = format!(
                "report.json {} bytes, identical={}, run-all {:.1?} and {:.1?}",
                bytes_a.len(),
                *bytes_a == bytes_b,
                t_a,
                t_b
            );
            ensure(*bytes_a == bytes_b, detail.clone())?;
            ensure(t_a.max(&t_b) < &Duration::from_secs(600), detail.clone())?;
            Ok(detail)
        }),
    };
    EndToEnd {
        first: a.and_then(|(config, _, _)| load_trained(&config)),
        determinism,
    }
}

// ---------------------------------------------------------------------------
// 6. masked denoising
// ---------------------------------------------------------------------------

fn criterion_masked(t: &Trained) -> Check {
    let vocab = t.graph.vocab();
    let c = t.store.curvature();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ranks = Vec::new();
    for tr in t.test.trajectories() {
        for v in &tr.visits {
            let Some(mv) = mask_visit(v, 0.25, &mut rng) else {
                continue;
            };
            let kept: Vec<&str> = mv.kept.iter().map(String::as_str).collect();
            let mu = barycenter(&kept, &vec![1.0; kept.len()], &t.store).map_err(|e| e.to_string())?;
            for code in &mv.masked {
                let i = vocab.index_of(code).ok_or("masked code not in vocabulary")?;
                let pool: Vec<usize> = vocab
                    .leaves(vocab.concept(i).modality)
                    .filter(|&j| j != i)
                    .collect();
                let d_true = manifold::dist(&mu, t.store.point(i), c).unwrap();
                let closer = (0..50)
                    .filter(|_| {
                        let j = pool[rng.random_range(0..pool.len())];
                        manifold::dist(&mu, t.store.point(j), c).unwrap() < d_true
                    })
                    .count();
                ranks.push((closer + 1) as f64);
            }
        }
    }
    let n = ranks.len() as f64;
    let mean = ranks.iter().sum::<f64>() / n;
    let sd = (ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = (25.5 - mean) / (sd / n.sqrt());
    let p = 1.0 - Normal::standard().cdf(z);
    let detail = format!("mean rank {mean:.2} over {} masked codes, one-sided p = {p:.2e}", ranks.len());
    ensure(ranks.len() >= 500, detail.clone())?;
    ensure(mean < 25.5 && p < 0.01, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. retrieval
// ---------------------------------------------------------------------------

fn forecasts(t: &Trained, rerank: &RerankConfig, scorer: Option<&dyn Scorer>) -> Result<Vec<Forecast>, String> {
    let cfg = InferenceConfig {
        central_event: &t.config.central_event,
        retrieval: &t.config.retrieval,
        rerank,
    };
    forecast_cohort(&t.test, &t.graph, &t.store, cfg, scorer).map_err(|e| e.to_string())
}

fn modality_of(id: &str) -> Modality {
    id.split(':').next().and_then(|m| m.parse().ok()).expect("modality prefix")
}

fn criterion_retrieval(t: &Trained) -> Check {
    let vocab = t.graph.vocab();
    let fc = forecasts(t, &t.config.rerank, None)?;
    let (mut eligible, mut hits) = (0usize, 0usize);
    let mut per_rule = Vec::new();
    for rule in t.rules.iter().filter(|r| r.delta == 1) {
        let (Some(a), dst_m) = (vocab.index_of(&rule.src), modality_of(&rule.dst)) else {
            continue;
        };
        let (mut e, mut h) = (0, 0);
        for f in &fc {
            let last = &t.test.get(&f.patient_id).unwrap().visits[f.t - 1];
            if !last.contains(modality_of(&rule.src), &rule.src) {
                continue;
            }
            let rep = vocab.index_of(&f.representative).unwrap();
            if rep != a && !vocab.ancestors(a).any(|x| x == rep) {
                continue;
            }
            e += 1;
            h += usize::from(f.horizon.list(dst_m).iter().any(|r| r.id == rule.dst));
        }
        eligible += e;
        hits += h;
        per_rule.push(format!("{h}/{e}"));
    }
    let rate = hits as f64 / eligible.max(1) as f64;

    // aperture and bonus sweeps on every non-root apex
    let phis = [0.1, 0.3, 0.6, 1.0, std::f64::consts::FRAC_PI_3, 1.5, 2.0, 2.8, std::f64::consts::PI];
    let mut cones = 0;
    for m in Modality::ALL {
        let leaves: Vec<&str> = vocab.leaves(m).map(|i| vocab.id(i)).collect();
        for &v in vocab.modality_nodes(m).iter().filter(|&&v| vocab.parent(v).is_some()) {
            let mut previous: Option<BTreeSet<&str>> = None;
            for &phi in &phis {
                let rc = RetrievalConfig { phi, ..t.config.retrieval.clone() };
                let cone = cone_direction(vocab.id(v), &t.store, vocab, &rc).map_err(|e| e.to_string())?;
                let inside: BTreeSet<&str> = leaves
                    .iter()
                    .copied()
                    .filter(|u| in_cone(u, &cone, &t.store, rc.dir_eps).unwrap().0)
                    .collect();
                if let Some(prev) = &previous {
                    ensure(prev.is_subset(&inside), format!("cone at {} shrank as φ grew to {phi}", vocab.id(v)))?;
                }
                previous = Some(inside);
            }
            cones += 1;
        }
    }
    let mut pairs = 0;
    let etas = [0.0, 0.1, 0.5, 1.0, 3.0];
    let rc = &t.config.retrieval;
    let apexes: Vec<usize> = (0..vocab.len()).filter(|&v| vocab.parent(v).is_some()).step_by(5).collect();
    for (n, &v) in apexes.iter().enumerate() {
        let cone = cone_direction(vocab.id(v), &t.store, vocab, rc).map_err(|e| e.to_string())?;
        let mu = trainer_mu(t, &fc[(n * 13) % fc.len()])?;
        let ids: Vec<&str> = vocab.leaves(vocab.concept(v).modality).map(|i| vocab.id(i)).collect();
        let flags: Vec<bool> = ids.iter().map(|u| in_cone(u, &cone, &t.store, rc.dir_eps).unwrap().0).collect();
        let scores: Vec<Vec<f64>> = etas
            .iter()
            .map(|&eta| {
                ids.iter()
                    .map(|u| geo_score(u, &mu, &cone, &t.store, eta, rc.dir_eps).unwrap())
                    .collect()
            })
            .collect();
        for i in (0..ids.len()).filter(|&i| flags[i]) {
            for j in (0..ids.len()).filter(|&j| !flags[j]) {
                for w in scores.windows(2) {
                    let before = w[0][i] >= w[0][j];
                    ensure(!before || w[1][i] >= w[1][j], "raising η demoted an in-cone candidate")?;
                }
                pairs += 1;
            }
        }
    }
    let detail = format!(
        "b in top-10 for {hits}/{eligible} eligible visits ({:.1}%), per rule [{}]; {cones} cones nested over {} apertures; {pairs} in/out pairs η-monotone over {} values",
        100.0 * rate,
        per_rule.join(" "),
        phis.len(),
        etas.len()
    );
    ensure(pairs > 0, "no in-cone/out-of-cone pairs to compare")?;
    ensure(eligible > 0 && rate >= 0.7, detail.clone())?;
    Ok(detail)
}

fn trainer_mu(t: &Trained, f: &Forecast) -> Result<Vec<f64>, String> {
    let visit = &t.test.get(&f.patient_id).unwrap().visits[f.t - 1];
    let codes: Vec<&str> = visit.all_codes().map(|(_, c)| c).collect();
    barycenter(&codes, &vec![1.0; codes.len()], &t.store).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// 8. reranking endpoints
// ---------------------------------------------------------------------------

/// Returns ids that are never in a horizon alongside a full score set.
struct Hallucinating;

impl Scorer for Hallucinating {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, ScorerError> {
        let mut scores: BTreeMap<String, f64> = req
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i as f64))
            .collect();
        scores.insert("dx:NOT.A.CODE".into(), 99.0);
        Ok(ScorerResponse { scores })
    }
}

fn mean_recall_at_5(t: &Trained, fc: &[Forecast]) -> BTreeMap<Modality, f64> {
    let mut sums: BTreeMap<Modality, (f64, usize)> = BTreeMap::new();
    for f in fc {
        let next = &t.test.get(&f.patient_id).unwrap().visits[f.t];
        for m in Modality::ALL {
            let truth = next.codes(m);
            if truth.is_empty() {
                continue;
            }
            let ids: Vec<&str> = f.prediction.list(m).iter().map(|(id, _)| id.as_str()).collect();
            let e = sums.entry(m).or_default();
            e.0 += recall_at_k(&ids, truth, 5);
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

fn criterion_rerank(t: &Trained) -> Check {
    let base = RerankConfig { lambda: 0.0, ..t.config.rerank.clone() };
    let geo = forecasts(t, &base, None)?;
    for f in &geo {
        for (m, list) in &f.prediction.lists {
            let prefix: Vec<&str> = f.horizon.list(*m).iter().take(base.k).map(|r| r.id.as_str()).collect();
            let got: Vec<&str> = list.iter().map(|(id, _)| id.as_str()).collect();
            ensure(prefix == got, format!("λ=0 list differs from retrieval prefix for {}@{}", f.patient_id, f.t))?;
        }
    }
    let oracle = OracleScorer { rules: t.rules.clone() };
    let full = RerankConfig { lambda: 1.0, ..base.clone() };
    let fused = forecasts(t, &full, Some(&oracle))?;
    ensure(fused.iter().all(|f| !f.prediction.degraded), "oracle scorer degraded")?;
    let r0 = mean_recall_at_5(t, &geo);
    let r1 = mean_recall_at_5(t, &fused);
    let mut detail = Vec::new();
    for (m, v0) in &r0 {
        let v1 = r1.get(m).copied().unwrap_or(0.0);
        detail.push(format!("{m} {v0:.4}->{v1:.4}"));
        ensure(v1 >= *v0, format!("Recall@5 dropped for {m}: {v0} -> {v1}"))?;
    }
    let noisy = forecasts(t, &RerankConfig { lambda: 0.7, ..base }, Some(&Hallucinating))?;
    let unsupported = geo
        .iter()
        .chain(&fused)
        .chain(&noisy)
        .map(|f| f.unsupported)
        .fold(0.0, f64::max);
    let rejected: usize = noisy.iter().map(|f| f.prediction.rejected.len()).sum();
    ensure(unsupported == 0.0, format!("unsupported rate {unsupported}"))?;
    ensure(rejected == noisy.len(), "out-of-horizon ids were not all rejected")?;
    Ok(format!(
        "λ=0 equals retrieval prefix on {} visits; Recall@5 λ=0→λ=1 [{}]; unsupported rate 0 ({rejected} invented ids rejected)",
        geo.len(),
        detail.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 9. metrics oracle
// ---------------------------------------------------------------------------

fn bfs_distance(vocab: &Vocabulary, a: usize, b: usize) -> Option<u32> {
    let mut dist = vec![u32::MAX; vocab.len()];
    let mut queue = VecDeque::from([a]);
    dist[a] = 0;
    while let Some(x) = queue.pop_front() {
        if x == b {
            return Some(dist[x]);
        }
        let nbrs = vocab.children(x).iter().copied().chain(vocab.parent(x));
        for y in nbrs {
            if dist[y] == u32::MAX {
                dist[y] = dist[x] + 1;
                queue.push_back(y);
            }
        }
    }
    None
}

fn prefix_ancestor(id: &str, level: u32, vocab: &Vocabulary) -> Option<String> {
    let (m, rest) = id.split_once(':')?;
    let c = vocab.get(id)?;
    if level > c.level {
        return None;
    }
    if level == 0 {
        let mut x = vocab.index_of(id)?;
        while let Some(p) = vocab.parent(x) {
            x = p;
        }
        return Some(vocab.id(x).to_owned());
    }
    Some(format!("{m}:{}", rest.split('.').take(level as usize).collect::<Vec<_>>().join(".")))
}

fn criterion_metrics() -> Check {
    let truth: BTreeSet<String> = ["b", "e", "z"].iter().map(|s| (*s).to_owned()).collect();
    let list = ["a", "b", "c", "d", "e", "f"];
    ensure(recall_at_k(&list, &truth, 5) == 2.0 / 3.0, "recall fixture")?;
    ensure(recall_at_k(&list, &truth, 1) == 0.0, "recall@1 fixture")?;
    let dcg = 1.0 / 3f64.log2() + 1.0 / 6f64.log2();
    let idcg = 1.0 + 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
    ensure((ndcg_at_k(&list, &truth, 5) - dcg / idcg).abs() <= 1e-15, "nDCG fixture")?;
    ensure(reciprocal_rank(&list, "e") == 0.2, "MRR fixture")?;
    ensure(reciprocal_rank(&list, "z") == 0.0, "MRR miss fixture")?;
    ensure(top_k_accuracy(&list, "e", 5) == 1.0 && top_k_accuracy(&list, "e", 4) == 0.0, "top-k fixture")?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet: Vec<String> = (0..30).map(|i| format!("c{i}")).collect();
    let mut lists = 0;
    for _ in 0..2000 {
        let len = rng.random_range(0..15);
        let pred: Vec<&str> = (0..len).map(|_| alphabet[rng.random_range(0..30)].as_str()).collect();
        let truth: BTreeSet<String> = (0..rng.random_range(0..6))
            .map(|_| alphabet[rng.random_range(0..30)].clone())
            .collect();
        let k = rng.random_range(1..12);
        let mut seen = BTreeSet::new();
        let (mut hits, mut dcg) = (0usize, 0.0);
        for (i, p) in pred.iter().take(k).enumerate() {
            if truth.contains(*p) && seen.insert(*p) {
                hits += 1;
                dcg += 1.0 / ((i + 2) as f64).log2();
            }
        }
        let (rec, nd) = if truth.is_empty() {
            (0.0, 0.0)
        } else {
            let ideal: f64 = (0..truth.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
            (hits as f64 / truth.len() as f64, dcg / ideal)
        };
        ensure(recall_at_k(&pred, &truth, k) == rec, "recall vs brute force")?;
        ensure((ndcg_at_k(&pred, &truth, k) - nd).abs() <= 1e-15, "nDCG vs brute force")?;
        let target = &alphabet[rng.random_range(0..30)];
        let rr = pred
            .iter()
            .enumerate()
            .find(|(_, p)| **p == target.as_str())
            .map_or(0.0, |(i, _)| 1.0 / (i + 1) as f64);
        ensure(reciprocal_rank(&pred, target) == rr, "MRR vs brute force")?;
        lists += 1;
    }

    let vocab = generate_synthetic(&SynthSpec { patients: 5, ..SynthSpec::default() }, 1)
        .map_err(|e| e.to_string())?
        .vocab;
    let mut pairs = 0;
    for m in Modality::ALL {
        let nodes = vocab.modality_nodes(m);
        for (x, &i) in nodes.iter().enumerate().step_by(3) {
            for &j in nodes[x..].iter().step_by(2) {
                let (a, b) = (vocab.id(i), vocab.id(j));
                let expected = bfs_distance(&vocab, i, j).ok_or("disconnected tree")?;
                ensure(tree_distance(a, b, &vocab).unwrap() == expected, format!("tree distance {a} {b}"))?;
                for l in 0..=3 {
                    let want = match (prefix_ancestor(a, l, &vocab), prefix_ancestor(b, l, &vocab)) {
                        (Some(x), Some(y)) => Some(x == y),
                        _ => None,
                    };
                    ensure(ancestor_match(a, b, l, &vocab).unwrap() == want, format!("ancestor match {a} {b} L{l}"))?;
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("hand fixtures exact; {lists} random lists and {pairs} concept pairs match brute force"))
}

// ---------------------------------------------------------------------------

fn main() {
    pipeline::configure_threads(true);
    let root = tempfile::tempdir().expect("temp dir");
    let e2e = end_to_end(root.path());
    let trained = |f: fn(&Trained) -> Check| -> Check {
        match &e2e.first {
            Ok(t) => guarded(|| f(t)),
            Err(e) => Err(format!("end-to-end run failed: {e}")),
        }
    };
    let results: Vec<(&str, Check)> = vec![
        ("geometry suite", guarded(criterion_geometry)),
        ("gradient checks", guarded(criterion_gradients)),
        ("PMI oracle", guarded(criterion_pmi)),
        ("graph recovery", guarded(criterion_graph_recovery)),
        ("hierarchy embedding", guarded(criterion_hierarchy)),
        ("masked denoising", trained(criterion_masked)),
        ("retrieval", trained(criterion_retrieval)),
        ("reranking endpoints", trained(criterion_rerank)),
        ("metrics oracle", guarded(criterion_metrics)),
        ("end-to-end determinism", e2e.determinism.clone()),
    ];
    let mut failed = Vec::new();
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                println!("FAIL {:>2} {name}: {d}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
