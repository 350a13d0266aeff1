//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quicklists::autodiff::*;
use quicklists::data::{
    generate_synthetic_corpus, split_train_test, write_corpus, Corpus, Playlist, SideInfoVector, SyntheticCorpus,
    SynthConfig, TrackId,
};
use quicklists::encoder::{EncoderConfig, QuickListsModel, TowerKind};
use quicklists::evaluation::{
    evaluate_model, familiarity, f1_overlap, BaselineContext, BaselineKind, EvalReport, LesionKind, RANDOM_PAIRING,
};
use quicklists::recommender::{build_index, manipulate_side, recommend, recommend_cold, RecommendationIndex};
use quicklists::track2vec::{train_sgns, SgnsConfig, TrackEmbeddingTable};
use quicklists::training::{
    distance, distance_grad, score_triplet, train, triplet_loss, Metric, TrainConfig, TrainHistory,
};

type Outcome = Result<(bool, String), String>;

const SEED: u64 = 7;
const EPS: f64 = 1e-5;

fn main() -> ExitCode {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |id: &str, name: &str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!("{} {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    report("C1", "gradient integrity", gradient_integrity());
    report("C2", "loss semantics", loss_semantics());

    let main_run = match Run::new(0.1) {
        Ok(r) => Some(r),
        Err(e) => {
            for (id, name) in [("C3", "separation"), ("C4", "lesion ordering"), ("C5", "model orderings"), ("C6", "order sensitivity"), ("C8", "oracle equivalence"), ("C10", "schedule exactness")] {
                report(id, name, Err(format!("training failed: {e}")));
            }
            None
        }
    };
    if let Some(run) = &main_run {
        report("C3", "separation", separation(run));
        report("C4", "lesion ordering", lesion_ordering(run));
        report("C5", "model orderings", model_orderings(run));
        report("C6", "order sensitivity", order_sensitivity(run));
    }
    report("C7", "cold start and manipulation", Run::new(0.0).and_then(|r| cold_start(&r)).map_err(|e| e.to_string()).and_then(|o| o));
    if let Some(run) = &main_run {
        report("C8", "oracle equivalence", oracle_equivalence(run));
    }
    report("C9", "determinism", determinism());
    if let Some(run) = &main_run {
        report("C10", "schedule exactness", schedule(&run.history, &run.train_cfg));
    }

    println!("{} failed; total {:.0?}", failed, start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Shared fixture: default corpus at a given side-noise level, 30 epochs.

struct Run {
    syn: SyntheticCorpus,
    test: Corpus,
    model: QuickListsModel,
    index: RecommendationIndex,
    history: TrainHistory,
    train_cfg: TrainConfig,
    report: EvalReport,
}

impl Run {
    fn new(side_noise: f64) -> quicklists::Result<Self> {
        let synth = SynthConfig { side_noise, ..SynthConfig::default() };
        let syn = generate_synthetic_corpus(&synth, SEED)?;
        let (train_c, test_c) = split_train_test(&syn.corpus, 0.85, SEED)?;
        let table = train_sgns(&train_c, &SgnsConfig::default(), SEED)?;
        let mut model = QuickListsModel::with_pretrained(EncoderConfig::default(), &table, train_c.side_width(), SEED)?;
        let train_cfg = TrainConfig { epochs: 30, seed: SEED, ..TrainConfig::default() };
        let history = train(&mut model, &train_c, &test_c, &train_cfg)?;
        let index = build_index(train_c.future_playlists(), &model, Metric::Euclidean)?;
        let mut report = evaluate_model(&model, &index, &test_c, &LesionKind::ALL, SEED)?;
        report.add_baselines(&test_c, &BaselineContext::new(&train_c, &test_c, Some(&table)), &BaselineKind::ALL, SEED)?;
        Ok(Self { syn, test: test_c, model, index, history, train_cfg, report })
    }
}

// ---------------------------------------------------------------------------
// C1

fn random(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pack(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.values().iter().copied()).collect()
}

fn unpack(templates: &[&Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    templates
        .iter()
        .map(|t| {
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec()).unwrap();
            off += t.len();
            out
        })
        .collect()
}

/// Worst relative error per layer over 20 seeded instances each.
fn layer_errors() -> quicklists::Result<Vec<(&'static str, f64, f64)>> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, tol: f64, f: &mut dyn FnMut(&mut ChaCha8Rng) -> quicklists::Result<f64>| {
        let mut max = 0.0f64;
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed * 31 + name.len() as u64);
            max = max.max(f(&mut r)?);
        }
        out.push((name, max, tol));
        Ok::<_, quicklists::Error>(())
    };

    worst("embedding", 1e-4, &mut |r| {
        let table = random(&[6, 3], 1.0, r);
        let ids: Vec<usize> = (0..5).map(|_| r.gen_range(0..6)).collect();
        let mask: Vec<bool> = (0..5).map(|_| r.gen_bool(0.3)).collect();
        let w = random(&[5, 3], 1.0, r);
        let mut g = vec![0.0; table.len()];
        embedding_backward(&mut g, 3, &ids, &mask, &w);
        let f = |v: &[f64]| dot(embedding_lookup(&unpack(&[&table], v)[0], &ids, &mask).unwrap().values(), w.values());
        grad_check(f, table.values(), &g, EPS)
    })?;
    worst("masked maxpool", 1e-4, &mut |r| {
        let x = random(&[8, 3], 1.0, r);
        let pads = r.gen_range(0..4);
        let mask: Vec<bool> = (0..8).map(|t| t < pads).collect();
        let (out, _, cache) = maxpool1d_masked(&x, &mask, 2, 2)?;
        let w = random(out.shape(), 1.0, r);
        let g = maxpool1d_backward(&cache, &w);
        let f = |v: &[f64]| dot(maxpool1d_masked(&unpack(&[&x], v)[0], &mask, 2, 2).unwrap().0.values(), w.values());
        grad_check(f, x.values(), g.values(), EPS)
    })?;
    worst("biLSTM", 1e-3, &mut |r| {
        let x = random(&[5, 3], 1.0, r);
        // Two directions of hidden width 2: w_x, w_h, b each.
        let ts: Vec<Tensor> = (0..2)
            .flat_map(|_| [random(&[8, 3], 0.8, r), random(&[8, 2], 0.8, r), random(&[8], 0.8, r)])
            .collect();
        let pads = r.gen_range(0..3);
        let mask: Vec<bool> = (0..5).map(|t| t < pads).collect();
        let (fw, bw) = weights(&ts);
        let (out, cache) = bilstm(&x, fw, bw, &mask)?;
        let w = random(out.shape(), 1.0, r);
        let (gx, gf, gb) = bilstm_backward(&cache, fw, bw, &w);
        let analytic: Vec<f64> =
            [gx.values(), &gf.w_x, &gf.w_h, &gf.b, &gb.w_x, &gb.w_h, &gb.b].concat();
        let templates: Vec<&Tensor> = std::iter::once(&x).chain(&ts).collect();
        let f = |v: &[f64]| {
            let t = unpack(&templates, v);
            let (fw, bw) = weights(&t[1..]);
            dot(bilstm(&t[0], fw, bw, &mask).unwrap().0.values(), w.values())
        };
        grad_check(f, &pack(&templates), &analytic, EPS)
    })?;
    worst("conv1d+relu", 1e-4, &mut |r| {
        let (x, k, b) = (random(&[9, 4], 1.0, r), random(&[3, 4, 2], 0.5, r), random(&[2], 0.5, r));
        let (out, cache) = conv1d_relu(&x, &k, &b)?;
        let w = random(out.shape(), 1.0, r);
        let (gx, gk, gb) = conv1d_relu_backward(&cache, &k, &w);
        let analytic = [gx.values(), &gk, &gb].concat();
        let templates = [&x, &k, &b];
        let f = |v: &[f64]| {
            let t = unpack(&templates, v);
            dot(conv1d_relu(&t[0], &t[1], &t[2]).unwrap().0.values(), w.values())
        };
        grad_check(f, &pack(&templates), &analytic, EPS)
    })?;
    worst("dropout", 1e-4, &mut |r| {
        let x = random(&[10], 1.0, r);
        let mode = ComputeMode::Train { seed: r.gen() };
        let (_, mask) = dropout(&x, 0.5, mode)?;
        let w = random(&[10], 1.0, r);
        let g = dropout_backward(&mask, &w);
        let f = |v: &[f64]| dot(dropout(&unpack(&[&x], v)[0], 0.5, mode).unwrap().0.values(), w.values());
        grad_check(f, x.values(), g.values(), EPS)
    })?;
    for (name, act) in [("dense+tanh", Activation::Tanh), ("dense+relu", Activation::Relu), ("dense", Activation::Identity)] {
        worst(name, 1e-4, &mut |r| {
            let (x, wt, b) = (random(&[6], 1.0, r), random(&[6, 4], 0.7, r), random(&[4], 0.5, r));
            let (y, cache) = dense(&x, &wt, &b, act)?;
            let w = random(y.shape(), 1.0, r);
            let (gx, gw, gb) = dense_backward(&cache, &wt, &w);
            let analytic = [gx.values(), &gw, &gb].concat();
            let templates = [&x, &wt, &b];
            let f = |v: &[f64]| {
                let t = unpack(&templates, v);
                dot(dense(&t[0], &t[1], &t[2], act).unwrap().0.values(), w.values())
            };
            grad_check(f, &pack(&templates), &analytic, EPS)
        })?;
    }
    worst("l2 penalty", 1e-4, &mut |r| {
        let w = random(&[4, 3], 1.0, r);
        let g = l2_penalty_grad(&w, 0.01);
        grad_check(|v| l2_penalty(&[&unpack(&[&w], v)[0]], 0.01), w.values(), &g, EPS)
    })?;
    for (name, metric) in [("euclidean distance", Metric::Euclidean), ("cosine distance", Metric::Cosine), ("dot distance", Metric::DotDistance)] {
        worst(name, 1e-4, &mut |r| {
            let (a, b) = (random(&[6], 1.0, r), random(&[6], 1.0, r));
            let (ga, gb) = distance_grad(a.values(), b.values(), metric)?;
            let f = |v: &[f64]| distance(&v[..6], &v[6..], metric).unwrap();
            grad_check(f, &[a.values(), b.values()].concat(), &[ga, gb].concat(), EPS)
        })?;
    }
    Ok(out)
}

fn weights(t: &[Tensor]) -> (LstmWeights<'_>, LstmWeights<'_>) {
    (LstmWeights { w_x: &t[0], w_h: &t[1], b: &t[2] }, LstmWeights { w_x: &t[3], w_h: &t[4], b: &t[5] })
}

fn set_tower(model: &mut QuickListsModel, ids: &[ParamId], flat: &[f64]) {
    let mut off = 0;
    for &id in ids {
        let t = model.params_mut().get_mut(id);
        let n = t.len();
        t.values_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Gradient of `r · tower(playlist, side)` w.r.t. every tower parameter.
fn tower_error(seed: u64, kind: TowerKind) -> quicklists::Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
    let cfg = EncoderConfig {
        d_track: 4,
        lstm_hidden: 3,
        conv_filters: vec![2, 3, 5],
        conv_channels: 4,
        side_hidden: 3,
        d_out: 5,
        max_len: 8,
        side_in_future: seed % 2 == 1,
        ..EncoderConfig::default()
    };
    let mut model = QuickListsModel::new(cfg, 10, 6, seed)?;
    let ids = model.tower_params(kind);
    // Off the initial point: zero biases meet a ReLU kink on all-zero inputs.
    for &id in &ids {
        for v in model.params_mut().get_mut(id).values_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    let len = r.gen_range(1..=10);
    let tracks: Vec<TrackId> = (0..len).map(|_| TrackId(r.gen_range(0..10))).collect();
    let active: Vec<usize> = (0..6).filter(|_| r.gen_bool(0.4)).collect();
    let side = SideInfoVector::with_bits(6, &active)?;
    let weights: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mode = ComputeMode::Train { seed: seed + 5 };
    let side_in = model.has_side_branch(kind).then_some(&side);

    let (_, cache) = model.forward(kind, Some(&tracks), side_in, mode)?;
    let mut grads = model.params().grad_buffer();
    model.backward(&cache, &weights, &mut grads);
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params().get(id).len()])).collect();
    let x0: Vec<f64> = ids.iter().flat_map(|&id| model.params().get(id).values().to_vec()).collect();
    let mut probe = model.clone();
    let numeric = numeric_gradient(
        |x| {
            set_tower(&mut probe, &ids, x);
            let (e, _) = probe.forward(kind, Some(&tracks), side_in, mode).unwrap();
            dot(e.as_slice(), &weights)
        },
        &x0,
        1e-6,
    )?;
    // Components that are round-off on both sides carry no signal.
    Ok(analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-7)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut layers = layer_errors().map_err(err)?;
    let mut tower = 0.0f64;
    for seed in 0..20 {
        for kind in [TowerKind::Current, TowerKind::Future] {
            tower = tower.max(tower_error(seed, kind).map_err(err)?);
        }
    }
    layers.push(("full tower", tower, 1e-3));
    let elapsed = start.elapsed();
    let bad: Vec<String> =
        layers.iter().filter(|(_, e, tol)| !(e < tol)).map(|(n, e, tol)| format!("{n} {e:.2e} ≥ {tol:.0e}")).collect();
    let pass = bad.is_empty() && elapsed.as_secs_f64() < 60.0;
    let worst = layers.iter().map(|l| format!("{} {:.1e}", l.0, l.1)).collect::<Vec<_>>().join(", ");
    Ok((pass, format!("{} layers x 20 seeds, full tower x 20 seeds x 2 towers in {:.1?}; {worst}{}", layers.len() - 1, elapsed, if bad.is_empty() { String::new() } else { format!("; over tolerance: {}", bad.join(", ")) })))
}

// ---------------------------------------------------------------------------
// C2

fn loss_semantics() -> Outcome {
    let at_zero = (triplet_loss(0.0) - std::f64::consts::LN_2).abs();
    let grid: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.1).collect();
    let decreasing = grid.windows(2).all(|w| triplet_loss(w[1]) < triplet_loss(w[0]));
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut antisymmetric = true;
    for _ in 0..1000 {
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        for metric in [Metric::Euclidean, Metric::Cosine, Metric::DotDistance] {
            let a = score_triplet(&v[0], &v[1], &v[2], metric).map_err(err)?;
            let b = score_triplet(&v[0], &v[2], &v[1], metric).map_err(err)?;
            antisymmetric &= a.x_hat == -b.x_hat;
        }
    }
    let pass = at_zero <= 1e-12 && decreasing && antisymmetric;
    Ok((pass, format!("|loss(0) − ln 2| = {at_zero:.1e}, strictly decreasing over 201 points: {decreasing}, exact antisymmetry over 3000 swaps: {antisymmetric}")))
}

// ---------------------------------------------------------------------------
// C3–C6

fn separation(run: &Run) -> Outcome {
    let h = &run.history;
    let last = h.epochs.last().ok_or("no epochs")?;
    let test = last.test.as_ref().ok_or("no test stats")?;
    let init_test = h.initial_test.as_ref().ok_or("no initial test stats")?;
    let ratio = test.mean_d_pos / test.mean_d_neg;
    let init_train = h.initial_train.as_ref().ok_or("no initial train stats")?;
    let train_improves = last.train.mean_x_hat > init_train.mean_x_hat && last.train.mean_loss < init_train.mean_loss;
    let test_improves = test.mean_x_hat > init_test.mean_x_hat && test.mean_loss < init_test.mean_loss;
    let pass = test.mean_x_hat > 0.0 && ratio < 0.8 && train_improves && test_improves;
    Ok((pass, format!(
        "held-out mean x̂ {:.3} (epoch 0: {:.3}), true/shuffled distance {:.3}, train loss {:.4} → {:.4}, test loss {:.4} → {:.4}",
        test.mean_x_hat, init_test.mean_x_hat, ratio, init_train.mean_loss, last.train.mean_loss, init_test.mean_loss, test.mean_loss
    )))
}

fn lesion_ordering(run: &Run) -> Outcome {
    let d = |k: &str| run.report.distance(k).ok_or(format!("missing distance row {k}"));
    let (full, side, cur, rand) = (d("full")?, d("no_side")?, d("no_current")?, d(RANDOM_PAIRING)?);
    let ordered = full.mean_distance <= side.mean_distance
        && side.mean_distance < cur.mean_distance
        && cur.mean_distance < rand.mean_distance;
    let pass = ordered && side.pct_change < 10.0 && cur.pct_change > 50.0;
    Ok((pass, format!(
        "full {:.3} ≤ no-side {:.3} ({:+.1}%) < no-current {:.3} ({:+.1}%) < random {:.3} ({:+.1}%): ordering {}, no-side < 10%: {}, no-current > 50%: {}",
        full.mean_distance, side.mean_distance, side.pct_change, cur.mean_distance, cur.pct_change, rand.mean_distance, rand.pct_change,
        ordered, side.pct_change < 10.0, cur.pct_change > 50.0
    )))
}

fn model_orderings(run: &Run) -> Outcome {
    let m = |k: &str| run.report.model(k).ok_or(format!("missing model row {k}"));
    let (full, no_cur, rev) = (m("full")?, m("no_current")?, m("reversed_current")?);
    let (random, repeat) = (m("random_tracks")?, m("repeat_current")?);
    let f1 = full.mean_f1 > no_cur.mean_f1 && no_cur.mean_f1 > random.mean_f1 && rev.mean_f1 <= full.mean_f1;
    let fam = repeat.mean_familiarity == 100.0
        && random.mean_familiarity < full.mean_familiarity
        && full.mean_familiarity < repeat.mean_familiarity;
    Ok((f1 && fam, format!(
        "F1 full {:.4} > no-current {:.4} > random {:.4}, reversed {:.4} ≤ full; familiarity random {:.1}% < full {:.1}% < repeat {}%",
        full.mean_f1, no_cur.mean_f1, random.mean_f1, rev.mean_f1, random.mean_familiarity, full.mean_familiarity, repeat.mean_familiarity
    )))
}

fn order_sensitivity(run: &Run) -> Outcome {
    let (mut users, mut moved, mut changed) = (0usize, 0usize, 0usize);
    for ex in run.test.examples() {
        let history = [ex.current.tracks(), ex.future.tracks()].concat();
        if run.syn.genres_in(&history) < 2 {
            continue;
        }
        users += 1;
        let a = run.model.encode(&ex.current, &ex.side, ComputeMode::Infer).map_err(err)?;
        let b = run.model.encode(&ex.current.reversed(), &ex.side, ComputeMode::Infer).map_err(err)?;
        if distance(a.as_slice(), b.as_slice(), Metric::Euclidean).map_err(err)? > 1e-3 {
            moved += 1;
        }
        let top = |q: &[f64]| run.index.search(q, 1).map(|r| r[0].candidate);
        if top(a.as_slice()).map_err(err)? != top(b.as_slice()).map_err(err)? {
            changed += 1;
        }
    }
    if users == 0 {
        return Ok((false, "no multi-genre test users".into()));
    }
    let (pm, pc) = (moved as f64 / users as f64, changed as f64 / users as f64);
    Ok((pm >= 0.8 && pc >= 0.3, format!("{users} multi-genre users: embedding moves for {:.1}%, top-1 changes for {:.1}%", 100.0 * pm, 100.0 * pc)))
}

// ---------------------------------------------------------------------------
// C7

fn cold_start(run: &Run) -> quicklists::Result<Outcome> {
    let layout = &run.syn.config.side_layout;
    let genres = run.syn.config.genres;
    let dominant = |c: usize| run.syn.dominant_genre(run.index.candidate(c).tracks());

    let mut hits = 0;
    for g in 0..genres {
        let side = SideInfoVector::with_bits(layout.width(), &[layout.genre_bit(g)])?;
        let rec = recommend_cold(&side, &run.index, &run.model, 1)?;
        if dominant(rec.results[0].candidate) == g {
            hits += 1;
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(SEED);
    let mut order: Vec<usize> = (0..run.test.len()).collect();
    order.shuffle(&mut r);
    let (mut sampled, mut raised) = (0, 0);
    for &i in order.iter().take(100) {
        let ex = &run.test.examples()[i];
        let off: Vec<usize> = (0..genres).filter(|&g| !ex.side.get(layout.genre_bit(g))).collect();
        let Some(&g) = off.choose(&mut r) else { continue };
        let (before, after) = manipulate_side(&ex.current, &ex.side, &[(layout.genre_bit(g), true)], &run.index, &run.model, 10)?;
        let count = |rec: &quicklists::recommender::Recommendation| rec.results.iter().filter(|x| dominant(x.candidate) == g).count();
        sampled += 1;
        if count(&after) > count(&before) {
            raised += 1;
        }
    }
    let cold_ok = hits as f64 >= 0.6 * genres as f64;
    let manip_ok = sampled > 0 && raised as f64 >= 0.5 * sampled as f64;
    Ok(Ok((cold_ok && manip_ok, format!(
        "cold-start top-1 in genre for {hits}/{genres} genres (need ≥60%): {cold_ok}; injected genre raises its top-10 count for {raised}/{sampled} users (need ≥50%): {manip_ok}"
    ))))
}

// ---------------------------------------------------------------------------
// C8

fn oracle_equivalence(run: &Run) -> Outcome {
    let n = run.index.len();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut mismatched = 0;
    for _ in 0..100 {
        let ex = &run.test.examples()[r.gen_range(0..run.test.len())];
        let rec = recommend(&ex.current, &ex.side, &run.index, &run.model, n).map_err(err)?;
        let q = run.model.encode(&ex.current, &ex.side, ComputeMode::Infer).map_err(err)?;
        let mut brute: Vec<(f64, usize)> = (0..n)
            .map(|i| Ok((distance(q.as_slice(), run.index.embeddings().row(i), Metric::Euclidean)?, i)))
            .collect::<quicklists::Result<_>>()
            .map_err(err)?;
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = rec.results.len() == n
            && rec.results.iter().zip(&brute).all(|(x, &(d, i))| x.candidate == i && x.distance.to_bits() == d.to_bits());
        if !same {
            mismatched += 1;
        }
    }

    let mut metric_errors = 0;
    for _ in 0..1000 {
        let random_playlist = |r: &mut ChaCha8Rng| {
            let len = r.gen_range(1..=30);
            Playlist::new((0..len).map(|_| TrackId(r.gen_range(0..60))).collect()).unwrap()
        };
        let (a, b) = (random_playlist(&mut r), random_playlist(&mut r));
        let sa: HashSet<u32> = a.tracks().iter().map(|t| t.0).collect();
        let sb: HashSet<u32> = b.tracks().iter().map(|t| t.0).collect();
        let hits = sa.intersection(&sb).count() as f64;
        let (p, rc) = (hits / sa.len() as f64, hits / sb.len() as f64);
        let f1 = if hits == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let fam = 100.0 * hits / sa.len() as f64;
        if (f1_overlap(&a, &b) - f1).abs() > 1e-12 || (familiarity(&a, &b) - fam).abs() > 1e-12 {
            metric_errors += 1;
        }
    }
    Ok((mismatched == 0 && metric_errors == 0, format!(
        "k=N ranking differs from brute-force sort on {mismatched}/100 queries; F1/familiarity differ from set arithmetic on {metric_errors}/1000 pairs"
    )))
}

// ---------------------------------------------------------------------------
// C9

fn pipeline_bytes() -> quicklists::Result<Vec<(&'static str, Vec<u8>)>> {
    let syn = generate_synthetic_corpus(&SynthConfig::default(), SEED)?;
    let (train_c, test_c) = split_train_test(&syn.corpus, 0.85, SEED)?;
    let table = train_sgns(&train_c, &SgnsConfig::default(), SEED)?;
    let mut model = QuickListsModel::with_pretrained(EncoderConfig::default(), &table, train_c.side_width(), SEED)?;
    let cfg = TrainConfig { epochs: 5, seed: SEED, ..TrainConfig::default() };
    train(&mut model, &train_c, &test_c, &cfg)?;
    let index = build_index(train_c.future_playlists(), &model, Metric::Euclidean)?;
    let mut report = evaluate_model(&model, &index, &test_c, &LesionKind::ALL, SEED)?;
    report.add_baselines(&test_c, &BaselineContext::new(&train_c, &test_c, Some(&table)), &BaselineKind::ALL, SEED)?;

    let mut corpus = Vec::new();
    write_corpus(&syn.corpus, &mut corpus)?;
    let mut vectors = Vec::new();
    TrackEmbeddingTable::write(&table, &mut vectors)?;
    let mut checkpoint = Vec::new();
    model.write(true, &mut checkpoint)?;
    let mut index_bytes = Vec::new();
    index.write(&mut index_bytes)?;
    Ok(vec![
        ("corpus", corpus),
        ("track vectors", vectors),
        ("model checkpoint", checkpoint),
        ("index", index_bytes),
        ("report json", report.to_json()?.into_bytes()),
    ])
}

fn determinism() -> Outcome {
    let a = pipeline_bytes().map_err(err)?;
    let b = pipeline_bytes().map_err(err)?;
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let sizes = a.iter().map(|(n, v)| format!("{n} {} B", v.len())).collect::<Vec<_>>().join(", ");
    Ok((differing.is_empty(), if differing.is_empty() { format!("two 5-epoch runs byte-identical: {sizes}") } else { format!("differs: {}", differing.join(", ")) }))
}

// ---------------------------------------------------------------------------
// C10

fn schedule(history: &TrainHistory, cfg: &TrainConfig) -> Outcome {
    let lrs = history.learning_rates();
    let bad: Vec<usize> = lrs
        .iter()
        .enumerate()
        .filter(|&(e, &lr)| lr != cfg.lr0 * 0.25f64.powi((e / 10) as i32))
        .map(|(e, _)| e)
        .collect();
    Ok((bad.is_empty() && lrs.len() == cfg.epochs, format!(
        "{} epochs, lr {:e} / {:e} / {:e} at epochs 0 / 10 / 20, mismatches at {bad:?}",
        lrs.len(), lrs[0], lrs.get(10).copied().unwrap_or(f64::NAN), lrs.get(20).copied().unwrap_or(f64::NAN)
    )))
}
