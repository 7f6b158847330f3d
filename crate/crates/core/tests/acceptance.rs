//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --release --test acceptance`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use protoabstain::cal::{
    cal_batch_loss, calibrate, margin_loss, modality_loss, predictor_loss, worst_case_logits, BandMode, CalConfig,
    CalModel,
};
use protoabstain::config::ExperimentConfig;
use protoabstain::data::{EmbeddingMap, GeneticAccess, Modality};
use protoabstain::eval::{
    ablation_summary, alp_ablation, cal_ablation, evaluate_alp, evaluate_cal, evaluate_protopnet, evaluate_prototree,
    sweep_alpha, AblationSummary,
};
use protoabstain::gradcheck::{gradient_check, GradCheckReport};
use protoabstain::proto::losses::{orthogonality_loss, variability_loss};
use protoabstain::proto::similarity::Patches;
use protoabstain::proto::{max_pool, project_prototypes, similarity_map, Candidate, LinearHead, PrototypeSet, SimilarityMap};
use protoabstain::protopnet::{protopnet_batch_loss, ProtoPNet, ProtoPNetConfig};
use protoabstain::tree::alp::alp_sample_loss;
use protoabstain::tree::{
    hard_traverse, leaf_weights, routing_loss, soft_cross_entropy, soft_distribution, soft_traverse, train_alp,
    AlpConfig, Routing, Tree,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cal_dataset, splits, Splits};

type Outcome = (bool, String);

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn binomial_sd(alpha: f64, n: usize) -> f64 {
    (alpha * (1.0 - alpha) / n as f64).sqrt()
}

struct CalFixture<'a> {
    splits: Splits<'a>,
    model: CalModel,
    build_secs: f64,
}

fn coverage(fx: &CalFixture<'_>) -> Outcome {
    let t0 = Instant::now();
    let model = &fx.model;
    let cal_res = model.residuals(&model.features(&fx.splits.cal).unwrap()).unwrap();
    let test_res = model.residuals(&model.features(&fx.splits.test).unwrap()).unwrap();
    let (n_cal, n_test) = (cal_res.len(), test_res.len());
    let mut ok = n_cal == 200 && n_test == 2000;
    let mut detail = format!("n_cal={n_cal} n_test={n_test}");
    let mut strict = 0;
    let mut checks = 0;
    for alpha in [0.05, 0.1, 0.3] {
        // The realised coverage varies with both the calibration draw and
        // the test draw.
        let sd = (alpha * (1.0 - alpha) * (1.0 / n_cal as f64 + 1.0 / n_test as f64)).sqrt();
        let floor = 1.0 - alpha - 3.0 * sd;
        let test_only_floor = 1.0 - alpha - 3.0 * binomial_sd(alpha, n_test);
        let band = calibrate(&cal_res, alpha, BandMode::PerLogit, false).unwrap();
        let per_logit: Vec<f64> = (0..16)
            .map(|j| test_res.iter().filter(|r| r[j].abs() <= band.delta[j]).count() as f64 / n_test as f64)
            .collect();
        let worst_logit = per_logit.iter().copied().fold(f64::INFINITY, f64::min);
        let mean_logit = per_logit.iter().sum::<f64>() / 16.0;
        let linf = calibrate(&cal_res, alpha, BandMode::LInfinity, false).unwrap();
        let joint = test_res
            .iter()
            .filter(|r| r.iter().all(|x| x.abs() <= linf.delta[0]))
            .count() as f64
            / n_test as f64;
        ok &= worst_logit >= floor && joint >= floor;
        strict += per_logit.iter().filter(|&&c| c >= test_only_floor).count() + (joint >= test_only_floor) as usize;
        checks += 17;
        detail += &format!(
            "; α={alpha}: per-logit min {worst_logit:.4} mean {mean_logit:.4}, L∞ {joint:.4} (floor {floor:.4})"
        );
    }
    detail += &format!("; {strict}/{checks} also clear the test-only floor");
    let secs = fx.build_secs + t0.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    (ok, format!("{detail}; {secs:.1}s"))
}

fn abstention_soundness(fx: &CalFixture<'_>) -> Outcome {
    let model = &fx.model;
    let cal_res = model.residuals(&model.features(&fx.splits.cal).unwrap()).unwrap();
    let test = model.all_outputs(&model.features(&fx.splits.test).unwrap()).unwrap();
    let alphas = [0.01, 0.05, 0.1, 0.3, 0.5, 0.9];
    let sweep = sweep_alpha(model, &cal_res, &test, &alphas, BandMode::PerLogit, false).unwrap();
    let mut ok = sweep.rows.len() == alphas.len();
    let mut below = 0;
    let mut curve = Vec::new();
    for r in &sweep.rows {
        ok &= r.abstention_error_rate <= r.error_bound;
        below += (r.abstention_error_rate < r.alpha) as usize;
        curve.push(format!(
            "α={} err={:.4} bound={:.4} n_abst={}",
            r.alpha, r.abstention_error_rate, r.error_bound, r.abstained
        ));
    }
    (ok, format!("{}; below diagonal at {below}/{}", curve.join(", "), alphas.len()))
}

fn boundary_rows(fx: &CalFixture<'_>) -> Outcome {
    let model = &fx.model;
    let access = GeneticAccess::new();
    let band = model
        .calibrate(&model.features(&fx.splits.cal).unwrap(), 0.0, BandMode::PerLogit, false)
        .unwrap();
    let (cal, _) = evaluate_cal(model, &band, &fx.splits.test, &access).unwrap();
    let (img, _) = evaluate_protopnet(&model.image, &fx.splits.test, &access).unwrap();
    let (gen, _) = evaluate_protopnet(&model.genetic, &fx.splits.test, &access).unwrap();
    let ok = cal.success_rate == 0.0 && img.success_rate == 1.0 && gen.success_rate == 0.0;
    (
        ok,
        format!(
            "CAL α=0 success {}, image-only {}, genetic-only {}",
            cal.success_rate, img.success_rate, gen.success_rate
        ),
    )
}

fn monotonicity(fx: &CalFixture<'_>) -> Outcome {
    let model = &fx.model;
    let alphas = ExperimentConfig::default().alphas;
    let cal_res = model.residuals(&model.features(&fx.splits.cal).unwrap()).unwrap();
    let test = model.all_outputs(&model.features(&fx.splits.test).unwrap()).unwrap();
    let mut ok = alphas.len() == 10;
    let mut detail = Vec::new();
    for mode in [BandMode::PerLogit, BandMode::LInfinity] {
        let sweep = sweep_alpha(model, &cal_res, &test, &alphas, mode, false).unwrap();
        ok &= sweep.rows.len() == 10 && sweep.delta_monotone && sweep.success_monotone;
        let succ: Vec<String> = sweep.rows.iter().map(|r| format!("{:.3}", r.success_rate)).collect();
        detail.push(format!(
            "{mode:?}: δ monotone {}, success monotone {} [{}]",
            sweep.delta_monotone,
            sweep.success_monotone,
            succ.join(" ")
        ));
    }
    (ok, detail.join("; "))
}

fn mean_success(summary: &[AblationSummary], label: &str) -> f64 {
    summary.iter().find(|s| s.label == label).expect("ablation cell").mean_success_rate
}

fn ablations() -> Outcome {
    let mut cal_rows = Vec::new();
    let mut alp_rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let ds = cal_dataset(seed);
        let s = splits(&ds);
        let (img, gen) = common::protopnets(&s.train, seed);
        let base = CalConfig {
            seed,
            ..CalConfig::default()
        };
        cal_rows.extend(cal_ablation(&img, &gen, &s.train, &s.cal, &s.test, &base, 0.05).unwrap());

        let ds = common::alp_dataset(seed);
        let s = splits(&ds);
        let (img, gen) = common::prototrees(&s.train, seed);
        let base = AlpConfig {
            seed,
            ..AlpConfig::default()
        };
        alp_rows.extend(alp_ablation(&img, &gen, &s.train, &s.test, &base).unwrap());
    }
    let cal = ablation_summary(&cal_rows);
    let alp = ablation_summary(&alp_rows);
    let (cal_both, cal_none) = (mean_success(&cal, "Mar. + Mod. Loss"), mean_success(&cal, "Neither Loss"));
    let (alp_both, alp_none) = (mean_success(&alp, "Var. + Rout. Loss"), mean_success(&alp, "Neither Loss"));
    let ok = cal_both > cal_none && alp_both >= alp_none;
    (
        ok,
        format!(
            "CAL success {cal_both:.4} vs neither {cal_none:.4}; ALP success {alp_both:.4} vs neither {alp_none:.4}"
        ),
    )
}

fn alp_trade_off() -> Outcome {
    let t0 = Instant::now();
    let ds = common::alp_dataset(1);
    let s = splits(&ds);
    let (img, gen) = common::prototrees(&s.train, 1);
    let img_bal = evaluate_prototree(&img, &s.test).unwrap().balanced_accuracy;
    let gen_bal = evaluate_prototree(&gen, &s.test).unwrap().balanced_accuracy;
    let cfg = AlpConfig {
        seed: 1,
        ..AlpConfig::default()
    };
    let (alp, _) = train_alp(&img, &gen, &s.train, &cfg).unwrap();
    let (rep, _) = evaluate_alp(&alp, &s.test, &GeneticAccess::new()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let ok = rep.balanced_accuracy >= img_bal + 0.05
        && rep.success_rate >= 0.5
        && rep.balanced_accuracy <= gen_bal
        && secs < 300.0;
    (
        ok,
        format!(
            "ALP {:.4} (success {:.4}), image tree {img_bal:.4}, genetic tree {gen_bal:.4}; {secs:.1}s",
            rep.balanced_accuracy, rep.success_rate
        ),
    )
}

fn random_tree(rng: &mut ChaCha8Rng, depth: usize, k: usize, routing: Routing) -> Tree {
    let mut tree = Tree::uniform(depth, k, routing).unwrap();
    for l in 0..tree.n_leaves() {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        tree.leaf_mut(l).iter_mut().zip(&raw).for_each(|(d, r)| *d = r / total);
    }
    tree
}

fn traversal_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let depth = rng.random_range(0..=5);
        let k = rng.random_range(1..=6);
        let tree = random_tree(&mut rng, depth, k, Routing::Unimodal(Modality::Image));
        let s: Vec<f64> = (0..tree.n_internal()).map(|_| rng.random::<f64>()).collect();
        let w = leaf_weights(&tree, &s).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let polar: Vec<f64> = s.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let hard = hard_traverse(&tree, &s).unwrap();
        let soft = soft_distribution(&tree, &polar).unwrap();
        let soft_logits = soft_traverse(&tree, &polar).unwrap();
        let same = soft.as_slice() == tree.leaf(hard.leaf)
            && soft_logits == tree.leaf_logits(hard.leaf)
            && hard_traverse(&tree, &polar).unwrap().leaf == hard.leaf;
        mismatches += (!same) as usize;
    }
    (
        worst_sum <= 1e-12 && mismatches == 0,
        format!("max |Σw − 1| = {worst_sum:.2e}, polarized mismatches {mismatches}/1000"),
    )
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_embedding(rng: &mut ChaCha8Rng, depth: usize, h: usize, w: usize) -> EmbeddingMap {
    let data = (0..depth * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMap::new(Modality::Image, depth, h, w, data).unwrap()
}

fn small_protopnet(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> ProtoPNet {
    let assignment: Vec<usize> = (0..2 * k).map(|p| p / 2).collect();
    let protos = PrototypeSet::new(dim, random_vec(rng, 2 * k * dim, -1.0, 1.0), Some(assignment.clone())).unwrap();
    let mut head = LinearHead::class_connected(k, &assignment, -0.5);
    head.weights.iter_mut().for_each(|w| *w += rng.random_range(-0.2..0.2));
    ProtoPNet {
        k,
        modality: Modality::Image,
        protos,
        head,
    }
}

fn gradient_suite(fx: &CalFixture<'_>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();
    let check = |f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], g: &[f64]| gradient_check(f, x, g, FD_EPS, FD_TOL);

    // CAL objective on real features, all four parameter blocks.
    let mut model = fx.model.clone();
    model.m = random_vec(&mut rng, 16, -1.5, 1.5);
    let features = model.features(&fx.splits.train[..24]).unwrap();
    let band = model
        .calibrate(&model.features(&fx.splits.cal).unwrap(), 0.3, BandMode::PerLogit, false)
        .unwrap();
    let batch: Vec<usize> = (0..features.len()).collect();
    let ce_only = CalConfig {
        lambda_modality: 0.0,
        lambda_margin: 0.0,
        lambda_predictor: 0.0,
        ..CalConfig::default()
    };
    let full = CalConfig {
        lambda_modality: 1.0,
        lambda_margin: 1.0,
        lambda_predictor: 1.0,
        ..CalConfig::default()
    };
    for (name, cfg) in [("CE∘mix", &ce_only), ("CAL objective", &full)] {
        let g = cal_batch_loss(&model, &band, &features, &batch, cfg).unwrap();
        let loss_with = |edit: &dyn Fn(&mut CalModel)| {
            let mut m2 = model.clone();
            edit(&mut m2);
            cal_batch_loss(&m2, &band, &features, &batch, cfg).unwrap().loss
        };
        let blocks: [(&[f64], &[f64]); 4] = [
            (&model.m, &g.d_m),
            (&model.image.head.weights, &g.d_image_head),
            (&model.genetic.head.weights, &g.d_genetic_head),
            (&model.predictor.weights, &g.d_predictor),
        ];
        let mut worst: Option<GradCheckReport> = None;
        for (b, (x, grad)) in blocks.into_iter().enumerate() {
            let r = check(
                &mut |v| {
                    loss_with(&|m2: &mut CalModel| match b {
                        0 => m2.m = v.to_vec(),
                        1 => m2.image.head.weights = v.to_vec(),
                        2 => m2.genetic.head.weights = v.to_vec(),
                        _ => m2.predictor.weights = v.to_vec(),
                    })
                },
                x,
                grad,
            );
            if worst.is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        reports.push((name, worst.unwrap()));
    }

    let mut worst_of = |name: &'static str, rs: Vec<GradCheckReport>| {
        let w = rs.into_iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
        reports.push((name, w));
    };

    let mut rs = Vec::new();
    for _ in 0..20 {
        let k = rng.random_range(2..8);
        let y = random_vec(&mut rng, k, -3.0, 3.0);
        let c = rng.random_range(0..k);
        let (_, g) = margin_loss(&y, c).unwrap();
        rs.push(check(&mut |v| margin_loss(v, c).unwrap().0, &y, &g));
    }
    worst_of("margin", rs);

    let mut rs = Vec::new();
    for _ in 0..20 {
        let m = random_vec(&mut rng, 5, -4.0, 4.0);
        let (_, g) = modality_loss(&m);
        rs.push(check(&mut |v| modality_loss(v).0, &m, &g));
    }
    worst_of("modality", rs);

    let mut rs = Vec::new();
    for _ in 0..20 {
        let t = random_vec(&mut rng, 6, -2.0, 2.0);
        let p = random_vec(&mut rng, 6, -2.0, 2.0);
        let (_, g) = predictor_loss(&t, &p);
        rs.push(check(&mut |v| predictor_loss(&t, v).0, &p, &g));
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        rs.push(check(&mut |v| predictor_loss(v, &p).0, &t, &neg));
    }
    worst_of("predictor", rs);

    let mut rs = Vec::new();
    for _ in 0..10 {
        let net = small_protopnet(&mut rng, 3, 4);
        let patches: Vec<Patches> = (0..6).map(|_| Patches::new(&random_embedding(&mut rng, 4, 2, 3))).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let batch: Vec<usize> = (0..6).collect();
        let cfg = ProtoPNetConfig::default();
        let g = protopnet_batch_loss(&net, &patches, &labels, &batch, &cfg).unwrap();
        rs.push(check(
            &mut |v| {
                let mut n2 = net.clone();
                n2.protos.vectors = v.to_vec();
                protopnet_batch_loss(&n2, &patches, &labels, &batch, &cfg).unwrap().loss
            },
            &net.protos.vectors,
            &g.d_protos,
        ));
        rs.push(check(
            &mut |v| {
                let mut n2 = net.clone();
                n2.head.weights = v.to_vec();
                protopnet_batch_loss(&n2, &patches, &labels, &batch, &cfg).unwrap().loss
            },
            &net.head.weights,
            &g.d_head,
        ));
    }
    worst_of("cluster/separation", rs);

    let mut rs = Vec::new();
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let d = rng.random_range(2..6);
        let p = PrototypeSet::new(d, random_vec(&mut rng, n * d, -1.0, 1.0), None).unwrap();
        let (_, g) = orthogonality_loss(&p).unwrap();
        rs.push(check(
            &mut |v| orthogonality_loss(&PrototypeSet::new(d, v.to_vec(), None).unwrap()).unwrap().0,
            &p.vectors,
            &g,
        ));
    }
    worst_of("orthogonality", rs);

    let mut rs = Vec::new();
    for _ in 0..20 {
        let (p, h, w) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..4));
        let map = SimilarityMap {
            prototypes: p,
            height: h,
            width: w,
            data: random_vec(&mut rng, p * h * w, 0.0, 1.0),
        };
        let (_, g) = variability_loss(&map).unwrap();
        rs.push(check(
            &mut |v| {
                let m2 = SimilarityMap {
                    data: v.to_vec(),
                    ..map.clone()
                };
                variability_loss(&m2).unwrap().0
            },
            &map.data,
            &g,
        ));
    }
    worst_of("variability", rs);

    let mut rs = Vec::new();
    for _ in 0..20 {
        let depth = rng.random_range(1..=4);
        let k = rng.random_range(2..6);
        let tree = random_tree(&mut rng, depth, k, Routing::Unimodal(Modality::Image));
        let s = random_vec(&mut rng, tree.n_internal(), 0.05, 0.95);
        let label = rng.random_range(0..k);
        let (_, g) = soft_cross_entropy(&tree, &s, label).unwrap();
        rs.push(check(&mut |v| soft_cross_entropy(&tree, v, label).unwrap().0, &s, &g));
    }
    worst_of("CE∘soft_traverse", rs);

    let mut rs = Vec::new();
    for _ in 0..10 {
        let depth = rng.random_range(1..=3);
        let m = random_vec(&mut rng, (1 << depth) - 1, -2.0, 2.0);
        let tree = random_tree(&mut rng, depth, 4, Routing::Multimodal(m.clone()));
        let protos = PrototypeSet::new(3, random_vec(&mut rng, tree.n_internal() * 3, -1.0, 1.0), None).unwrap();
        let patches = Patches::new(&random_embedding(&mut rng, 3, 2, 4));
        let s_img = random_vec(&mut rng, tree.n_internal(), 0.05, 0.95);
        let cfg = AlpConfig::default();
        let label = rng.random_range(0..4);
        let g = alp_sample_loss(&tree, &protos, &s_img, &patches, label, &cfg).unwrap();
        rs.push(check(
            &mut |v| {
                let p2 = PrototypeSet::new(3, v.to_vec(), None).unwrap();
                alp_sample_loss(&tree, &p2, &s_img, &patches, label, &cfg).unwrap().loss
            },
            &protos.vectors,
            &g.d_protos,
        ));
        rs.push(check(
            &mut |v| {
                let mut t2 = tree.clone();
                t2.routing = Routing::Multimodal(v.to_vec());
                alp_sample_loss(&t2, &protos, &s_img, &patches, label, &cfg).unwrap().loss
            },
            &m,
            &g.d_m,
        ));
        let (_, gr) = routing_loss(&m, false);
        rs.push(check(&mut |v| routing_loss(v, false).0, &m, &gr));
    }
    worst_of("ALP sample objective + routing", rs);

    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed).map(|(n, _)| *n).collect();
    let detail = reports
        .iter()
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    (failed.is_empty(), detail)
}

fn cosine01_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    0.5 * (1.0 + dot / (na * nb))
}

fn patch_of(e: &EmbeddingMap, h: usize, w: usize) -> Vec<f64> {
    (0..e.depth).map(|d| e.data[(d * e.height + h) * e.width + w] as f64).collect()
}

fn sigmoid_oracle(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trials = 150;
    let mut worst = [0.0f64; 5];
    let mut structural = [0usize; 5];
    for _ in 0..trials {
        let (d, h, w) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4));
        let n_protos = rng.random_range(1..5);
        let e = random_embedding(&mut rng, d, h, w);
        let assignment: Vec<usize> = (0..n_protos).map(|_| rng.random_range(0..2)).collect();
        let protos = PrototypeSet::new(d, random_vec(&mut rng, n_protos * d, -1.0, 1.0), Some(assignment)).unwrap();

        let map = similarity_map(&e, &protos).unwrap();
        let pooled = max_pool(&map);
        for p in 0..n_protos {
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for hh in 0..h {
                for ww in 0..w {
                    let s = cosine01_oracle(protos.vector(p), &patch_of(&e, hh, ww));
                    worst[0] = worst[0].max((s - map.get(p, hh, ww)).abs());
                    if s > best.0 {
                        best = (s, (hh, ww));
                    }
                }
            }
            worst[1] = worst[1].max((best.0 - pooled.values[p]).abs());
            structural[1] += (best.1 != pooled.argmax[p]) as usize;
        }

        let n_cand = rng.random_range(1..4);
        let cands: Vec<EmbeddingMap> = (0..n_cand).map(|_| random_embedding(&mut rng, d, h, w)).collect();
        let labels: Vec<usize> = (0..n_cand).map(|_| rng.random_range(0..2)).collect();
        let candidates: Vec<Candidate<'_>> = cands
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (emb, &label))| Candidate {
                sample_id: 100 + i as u64,
                label,
                embedding: emb,
            })
            .collect();
        let restrict = rng.random_bool(0.5);
        match project_prototypes(&protos, &candidates, restrict) {
            Ok(projected) => {
                for p in 0..n_protos {
                    let class = protos.class_of(p);
                    let mut best: Option<(f64, usize, usize, usize)> = None;
                    for (ci, emb) in cands.iter().enumerate() {
                        if restrict && class.is_some_and(|c| c != labels[ci]) {
                            continue;
                        }
                        for hh in 0..h {
                            for ww in 0..w {
                                let s = cosine01_oracle(protos.vector(p), &patch_of(emb, hh, ww));
                                if best.is_none_or(|b| s > b.0) {
                                    best = Some((s, ci, hh, ww));
                                }
                            }
                        }
                    }
                    let (_, ci, hh, ww) = best.expect("projection succeeded so a candidate exists");
                    let expect = patch_of(&cands[ci], hh, ww);
                    let got = projected.vector(p);
                    let diff = expect.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst[2] = worst[2].max(diff);
                    let prov = projected.provenance[p].unwrap();
                    structural[2] += (prov.sample_id != 100 + ci as u64 || prov.h != hh || prov.w != ww) as usize;
                }
            }
            Err(_) => {
                let any_missing = (0..n_protos).any(|p| restrict && !labels.contains(&protos.class_of(p).unwrap()));
                structural[2] += (!any_missing) as usize;
            }
        }

        let n = rng.random_range(1..40);
        let k = rng.random_range(1..5);
        let residuals: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, k, -3.0, 3.0)).collect();
        let alpha = rng.random_range(0.0..0.99);
        for (mode, bonf) in [(BandMode::PerLogit, false), (BandMode::PerLogit, true), (BandMode::LInfinity, false)] {
            let band = calibrate(&residuals, alpha, mode, bonf).unwrap();
            let scores: Vec<Vec<f64>> = match mode {
                BandMode::PerLogit => (0..k).map(|j| residuals.iter().map(|r| r[j].abs()).collect()).collect(),
                BandMode::LInfinity => {
                    vec![residuals.iter().map(|r| r.iter().map(|x| x.abs()).fold(0.0, f64::max)).collect()]
                }
            };
            let a = if bonf { alpha / k as f64 } else { alpha };
            let need = (n as f64 + 1.0) * (1.0 - a);
            for (col, &got) in scores.iter().zip(&band.delta) {
                // Smallest score whose count of scores at or below it reaches the target.
                let expect = col
                    .iter()
                    .copied()
                    .filter(|&v| col.iter().filter(|&&u| u <= v).count() as f64 >= need - 1e-9)
                    .fold(f64::INFINITY, f64::min);
                if expect.is_infinite() || got.is_infinite() {
                    structural[3] += (expect != got) as usize;
                } else {
                    worst[3] = worst[3].max((expect - got).abs());
                }
            }
        }

        let kk = rng.random_range(2..7);
        let y_img = random_vec(&mut rng, kk, -4.0, 4.0);
        let y_hat = random_vec(&mut rng, kk, -4.0, 4.0);
        let n_delta = if rng.random_bool(0.5) { 1 } else { kk };
        let delta = random_vec(&mut rng, n_delta, 0.0, 2.0);
        let n_m = if rng.random_bool(0.5) { 1 } else { kk };
        let m = random_vec(&mut rng, n_m, -5.0, 5.0);
        let c = rng.random_range(0..kk);
        let got = worst_case_logits(&y_img, &y_hat, &delta, &m, c);
        for j in 0..kk {
            let s = sigmoid_oracle(if m.len() == 1 { m[0] } else { m[j] });
            let dj = if delta.len() == 1 { delta[0] } else { delta[j] };
            let ends = [y_hat[j] - dj, y_hat[j] + dj].map(|g| s * y_img[j] + (1.0 - s) * g);
            let expect = if j == c { ends[0].min(ends[1]) } else { ends[0].max(ends[1]) };
            worst[4] = worst[4].max((expect - got[j]).abs());
        }
    }
    let names = ["cosine map", "max pool", "projection", "quantile", "worst-case logits"];
    let ok = worst.iter().all(|&w| w <= 1e-10) && structural.iter().all(|&s| s == 0);
    let detail = names
        .iter()
        .zip(worst.iter().zip(&structural))
        .map(|(n, (w, s))| format!("{n} {w:.1e}{}", if *s > 0 { format!(" ({s} mismatches)") } else { String::new() }))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("{trials} instances each: {detail}"))
}

fn run_cli(args: &[&str], out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_protoabstain"))
        .args(args)
        .arg("--output")
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// Runs twice into the same path, so the recorded config is identical too.
fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for cmd in ["train-cal", "train-alp"] {
            if !run_cli(&[cmd, "--seed", "3"], &dir) {
                return (false, format!("{cmd} failed"));
            }
        }
        snapshots.push(files_under(&dir));
        std::fs::remove_dir_all(&dir).unwrap();
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    let differing: Vec<&str> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let required = ["cal.ckpt", "alp.ckpt", "decisions.csv", "paths.csv", "manifest.json"];
    let present = required.iter().all(|r| a.iter().any(|(n, _)| n == r));
    (
        a.len() == b.len() && differing.is_empty() && present,
        format!("{} files compared, differing: {:?}", a.len(), differing),
    )
}

fn main() {
    let t0 = Instant::now();
    let ds = cal_dataset(1);
    let s = splits(&ds);
    let model = common::cal_model(&s, 1);
    let fx = CalFixture {
        splits: s,
        model,
        build_secs: t0.elapsed().as_secs_f64(),
    };

    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion<'_>> = vec![
        ("conformal coverage", Box::new(|| coverage(&fx))),
        ("abstention soundness", Box::new(|| abstention_soundness(&fx))),
        ("boundary success rates", Box::new(|| boundary_rows(&fx))),
        ("monotonicity in alpha", Box::new(|| monotonicity(&fx))),
        ("directional ablations", Box::new(ablations)),
        ("ALP cost/accuracy trade", Box::new(alp_trade_off)),
        ("traversal identities", Box::new(traversal_identities)),
        ("gradient suite", Box::new(|| gradient_suite(&fx))),
        ("oracle equivalences", Box::new(oracle_equivalences)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (ok, detail) = run();
        failures += (!ok) as usize;
        println!("{} {:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
