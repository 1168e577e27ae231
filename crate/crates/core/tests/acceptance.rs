//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unibind_core::centers::{localize, prompt_map, sweep_k};
use unibind_core::eval::{evaluate_retrieval, Direction, Relevance};
use unibind_core::pipeline::{Phase, MANIFEST_FILE};
use unibind_core::synthetic::{desk_train_config, BUNDLE_CONFIG_FILE};
use unibind_core::train::{gradient_check, random_gradcheck_setup};
use unibind_core::{
    cosine, evaluate_classification, generate_synthetic, info_nce_loss, run_pipeline, top_k, ubem, Anchors,
    EmbeddingMatrix, KnowledgeBase, KnowledgeRecord, PipelineConfig, Source, SyntheticSpec, TrainConfig,
};

type Outcome = (bool, String);
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingMatrix::new(dim, data, None).unwrap()
}

fn ac1_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let dim_in = rng.random_range(4..=32);
        let dim_out = rng.random_range(4..=32);
        let batch = rng.random_range(2..=16);
        let config = TrainConfig {
            symmetric_loss: seed % 2 == 1,
            ..Default::default()
        };
        let (adapter, pairs, kb) = random_gradcheck_setup(dim_in, dim_out, batch, seed).unwrap();
        match gradient_check(&adapter, &pairs, &kb, &config) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                if !r.pass {
                    failures.push(format!(
                        "seed {seed} ({dim_in}->{dim_out}, B={batch}): {:.3e}",
                        r.max_rel_error
                    ));
                }
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 30.0;
    (
        ok,
        format!(
            "100 seeds, max rel error {worst:.3e} (< 1e-3), {secs:.1}s (< 30s){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {failures:?}")
            }
        ),
    )
}

fn ac2_loss_identities() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for &b in &[2usize, 4, 8, 64] {
        let dim = 64;
        let v: Vec<f64> = (0..dim).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let row = unibind_core::normalize(&v).unwrap();
        let m = EmbeddingMatrix::new(dim, row.repeat(b), None).unwrap();
        let (loss, _) = info_nce_loss(&m, &m, 0.07).unwrap();
        let err = (loss - (b as f64).ln()).abs();
        ok &= err < 1e-9;
        details.push(format!("B={b} |loss-lnB|={err:.1e}"));

        let mut eye = vec![0.0; b * dim];
        for i in 0..b {
            eye[i * dim + i] = 1.0;
        }
        let e = EmbeddingMatrix::new(dim, eye, None).unwrap();
        let (sat, _) = info_nce_loss(&e, &e, 0.01).unwrap();
        ok &= sat < 1e-6;
        details.push(format!("saturated {sat:.1e}"));
    }
    (ok, details.join(", "))
}

fn ac3_top_k_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let dim = 16;
        // a third of the keys duplicate earlier keys so exact ties occur
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(1000);
        for i in 0..1000 {
            if i > 0 && rng.random_bool(1.0 / 3.0) {
                let j = rng.random_range(0..i);
                rows.push(rows[j].clone());
            } else {
                rows.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            }
        }
        let keys = EmbeddingMatrix::from_rows(dim, &rows).unwrap();
        let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut oracle: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i, cosine(&query, r).unwrap()))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ties += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        for &k in &[1usize, 50, 999, 1000] {
            let got = top_k(&query, &keys, k).unwrap();
            let same = got.len() == k
                && got
                    .iter()
                    .zip(&oracle)
                    .all(|(g, o)| g.index == o.0 && g.score.to_bits() == o.1.to_bits());
            mismatches += (!same) as usize;
        }
    }
    (
        mismatches == 0,
        format!("10 seeds x k in {{1,50,999,1000}}, {mismatches} mismatches, {ties} tied neighbours exercised"),
    )
}

fn ac4_prefix_property() -> Outcome {
    let spec = SyntheticSpec {
        categories: 8,
        descriptions_per_class: 120,
        seed: 4,
        ..Default::default()
    };
    let bundle = generate_synthetic(&spec).unwrap();
    let kb = KnowledgeBase::from_parts(bundle.records.clone(), bundle.text_embeddings.clone()).unwrap();
    let prompts = prompt_map(&bundle.prompts).unwrap();
    let ks = [10usize, 25, 50, 100];
    let sets = sweep_k(&kb, &prompts, &ks, None).unwrap();
    let mut violations = 0;
    let mut checked = 0;
    for cat in prompts.keys() {
        for w in ks.windows(2) {
            let small = &sets[&w[0]].centers[cat];
            let large = &sets[&w[1]].centers[cat];
            checked += 1;
            let prefix = large.member_rows.len() >= small.member_rows.len()
                && large.member_rows[..small.member_rows.len()] == small.member_rows[..]
                && large.member_scores[..small.member_scores.len()] == small.member_scores[..];
            violations += (!prefix) as usize;
        }
        for &k in &ks {
            violations += (sets[&k].centers[cat].member_rows.len() != k) as usize;
        }
    }
    (
        violations == 0,
        format!(
            "{} categories, {checked} nested pairs, {violations} violations",
            prompts.len()
        ),
    )
}

fn ac5_boundary_case() -> Outcome {
    let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
    let members = [("A", 0.0), ("A", 100.0), ("B", 60.0), ("B", 80.0)];
    let records = members
        .iter()
        .enumerate()
        .map(|(i, (c, _))| KnowledgeRecord {
            id: format!("d{i}"),
            category: c.to_string(),
            description: format!("description {i}"),
            source: Source::LlmCategory,
            generator: None,
        })
        .collect();
    let emb = EmbeddingMatrix::from_rows(2, members.iter().map(|(_, d)| at(*d))).unwrap();
    let kb = KnowledgeBase::from_parts(records, emb).unwrap();
    let prompt_rows = EmbeddingMatrix::from_rows(2, [at(50.0), at(70.0)])
        .unwrap()
        .with_labels(vec!["A".into(), "B".into()])
        .unwrap();
    let centers = localize(&kb, &prompt_map(&prompt_rows).unwrap(), 2, None).unwrap();
    let mut sets = BTreeMap::new();
    sets.insert(
        "A".to_string(),
        EmbeddingMatrix::from_rows(2, [at(0.0), at(100.0)]).unwrap(),
    );
    sets.insert(
        "B".to_string(),
        EmbeddingMatrix::from_rows(2, [at(60.0), at(80.0)]).unwrap(),
    );

    let query = EmbeddingMatrix::from_rows(2, [at(95.0)]).unwrap();
    let labels = vec!["A".to_string()];
    let cm = Anchors::from_centers(&centers).unwrap();
    let pm = Anchors::from_prompt_sets(&sets).unwrap();
    let p_cm = cm.score("q", query.row(0)).unwrap();
    let p_pm = pm.score("q", query.row(0)).unwrap();
    let (r_cm, _) = evaluate_classification(&query, &labels, &cm).unwrap();
    let ok = p_cm.predicted_category == "A" && p_pm.predicted_category == "B" && r_cm.top1_accuracy == 1.0;
    (
        ok,
        format!(
            "center_max -> {} (A {:.6}, B {:.6}); prompt_mean -> {} (A {:.6}, B {:.6}); truth A",
            p_cm.predicted_category,
            p_cm.per_category_scores["A"],
            p_cm.per_category_scores["B"],
            p_pm.predicted_category,
            p_pm.per_category_scores["A"],
            p_pm.per_category_scores["B"],
        ),
    )
}

fn zero_shot_accuracy(bundle: &unibind_core::SyntheticBundle, kb: &KnowledgeBase, k: usize) -> f64 {
    let centers = localize(kb, &prompt_map(&bundle.prompts).unwrap(), k, None).unwrap();
    let anchors = Anchors::from_centers(&centers).unwrap();
    let (mut correct, mut total) = (0, 0);
    for m in &bundle.modalities {
        let (r, _) = evaluate_classification(&m.test, &m.test_categories, &anchors).unwrap();
        correct += r.correct;
        total += r.sample_count;
    }
    correct as f64 / total as f64
}

fn ac6_centers_beat_single_description() -> Outcome {
    let (mut k50, mut k1) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let spec = SyntheticSpec {
            categories: 20,
            descriptions_per_class: 200,
            modality_offset: 0.0,
            seed: 600 + seed,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let kb = KnowledgeBase::from_parts(bundle.records.clone(), bundle.text_embeddings.clone()).unwrap();
        k50.push(zero_shot_accuracy(&bundle, &kb, 50));
        k1.push(zero_shot_accuracy(&bundle, &kb, 1));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&k50), mean(&k1));
    (
        a >= b,
        format!("mean accuracy k=50 {a:.4} vs k=1 {b:.4} over 5 seeds (per seed k=50 {k50:.3?}, k=1 {k1:.3?})"),
    )
}

fn ac7_training_closes_gap() -> Outcome {
    let mut gap_down = 0;
    let (mut pre_r10, mut post_r10) = (Vec::new(), Vec::new());
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed: 700 + seed,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        bundle.write_to(dir.path(), 50, &desk_train_config(seed)).unwrap();
        let (config, base) = PipelineConfig::load(dir.path().join(BUNDLE_CONFIG_FILE)).unwrap();
        let summary = run_pipeline(&config, &base, &dir.path().join("run")).unwrap();
        let pre = summary.diagnostics_pre.as_ref().unwrap().modality_gap;
        let post = summary.diagnostics_post.as_ref().unwrap().modality_gap;
        gap_down += (post < pre) as usize;
        let r = |phase| {
            (summary.recall("m0", "m1", phase, 10).unwrap() + summary.recall("m1", "m0", phase, 10).unwrap()) / 2.0
        };
        pre_r10.push(r(Phase::Pre));
        post_r10.push(r(Phase::Post));
        lines.push(format!(
            "gap {pre:.3}->{post:.3} R@10 {:.3}->{:.3}",
            r(Phase::Pre),
            r(Phase::Post)
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&pre_r10), mean(&post_r10));
    (
        gap_down >= 9 && b > a,
        format!(
            "gap reduced in {gap_down}/10 seeds (>= 9); mean cross-modal R@10 {a:.4} -> {b:.4}; [{}]",
            lines.join("; ")
        ),
    )
}

fn ac8_retrieval_oracle() -> Outcome {
    let ks = [1usize, 5, 10, 20];
    let mut mismatches = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let dim = 12;
        let queries = random_matrix(&mut rng, 200, dim);
        let mut gallery = random_matrix(&mut rng, 500, dim);
        // duplicate some gallery rows so ties are exercised
        let mut data = gallery.data().to_vec();
        for _ in 0..50 {
            let (a, b) = (rng.random_range(0..500), rng.random_range(0..500));
            let src = data[a * dim..(a + 1) * dim].to_vec();
            data[b * dim..(b + 1) * dim].copy_from_slice(&src);
        }
        gallery = EmbeddingMatrix::new(dim, data, None).unwrap();
        let qids: Vec<String> = (0..200).map(|i| format!("q{i}")).collect();
        let gids: Vec<String> = (0..500).map(|i| format!("g{i}")).collect();
        let mut relevance = Relevance::new();
        for q in &qids {
            let n = rng.random_range(1..=5);
            let mut all: Vec<usize> = (0..500).collect();
            all.shuffle(&mut rng);
            relevance.insert(
                q.clone(),
                all[..n].iter().map(|&i| gids[i].clone()).collect::<BTreeSet<_>>(),
            );
        }
        let report = evaluate_retrieval(&queries, &qids, &gallery, &gids, &relevance, &ks, Direction::AToB).unwrap();

        let mut hits = [0usize; 4];
        for (i, q) in qids.iter().enumerate() {
            let mut order: Vec<(usize, f64)> = (0..500)
                .map(|j| (j, cosine(queries.row(i), gallery.row(j)).unwrap()))
                .collect();
            order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let first = order
                .iter()
                .position(|(j, _)| relevance[q].contains(&gids[*j]))
                .unwrap();
            for (h, &k) in hits.iter_mut().zip(&ks) {
                *h += (first < k) as usize;
            }
        }
        for (h, k) in hits.iter().zip(&ks) {
            mismatches += (report.recall_at[k] != *h as f64 / 200.0) as usize;
        }
    }
    (
        mismatches == 0,
        format!("10 seeds, 200x500, R@{{1,5,10,20}}: {mismatches} mismatches"),
    )
}

fn collect_files(root: &Path, rel: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(root.join(rel)).unwrap() {
        let entry = entry.unwrap();
        let r = rel.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            collect_files(root, &r, out);
        } else {
            out.insert(r.to_string_lossy().into_owned(), std::fs::read(root.join(&r)).unwrap());
        }
    }
}

fn ac9_determinism() -> Outcome {
    let spec = SyntheticSpec {
        categories: 6,
        samples_per_class_per_modality: 10,
        descriptions_per_class: 30,
        seed: 9,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 1e-2,
        seed: 9,
        ..Default::default()
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&spec)
            .unwrap()
            .write_to(dir.path(), 10, &train)
            .unwrap();
        let (mut config, base) = PipelineConfig::load(dir.path().join(BUNDLE_CONFIG_FILE)).unwrap();
        config.dump_projection = true;
        run_pipeline(&config, &base, &dir.path().join("run")).unwrap();
        let mut files = BTreeMap::new();
        collect_files(&dir.path().join("run"), Path::new(""), &mut files);
        runs.push(files);
    }
    let compared: Vec<&String> = runs[0]
        .keys()
        .filter(|k| k.ends_with(".json") || k.ends_with(".adapter"))
        .collect();
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let ok = runs[0].len() == runs[1].len() && differing.is_empty() && runs[0].contains_key(MANIFEST_FILE);
    (
        ok,
        format!(
            "{} files ({} reports/adapters) byte-identical across two runs; differing: {differing:?}",
            runs[0].len(),
            compared.len()
        ),
    )
}

fn ac10_round_trips() -> Outcome {
    let mut problems = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let rows = rng.random_range(1..200);
        let dim = rng.random_range(1..64);
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        let labels = (seed % 2 == 0).then(|| (0..rows).map(|i| format!("row-{i}-ü")).collect());
        let m = EmbeddingMatrix::new(dim, data, labels).unwrap();
        let path = dir.path().join(format!("m{seed}.ubem"));
        ubem::save(&path, &m).unwrap();
        let back = ubem::load(&path).unwrap();
        let bits = |m: &EmbeddingMatrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&back) != bits(&m) || back.labels() != m.labels() {
            problems.push(format!("ubem seed {seed}"));
        }
        if ubem::to_bytes(&back).unwrap() != std::fs::read(&path).unwrap() {
            problems.push(format!("ubem bytes seed {seed}"));
        }
    }

    let bundle = generate_synthetic(&SyntheticSpec {
        descriptions_per_class: 20,
        ..Default::default()
    })
    .unwrap();
    let kb = KnowledgeBase::from_parts(bundle.records.clone(), bundle.text_embeddings.clone()).unwrap();
    let (d1, d2) = (dir.path().join("kb1"), dir.path().join("kb2"));
    kb.export(&d1).unwrap();
    let rebuilt = KnowledgeBase::load_dir(&d1).unwrap();
    rebuilt.export(&d2).unwrap();
    let bits = |k: &KnowledgeBase| k.embeddings().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if rebuilt.records() != kb.records() {
        problems.push("kb record order".into());
    }
    if bits(&rebuilt) != bits(&kb) {
        problems.push("kb embedding bits".into());
    }
    for f in ["records.jsonl", "embeddings.ubem"] {
        if std::fs::read(d1.join(f)).unwrap() != std::fs::read(d2.join(f)).unwrap() {
            problems.push(format!("kb {f} bytes"));
        }
    }
    (
        problems.is_empty(),
        format!("10 UBEM matrices and a {}-record KB; problems: {problems:?}", kb.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("AC1", "gradient check", ac1_gradient_check),
        ("AC2", "loss identities", ac2_loss_identities),
        ("AC3", "top-k oracle", ac3_top_k_oracle),
        ("AC4", "center prefix property", ac4_prefix_property),
        ("AC5", "center-max vs prompt-mean boundary", ac5_boundary_case),
        (
            "AC6",
            "k=50 centers vs single description",
            ac6_centers_beat_single_description,
        ),
        ("AC7", "training closes modality gap", ac7_training_closes_gap),
        ("AC8", "retrieval oracle", ac8_retrieval_oracle),
        ("AC9", "pipeline determinism", ac9_determinism),
        ("AC10", "format round trips", ac10_round_trips),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let start = Instant::now();
        let (ok, detail) = f();
        failed += (!ok) as usize;
        println!(
            "[{}] {id} {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
