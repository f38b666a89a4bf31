//! Acceptance suite: every release-gating check with its pinned tolerance.
//!
//! The fast checks run as part of the normal test suite. The checks that
//! require training reference-scale models on a single core take hours each
//! and are `#[ignore]`d; run them explicitly with
//!
//! ```text
//! cargo test --release --test acceptance -- --ignored --test-threads 1
//! ```
//!
//! Set `STARPLAN_PROGRESS=1` to watch their training curves on stderr.

use starplan::encoding::{encode_input, input_len, Mode, Vocabulary};
use starplan::evalstats::{
    critical_accuracy, lpc, skill, SkillScore, ThresholdTable, ALPHA, K_SET,
};
use starplan::model::{loss_and_grad, ModelConfig, Parameters, TrainBatch};
use starplan::oracle::fd_gradient;
use starplan::probe::{average_br, backtracking_ratio, partition_tokens};
use starplan::promptgen::{build_eval_set, PromptMode};
use starplan::rng::stream_rng;
use starplan::stargraph::{build_dataset, fingerprint, sample_instance, DatasetConfig};
use starplan::taxonomy::{breakdown_from_predictions, classify_error, ErrorCategory};
use starplan::training::{
    detect_stages, exact_path_accuracy, first_hop_accuracy, train, train_icot, StageSchedule,
    StageTwoOutcome, TrainConfig, STAGE1_DELTA_FRACTION, STAGE_WINDOW,
};

use rand::Rng;
use std::time::Instant;

// ---------------------------------------------------------------------------
// 1. Threshold table: the 20 published critical values, 3 decimals, < 5 s.
// ---------------------------------------------------------------------------

#[test]
fn c01_threshold_table_matches_pinned_values() {
    let t0 = Instant::now();
    let table = ThresholdTable::build(&K_SET, &[100, 2048], ALPHA);
    // [DERIVED] frozen from the independent big-mantissa binomial oracle.
    let minimal_accuracy = [
        (100usize, [0.720, 0.550, 0.460, 0.390, 0.260]),
        (2048, [0.547, 0.379, 0.292, 0.239, 0.130]),
    ];
    let critical_skill = [
        (100usize, [0.440, 0.325, 0.280, 0.237, 0.178]),
        (2048, [0.095, 0.068, 0.056, 0.048, 0.033]),
    ];
    let mut checked = 0;
    for (n, accs) in minimal_accuracy {
        for (&k, &want) in K_SET.iter().zip(&accs) {
            let e = table.get(k, n).unwrap();
            assert_eq!(
                format!("{:.3}", e.min_accuracy),
                format!("{want:.3}"),
                "minimal accuracy k={k} N={n}: got {}",
                e.min_accuracy
            );
            checked += 1;
        }
    }
    for (n, skills) in critical_skill {
        for (&k, &want) in K_SET.iter().zip(&skills) {
            let e = table.get(k, n).unwrap();
            assert_eq!(
                format!("{:.3}", e.critical_skill),
                format!("{want:.3}"),
                "critical skill k={k} N={n}: got {}",
                e.critical_skill
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 20);
    assert!(t0.elapsed().as_secs_f64() < 5.0, "took {:?}", t0.elapsed());
}

// ---------------------------------------------------------------------------
// 2. Skill identities.
// ---------------------------------------------------------------------------

#[test]
fn c02_skill_identities() {
    for &k in &K_SET {
        assert!(
            (skill(1.0, k) - 1.0).abs() < 1e-12,
            "perfect accuracy is skill 1 at k={k}"
        );
        assert!(
            skill(1.0 / k as f64, k).abs() < 1e-12,
            "chance accuracy is skill 0 at k={k}"
        );
        let floor = -1.0 / (k as f64 - 1.0);
        assert!(
            (skill(0.0, k) - floor).abs() < 1e-12,
            "zero accuracy floor at k={k}"
        );
        // strictly monotone in accuracy
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let s = skill(i as f64 / 100.0, k);
            assert!(s > prev, "skill not monotone at k={k}");
            prev = s;
        }
    }
    let s = SkillScore::from_counts(1536, 2048, 4);
    assert!((s.accuracy - 0.75).abs() < 1e-12);
    assert!((s.skill - (0.75 - 0.25) / 0.75).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// 3. Gradient check: three randomized configs, relative error < 1e-4, < 2 min.
// ---------------------------------------------------------------------------

#[test]
fn c03_randomized_gradient_checks() {
    let t0 = Instant::now();
    let mut rng = stream_rng(0xacce97, &[3]);
    for trial in 0..3u64 {
        let heads = rng.gen_range(1..=2usize);
        let cfg = ModelConfig {
            layers: rng.gen_range(1..=3),
            heads,
            hidden: heads * rng.gen_range(4..=12) * 2,
            vocab_size: rng.gen_range(9..=19),
            max_seq_len: 12,
            dropout: if trial == 2 { 0.15 } else { 0.0 },
        };
        let p = Parameters::<f64>::init(cfg, 1000 + trial).unwrap();
        let t = rng.gen_range(5..=cfg.max_seq_len);
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                (0..t)
                    .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                    .collect()
            })
            .collect();
        let masks: Vec<Vec<bool>> = (0..3)
            .map(|_| {
                let mut m: Vec<bool> = (0..t - 1).map(|_| rng.gen_bool(0.5)).collect();
                m[t - 2] = true; // at least one active position
                m
            })
            .collect();
        let batch = TrainBatch { seqs, masks };
        let dropout =
            (cfg.dropout > 0.0).then_some(starplan::model::DropoutSpec { seed: 77 + trial });
        let (_, grads) = loss_and_grad(&p, &batch, dropout).unwrap();
        // a spread of probe indices across the whole parameter vector
        let n = p.data.len();
        let indices: Vec<usize> = (0..40).map(|i| (i * n / 40 + i) % n).collect();
        let fd = match dropout {
            None => fd_gradient(&p, &batch, &indices, 1e-5).unwrap(),
            Some(spec) => indices
                .iter()
                .map(|&i| {
                    let mut q = p.clone();
                    let h = 1e-5;
                    q.data[i] = p.data[i] + h;
                    let up = loss_and_grad(&q, &batch, Some(spec)).unwrap().0;
                    q.data[i] = p.data[i] - h;
                    let down = loss_and_grad(&q, &batch, Some(spec)).unwrap().0;
                    (up - down) / (2.0 * h)
                })
                .collect(),
        };
        for (&i, &f) in indices.iter().zip(&fd) {
            let a = grads[i];
            let rel = (a - f).abs() / (1.0 + a.abs().max(f.abs()));
            assert!(
                rel < 1e-4,
                "trial {trial} param {i}: analytic {a} vs fd {f} (rel {rel:.2e})"
            );
        }
    }
    assert!(
        t0.elapsed().as_secs_f64() < 120.0,
        "took {:?}",
        t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 4. Dataset hygiene: structure, split disjointness, exact regeneration.
// ---------------------------------------------------------------------------

#[test]
fn c04_dataset_hygiene() {
    let t0 = Instant::now();
    for seed in 0..5u64 {
        for (k, m) in [(2usize, 3usize), (5, 3), (2, 4)] {
            let cfg = DatasetConfig::new(k, m, 200, 60, 60, seed);
            let bundle = build_dataset(&cfg).unwrap();
            let vocab = cfg.vocabulary();
            let splits = [&bundle.train, &bundle.val, &bundle.test];
            for split in splits {
                for inst in split.iter() {
                    inst.validate().unwrap();
                    assert_eq!(inst.graph.k, k);
                    assert_eq!(inst.graph.m, m);
                }
            }
            // pairwise disjoint under the encoded-input fingerprint
            let fps: Vec<std::collections::HashSet<Vec<u32>>> = splits
                .iter()
                .map(|s| s.iter().map(|i| fingerprint(i, &vocab)).collect())
                .collect();
            for a in 0..3 {
                for b in (a + 1)..3 {
                    assert!(
                        fps[a].is_disjoint(&fps[b]),
                        "splits {a} and {b} overlap at k={k} m={m} seed={seed}"
                    );
                }
            }
            // byte-identical regeneration
            let again = build_dataset(&cfg).unwrap();
            for (s1, s2) in splits.iter().zip([&again.train, &again.val, &again.test]) {
                for (i1, i2) in s1.iter().zip(s2.iter()) {
                    assert_eq!(fingerprint(i1, &vocab), fingerprint(i2, &vocab));
                    assert_eq!(i1.ground, i2.ground);
                    assert_eq!(i1.answer_path, i2.answer_path);
                }
            }
        }
    }
    assert!(t0.elapsed().as_secs_f64() < 60.0, "took {:?}", t0.elapsed());
}

// ---------------------------------------------------------------------------
// 5. Latent breakthrough: G(2,3) and G(3,3) reach test skill >= 0.9 within
//    200 epochs for at least 2 of 3 seeds (train 20000, val/test 2048,
//    batch 256, lr 1e-4).
// ---------------------------------------------------------------------------

fn acceptance_train_cell(
    k: usize,
    m: usize,
    mode: Mode,
    seed: u64,
    epochs: usize,
) -> (Parameters<f32>, starplan::training::RunLog, DatasetConfig) {
    let dcfg = DatasetConfig::new(k, m, 20000, 2048, 2048, seed);
    let bundle = build_dataset(&dcfg).unwrap();
    let vocab = dcfg.vocabulary();
    let max_len = input_len(k, m) + m + 2;
    let mcfg = ModelConfig::reference(vocab.size(), max_len);
    let params = Parameters::<f32>::init(mcfg, seed).unwrap();
    let mut tcfg = TrainConfig::desk(mode, seed);
    tcfg.epochs = epochs;
    let (trained, log) = match mode {
        Mode::Icot(_) => {
            let schedule = StageSchedule::default_for(epochs, m);
            train_icot(params, &bundle, &tcfg, schedule).unwrap()
        }
        _ => train(params, &bundle, &tcfg).unwrap(),
    };
    (trained, log, dcfg)
}

fn latent_test_skill(trained: &Parameters<f32>, dcfg: &DatasetConfig) -> f64 {
    let bundle = build_dataset(dcfg).unwrap();
    let vocab = dcfg.vocabulary();
    let (c, t) = first_hop_accuracy(trained, &bundle.test, &vocab).unwrap();
    SkillScore::from_counts(c, t, dcfg.k).skill
}

#[test]
#[ignore = "trains reference-scale models for hours; run with --ignored"]
fn c05_latent_breakthrough_within_budget() {
    for (k, m) in [(2usize, 3usize), (3, 3)] {
        let mut successes = 0;
        let mut skills = Vec::new();
        for seed in 0..3u64 {
            let (trained, _, dcfg) = acceptance_train_cell(k, m, Mode::Latent, seed, 200);
            let s = latent_test_skill(&trained, &dcfg);
            eprintln!("c05 G({k},{m}) seed {seed}: test skill {s:.4}");
            skills.push(s);
            if s >= 0.9 {
                successes += 1;
            }
            if successes >= 2 {
                break;
            }
        }
        assert!(
            successes >= 2,
            "G({k},{m}): skills {skills:?}, need 2 seeds >= 0.9"
        );
    }
}

// ---------------------------------------------------------------------------
// 6. Depth wall: latent G(3,4) stays statistically at chance
//    (|test skill| < 0.068, the k=3 N=2048 critical value) and the run ends
//    in overfit or incomplete, for at least 2 of 3 seeds.
// ---------------------------------------------------------------------------

#[test]
#[ignore = "trains reference-scale models for hours; run with --ignored"]
fn c06_latent_depth_wall_k3_m4() {
    let mut consistent = 0;
    for seed in 0..3u64 {
        let (trained, log, dcfg) = acceptance_train_cell(3, 4, Mode::Latent, seed, 200);
        let s = latent_test_skill(&trained, &dcfg);
        let delta = STAGE1_DELTA_FRACTION / 3.0;
        let stages = detect_stages(&log, 3, delta, STAGE_WINDOW);
        eprintln!(
            "c06 seed {seed}: skill {s:.4}, outcome {:?}",
            stages.stage2_outcome
        );
        let at_chance = s.abs() < 0.068;
        let no_breakthrough = stages.stage2_outcome != StageTwoOutcome::Success;
        if at_chance && no_breakthrough {
            consistent += 1;
        }
        if consistent >= 2 {
            break;
        }
    }
    assert!(
        consistent >= 2,
        "need 2 of 3 seeds at chance without breakthrough"
    );
}

// ---------------------------------------------------------------------------
// 7. Chain-of-thought: exact-path accuracy 1.0 on the val split within
//    100 epochs at G(2,5) and 200 epochs at G(2,10).
// ---------------------------------------------------------------------------

#[test]
#[ignore = "trains reference-scale models for hours; run with --ignored"]
fn c07_cot_exact_path() {
    for (m, epochs) in [(5usize, 100usize), (10, 200)] {
        let (trained, _, dcfg) = acceptance_train_cell(2, m, Mode::Cot, 0, epochs);
        let bundle = build_dataset(&dcfg).unwrap();
        let vocab = dcfg.vocabulary();
        let (c, t) = exact_path_accuracy(&trained, &bundle.val, Mode::Cot, &vocab).unwrap();
        eprintln!("c07 G(2,{m}): exact-path {c}/{t}");
        assert_eq!(
            c, t,
            "G(2,{m}) exact-path accuracy must reach 1.0 within {epochs} epochs"
        );
    }
}

// ---------------------------------------------------------------------------
// 8. Internalized CoT: after the staged schedule, latent-format test skill
//    >= 0.95 at G(2,3) and >= 0.9 at G(2,4), for 2 of 3 seeds.
// ---------------------------------------------------------------------------

#[test]
#[ignore = "trains reference-scale models for hours; run with --ignored"]
fn c08_icot_internalization() {
    for (m, floor) in [(3usize, 0.95f64), (4, 0.9)] {
        let mut successes = 0;
        for seed in 0..3u64 {
            let (trained, _, dcfg) = acceptance_train_cell(2, m, Mode::Icot(0), seed, 400);
            let s = latent_test_skill(&trained, &dcfg);
            eprintln!("c08 G(2,{m}) seed {seed}: latent skill {s:.4}");
            if s >= floor {
                successes += 1;
            }
            if successes >= 2 {
                break;
            }
        }
        assert!(
            successes >= 2,
            "G(2,{m}): need 2 of 3 seeds with skill >= {floor}"
        );
    }
}

// ---------------------------------------------------------------------------
// 9. Backtracking ratio: uniform attention scores exactly 1/k (±1e-6) for
//    every k in the published set; a successfully trained G(4,3) model
//    scores above 0.40.
// ---------------------------------------------------------------------------

#[test]
fn c09_br_uniform_baseline() {
    for &k in &K_SET {
        let m = 3;
        let pool = 3 * k * m; // ample label pool
        let mut rng = stream_rng(900 + k as u64, &[1]);
        let inst = sample_instance(k, m, &mut rng, pool).unwrap();
        let vocab = Vocabulary::new(pool);
        let tokens = encode_input(&inst, &vocab).unwrap();
        let part = partition_tokens(&tokens, &inst, &vocab).unwrap();
        let t = tokens.len();
        let layers = 4;
        let trace = starplan::model::ForwardTrace {
            seq_len: t,
            vocab_size: vocab.size(),
            logits: vec![0.0; vocab.size()],
            attn: vec![vec![1.0 / t as f64; t]; layers],
        };
        let br = backtracking_ratio(&trace, &part).unwrap();
        assert!(
            (br - 1.0 / k as f64).abs() < 1e-6,
            "uniform BR at k={k}: {br} vs {}",
            1.0 / k as f64
        );
    }
}

#[test]
#[ignore = "trains a reference-scale model for hours; run with --ignored"]
fn c09_br_trained_model_concentrates() {
    let (trained, _, dcfg) = acceptance_train_cell(4, 3, Mode::Latent, 0, 200);
    let s = latent_test_skill(&trained, &dcfg);
    let bundle = build_dataset(&dcfg).unwrap();
    let probe: Vec<_> = bundle.test[..256].to_vec();
    let rep = average_br(&trained, &probe, &dcfg.vocabulary()).unwrap();
    eprintln!(
        "c09 trained G(4,3): skill {s:.4}, mean BR {:.4}",
        rep.mean_all
    );
    assert!(
        s >= 0.9,
        "BR check requires a successfully trained model (skill {s:.4})"
    );
    assert!(
        rep.mean_all > 0.40,
        "trained BR {:.4} must exceed 0.40",
        rep.mean_all
    );
}

// ---------------------------------------------------------------------------
// 10. Error taxonomy: totality over every possible wrong answer, and a
//     uniform-neighbor responder lands in one_hop for > 0.95 of >= 2048
//     errors.
// ---------------------------------------------------------------------------

#[test]
fn c10_taxonomy_totality_and_one_hop_responder() {
    // Totality: every node of the graph classifies as correct or exactly one
    // category; nothing panics, nothing is unreachable-but-hit.
    let mut rng = stream_rng(10, &[0]);
    for _ in 0..50 {
        let k = rng.gen_range(2..=5);
        let m = rng.gen_range(2..=4);
        let inst = sample_instance(k, m, &mut rng, 4 * k * m).unwrap();
        for node in inst.graph.nodes() {
            if node == inst.ground {
                continue;
            }
            let cat = classify_error(&inst, node).unwrap();
            assert!(matches!(
                cat,
                ErrorCategory::OneHop
                    | ErrorCategory::OnPath
                    | ErrorCategory::OffPath
                    | ErrorCategory::Unclassified
            ));
        }
    }

    // Uniform-neighbor responder over enough instances to collect >= 2048
    // errors: the mistakes are wrong first hops, so one_hop dominates.
    let dcfg = DatasetConfig::new(4, 3, 64, 32, 4096, 3);
    let bundle = build_dataset(&dcfg).unwrap();
    let mut rng = stream_rng(11, &[1]);
    let preds: Vec<u32> = bundle
        .test
        .iter()
        .map(|i| {
            let firsts: Vec<u32> = i.graph.branches.iter().map(|b| b[0]).collect();
            firsts[rng.gen_range(0..firsts.len())]
        })
        .collect();
    let bd = breakdown_from_predictions(&bundle.test, &preds).unwrap();
    assert!(bd.errors() >= 2048, "only {} errors collected", bd.errors());
    let one_hop_frac = bd.one_hop as f64 / bd.errors() as f64;
    assert!(one_hop_frac > 0.95, "one_hop fraction {one_hop_frac:.4}");
}

// ---------------------------------------------------------------------------
// 11. LPC vs brute force: decisions agree with an independent exact binomial
//     reference on a 1000-case randomized grid.
// ---------------------------------------------------------------------------

/// Independent upper-tail binomial probability with explicit
/// mantissa/exponent bookkeeping (units of 2^-512), sharing nothing with the
/// production log-space path.
fn reference_tail(n: usize, n_min: usize, p: f64) -> f64 {
    let q = 1.0 - p;
    // term for count = n, then walk downward multiplying by the ratio
    // C(n,i)/C(n,i+1) * q/p = (i+1)/(n-i) * q/p
    let mut mant = 1.0f64;
    let mut exp2 = 0i64;
    for _ in 0..n {
        mant *= p;
        while mant != 0.0 && mant < 1e-150 {
            mant *= 2f64.powi(512);
            exp2 -= 512;
        }
    }
    let mut sum_mant = 0.0f64;
    let mut sum_exp = exp2;
    let add = |m: f64, e: i64, sm: &mut f64, se: &mut i64| {
        if m == 0.0 {
            return;
        }
        if *sm == 0.0 {
            *sm = m;
            *se = e;
            return;
        }
        let shift = e - *se;
        if shift >= 0 {
            *sm += m * 2f64.powi(shift.min(1023) as i32);
        } else if shift > -1023 {
            *sm += m * 2f64.powi(shift as i32);
        }
        while *sm > 1e150 {
            *sm *= 2f64.powi(-512);
            *se += 512;
        }
    };
    let mut i = n;
    loop {
        add(mant, exp2, &mut sum_mant, &mut sum_exp);
        if i == n_min {
            break;
        }
        // move from count i to i-1
        mant *= (i as f64) / ((n - i + 1) as f64) * q / p;
        while mant > 1e150 {
            mant *= 2f64.powi(-512);
            exp2 += 512;
        }
        while mant != 0.0 && mant < 1e-150 {
            mant *= 2f64.powi(512);
            exp2 -= 512;
        }
        i -= 1;
    }
    sum_mant * 2f64.powi(sum_exp.clamp(-1074, 1023) as i32)
}

/// Smallest correct-count whose reference tail is <= alpha.
fn reference_min_count(n: usize, k: usize, alpha: f64) -> usize {
    let p = 1.0 / k as f64;
    let mut lo = 0usize;
    let mut hi = n;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if reference_tail(n, mid, p) <= alpha {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

#[test]
fn c11_lpc_matches_brute_force_reference() {
    let n = 2048usize;
    let thresholds: Vec<(usize, usize)> = K_SET
        .iter()
        .map(|&k| (k, reference_min_count(n, k, ALPHA)))
        .collect();
    // sanity: the reference thresholds imply the published critical accuracies
    for &(k, cnt) in &thresholds {
        let acc = critical_accuracy(k, n, ALPHA);
        assert!(
            ((cnt as f64 / n as f64) - acc).abs() < 1e-9,
            "reference and production disagree on the k={k} threshold"
        );
    }

    let mut rng = stream_rng(0x11c, &[0]);
    let mut agreements = 0usize;
    for case in 0..1000 {
        // counts clustered near the decision boundary to stress ties
        let scores: Vec<SkillScore> = thresholds
            .iter()
            .map(|&(k, cnt)| {
                let jitter = rng.gen_range(-40i64..=40);
                let c = (cnt as i64 + jitter).clamp(0, n as i64) as usize;
                SkillScore::from_counts(c, n, k)
            })
            .collect();
        let got = lpc(3, &scores, n, ALPHA, &K_SET).unwrap();
        let want = scores
            .iter()
            .zip(&thresholds)
            .any(|(s, &(_, cnt))| (s.accuracy * n as f64).round() as usize >= cnt);
        assert_eq!(got.decision, want, "case {case}: scores {scores:?}");
        agreements += 1;
    }
    assert_eq!(agreements, 1000);
}

// ---------------------------------------------------------------------------
// 12. Prompt goldens: templates render byte-exactly.
// ---------------------------------------------------------------------------

#[test]
fn c12_prompt_goldens_byte_exact() {
    let dcfg = DatasetConfig::new(3, 3, 64, 16, 4, 77);
    let bundle = build_dataset(&dcfg).unwrap();
    for mode in [
        PromptMode::Direct,
        PromptMode::Cot,
        PromptMode::ZeroShot,
        PromptMode::FewShot,
    ] {
        let records = build_eval_set(&bundle, mode).unwrap();
        let mut rendered = String::new();
        for r in &records {
            rendered.push_str(&format!("=== id {} expected {} ===\n", r.id, r.expected));
            if let Some(s) = &r.system {
                rendered.push_str(&format!("--- system ---\n{s}\n"));
            }
            rendered.push_str(&format!("--- user ---\n{}\n", r.user));
        }
        let golden_path = format!(
            "{}/tests/goldens/prompt_{}.txt",
            env!("CARGO_MANIFEST_DIR"),
            mode.as_str()
        );
        let golden = std::fs::read_to_string(&golden_path).unwrap();
        assert_eq!(rendered, golden, "golden mismatch for {}", mode.as_str());
    }
}
